"""Forward and reverse joint diffusion over 4-channel IR+visible images.

Images travel through this module as (H, W, 4) arrays in diffusion space
[-1, 1], channel order R, G, B, IR. The forward corruption admits both a
single Markov step and the closed-form jump to any timestep; the reverse
chain denoises with a learned noise predictor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .optim import AdamState, adam_step
from .schedule import NoiseSchedule

CHANNELS = 4


def check_multichannel(image: np.ndarray) -> np.ndarray:
    """Validate an (H, W, 4) image array and return it as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != CHANNELS:
        raise ValueError(f"expected an (H, W, 4) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image values must be finite")
    return arr


def to_diffusion_space(image01: np.ndarray) -> np.ndarray:
    """Map [0, 1] storage values to the [-1, 1] range the chain runs in."""
    return np.asarray(image01, dtype=np.float64) * 2.0 - 1.0


def from_diffusion_space(image: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map back to [0, 1] for saving."""
    return (np.clip(image, -1.0, 1.0) + 1.0) * 0.5


@dataclass(frozen=True)
class DiffusionSample:
    """A noisy image at one timestep plus the noise that produced it."""

    image: np.ndarray
    t: int
    noise: np.ndarray


class NoisePredictor(Protocol):
    """Anything that predicts the added noise from (image, t)."""

    def predict_noise(self, image: np.ndarray, t: int) -> np.ndarray: ...

    def predict_noise_tensor(self, image: np.ndarray, t: int) -> Tensor: ...


def q_sample(i0: np.ndarray, t: int, gamma: np.ndarray, s: NoiseSchedule) -> DiffusionSample:
    """Closed-form forward jump: sqrt(a_bar_t) * I0 + sqrt(1 - a_bar_t) * gamma."""
    i0 = check_multichannel(i0)
    s.check(t)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != i0.shape:
        raise ValueError(f"noise shape {gamma.shape} != image shape {i0.shape}")
    a_bar = s.alpha_bar[t - 1]
    image = np.sqrt(a_bar) * i0 + np.sqrt(1.0 - a_bar) * gamma
    return DiffusionSample(image=image, t=t, noise=gamma)


def forward_step(i_prev: np.ndarray, t: int, s: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One Markov corruption step: sqrt(a_t) * I_{t-1} + sqrt(1 - a_t) * noise."""
    i_prev = check_multichannel(i_prev)
    s.check(t)
    a = s.alpha[t - 1]
    if a == 1.0:
        return i_prev.copy()
    gamma = rng.standard_normal(i_prev.shape)
    return np.sqrt(a) * i_prev + np.sqrt(1.0 - a) * gamma


def posterior_stats(
    i_t: np.ndarray, predicted_noise: np.ndarray, t: int, s: NoiseSchedule
) -> tuple[np.ndarray, float]:
    """Reverse-step mean and variance given the predicted noise.

    mean = (I_t - beta_t / sqrt(1 - a_bar_t) * eps) / sqrt(a_t);
    variance = (1 - a_bar_{t-1}) / (1 - a_bar_t) * beta_t  (zero at t = 1).
    """
    i_t = check_multichannel(i_t)
    s.check(t)
    predicted_noise = np.asarray(predicted_noise, dtype=np.float64)
    if predicted_noise.shape != i_t.shape:
        raise ValueError(f"noise shape {predicted_noise.shape} != image shape {i_t.shape}")
    idx = t - 1
    beta = s.beta[idx]
    mu = (i_t - beta / np.sqrt(1.0 - s.alpha_bar[idx]) * predicted_noise) / np.sqrt(s.alpha[idx])
    return mu, float(s.sigma2[idx])


def reverse_step(
    i_t: np.ndarray,
    t: int,
    denoiser: NoisePredictor,
    s: NoiseSchedule,
    z: np.ndarray | None,
) -> np.ndarray:
    """One ancestral denoising step: mean + sigma_t * z, with z forced to 0 at t = 1."""
    predicted = denoiser.predict_noise(i_t, t)
    mu, sigma2 = posterior_stats(i_t, predicted, t, s)
    if t == 1 or sigma2 == 0.0 or z is None:
        return mu
    z = np.asarray(z, dtype=np.float64)
    if z.shape != mu.shape:
        raise ValueError(f"z shape {z.shape} != image shape {mu.shape}")
    return mu + np.sqrt(sigma2) * z


def draw_training_targets(
    batch: Sequence[np.ndarray], s: NoiseSchedule, rng: np.random.Generator
) -> list[DiffusionSample]:
    """Sample (t, gamma) per item and build the noisy inputs for the loss."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    samples = []
    for i0 in batch:
        t = int(rng.integers(1, s.timesteps + 1))
        gamma = rng.standard_normal(np.shape(i0))
        samples.append(q_sample(i0, t, gamma, s))
    return samples


def diffusion_loss(
    batch: Sequence[np.ndarray],
    denoiser: NoisePredictor,
    s: NoiseSchedule,
    rng: np.random.Generator,
    squared: bool = False,
) -> Tensor:
    """Mean noise-prediction error over a batch.

    Per item the error is the L2 norm of (gamma - prediction); pass
    ``squared=True`` for the squared-norm variant. Timesteps are uniform
    over {1..T} and noise is standard normal, both drawn from ``rng``.
    """
    samples = draw_training_targets(batch, s, rng)
    return diffusion_loss_given(samples, denoiser, squared=squared)


def diffusion_loss_given(
    samples: Sequence[DiffusionSample], denoiser: NoisePredictor, squared: bool = False
) -> Tensor:
    """Noise-prediction loss for pre-drawn (noisy image, t, gamma) samples."""
    if len(samples) == 0:
        raise ValueError("batch must be non-empty")
    total = None
    for sample in samples:
        pred = denoiser.predict_noise_tensor(sample.image, sample.t)
        diff = ad.sub(Tensor(sample.noise), pred)
        sq = ad.tensor_sum(ad.mul(diff, diff))
        term = sq if squared else ad.sqrt(sq)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(samples))


def sample_pair(
    denoiser: NoisePredictor,
    s: NoiseSchedule,
    height: int,
    width: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Generate a fresh IR+visible pair by ancestral sampling from pure noise.

    Returns an (H, W, 4) array in [0, 1]; channels 0..2 are the visible
    image and channel 3 the infrared image.
    """
    if height % 16 or width % 16:
        raise ValueError("height and width must be divisible by 16")
    image = rng.standard_normal((height, width, CHANNELS))
    for t in range(s.timesteps, 0, -1):
        z = rng.standard_normal(image.shape) if t > 1 else None
        image = reverse_step(image, t, denoiser, s, z)
    return from_diffusion_space(image)


def train_diffusion(
    dataset: Sequence[np.ndarray],
    denoiser,
    s: NoiseSchedule,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    lr: float = 1e-4,
    squared_loss: bool = False,
) -> list[float]:
    """Adam training loop for the noise predictor; returns per-step losses."""
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    if steps < 0 or batch_size < 1:
        raise ValueError("steps must be >= 0 and batch_size >= 1")
    denoiser.set_trainable(True)
    state = AdamState(lr=lr)
    history: list[float] = []
    n = len(dataset)
    for _ in range(steps):
        picks = rng.integers(0, n, size=min(batch_size, n))
        batch = [dataset[int(i)] for i in picks]
        loss = diffusion_loss(batch, denoiser, s, rng, squared=squared_loss)
        ad.zero_grads(denoiser.params.values())
        backward(loss)
        grads = {name: p.grad for name, p in denoiser.params.items() if p.grad is not None}
        adam_step(denoiser.params, grads, state)
        history.append(loss.item())
    return history
