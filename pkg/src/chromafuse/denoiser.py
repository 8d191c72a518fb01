"""Noise-prediction U-Net over 4-channel images, with feature taps.

The network has a contracting path of five strided convolutions and an
expansive path of five convolutions with bilinear upsampling and skip
concatenation; a final convolution maps to the 4-channel noise estimate.
The timestep enters every stage as a learned per-channel bias computed
from a sinusoidal embedding. The five post-activation expansive outputs
double as the feature representation consumed by the fusion head; their
spatial sizes step through H/16, H/8, H/4, H/2, H.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_entries, save_entries, scalar_entry
from .schedule import NoiseSchedule, schedule_from_betas

STAGES = 5
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class DenoiserConfig:
    """Width and embedding settings; depth is fixed at five stages."""

    base_width: int = 16
    emb_dim: int = 64
    in_channels: int = 4
    out_channels: int = 4

    def __post_init__(self):
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.emb_dim % 2 or self.emb_dim < 2:
            raise ValueError("emb_dim must be even and >= 2")

    def down_widths(self) -> list[int]:
        w = self.base_width
        return [w, 2 * w, 4 * w, 8 * w, 16 * w]

    def up_widths(self) -> list[int]:
        w = self.base_width
        return [8 * w, 4 * w, 2 * w, w, w]


@dataclass(frozen=True)
class DiffusionFeatureStack:
    """The five expansive-path activations for one input at one timestep."""

    features: tuple[Tensor, ...]
    t: int

    def __post_init__(self):
        if len(self.features) != STAGES:
            raise ValueError(f"expected {STAGES} feature maps, got {len(self.features)}")

    def spatial_sizes(self) -> list[tuple[int, int]]:
        return [f.shape[:2] for f in self.features]


def timestep_embed(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding: interleaved sin/cos of t over geometric frequencies."""
    if dim % 2 or dim < 2:
        raise ValueError("embedding dimension must be even and >= 2")
    if t < 0:
        raise ValueError("timestep must be >= 0")
    k = np.arange(dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * k / dim)
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(t * freqs)
    emb[1::2] = np.cos(t * freqs)
    return emb


def _kaiming(rng: np.random.Generator, kh: int, kw: int, c_in: int, c_out: int, scale: float = 1.0) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    std = scale * gain / np.sqrt(kh * kw * c_in)
    return rng.standard_normal((kh, kw, c_in, c_out)) * std


def parameter_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Deterministic name -> shape map for a given configuration."""
    down_w = config.down_widths()
    up_w = config.up_widths()
    down_in = [config.in_channels] + down_w[:-1]
    # up1 consumes the bottleneck; later stages concatenate the skip feature
    up_in = [down_w[4]] + [up_w[i - 1] + down_w[4 - i] for i in range(1, STAGES)]
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(STAGES):
        shapes[f"down{i + 1}/kernel"] = (3, 3, down_in[i], down_w[i])
        shapes[f"down{i + 1}/bias"] = (down_w[i],)
        shapes[f"down{i + 1}/temb"] = (config.emb_dim, down_w[i])
    for i in range(STAGES):
        shapes[f"up{i + 1}/kernel"] = (3, 3, up_in[i], up_w[i])
        shapes[f"up{i + 1}/bias"] = (up_w[i],)
        shapes[f"up{i + 1}/temb"] = (config.emb_dim, up_w[i])
    shapes["head/kernel"] = (3, 3, up_w[4], config.out_channels)
    shapes["head/bias"] = (config.out_channels,)
    return shapes


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Kaiming kernels, zero biases, small projections, near-zero head.

    The head kernel is scaled down by 1e-3 so initial noise predictions are
    effectively zero while every parameter still receives gradient on the
    first backward pass.
    """
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("/bias"):
            data = np.zeros(shape)
        elif name.endswith("/temb"):
            data = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name == "head/kernel":
            data = _kaiming(rng, *shape, scale=1e-3)
        else:
            data = _kaiming(rng, *shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Denoiser:
    """Noise predictor plus feature extractor over a fixed schedule."""

    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor], schedule: NoiseSchedule):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = set(expected) ^ set(params)
            raise ValueError(f"parameter names do not match configuration: {sorted(missing)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.schedule = schedule

    @classmethod
    def create(cls, config: DenoiserConfig, schedule: NoiseSchedule, rng: np.random.Generator) -> "Denoiser":
        return cls(config, init_params(config, rng), schedule)

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def _validate_input(self, image: np.ndarray, t: int) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != self.config.in_channels:
            raise ValueError(f"expected (H, W, {self.config.in_channels}) input, got {arr.shape}")
        if arr.shape[0] % 16 or arr.shape[1] % 16:
            raise ValueError(f"input height and width must be divisible by 16, got {arr.shape[:2]}")
        self.schedule.check(t)
        return arr

    def _stage(self, x: Tensor, name: str, temb: Tensor, stride: int) -> Tensor:
        p = self.params
        out = ad.conv2d(x, p[f"{name}/kernel"], stride=stride, padding=1)
        out = ad.add(out, p[f"{name}/bias"])
        proj = ad.reshape(ad.matmul(ad.reshape(temb, (1, -1)), p[f"{name}/temb"]), (-1,))
        out = ad.add(out, proj)
        return ad.leaky_relu(out, LEAKY_SLOPE)

    def forward(self, image: np.ndarray, t: int) -> tuple[Tensor, DiffusionFeatureStack]:
        """Shared forward pass returning the noise estimate and feature taps."""
        arr = self._validate_input(image, t)
        temb = Tensor(timestep_embed(t, self.config.emb_dim))
        x = Tensor(arr)
        skips: list[Tensor] = []
        for i in range(STAGES):
            x = self._stage(x, f"down{i + 1}", temb, stride=1 if i == 0 else 2)
            skips.append(x)
        g = skips[-1]
        ups: list[Tensor] = []
        for i in range(STAGES):
            if i == 0:
                inp = g
            else:
                skip = skips[STAGES - 1 - i]
                h, w = skip.shape[0], skip.shape[1]
                inp = ad.concat([ad.resample_bilinear(g, h, w), skip], axis=-1)
            g = self._stage(inp, f"up{i + 1}", temb, stride=1)
            ups.append(g)
        noise = ad.add(ad.conv2d(ups[-1], self.params["head/kernel"], stride=1, padding=1), self.params["head/bias"])
        return noise, DiffusionFeatureStack(features=tuple(ups), t=t)

    def predict_noise_tensor(self, image: np.ndarray, t: int) -> Tensor:
        return self.forward(image, t)[0]

    def predict_noise(self, image: np.ndarray, t: int) -> np.ndarray:
        with ad.no_grad():
            return self.forward(image, t)[0].data

    def extract_features(self, image: np.ndarray, t: int) -> DiffusionFeatureStack:
        return self.forward(image, t)[1]

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        entries = {f"param/{name}": p.data for name, p in self.params.items()}
        entries["schedule/beta"] = self.schedule.beta
        entries["meta/base_width"] = scalar_entry(self.config.base_width)
        entries["meta/emb_dim"] = scalar_entry(self.config.emb_dim)
        save_entries(path, entries)

    @classmethod
    def load(cls, path) -> "Denoiser":
        entries, _ = load_entries(path)
        try:
            config = DenoiserConfig(
                base_width=int(entries["meta/base_width"]),
                emb_dim=int(entries["meta/emb_dim"]),
            )
            schedule = schedule_from_betas(entries["schedule/beta"])
            params = {
                name[len("param/") :]: Tensor(arr, requires_grad=False, name=name[len("param/") :])
                for name, arr in entries.items()
                if name.startswith("param/")
            }
        except KeyError as exc:
            raise ValueError(f"checkpoint {path} is missing entry {exc}") from exc
        return cls(config, params, schedule)
