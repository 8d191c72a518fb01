"""Feature fusion into a chromatic image, its losses, and training.

Feature stacks from three timesteps are resampled to full resolution,
projected to a common width by per-stage 1x1 convolutions, summed across
stages and concatenated across timesteps. A small convolutional head maps
the result to a 3-channel image in [0, 1].

Two losses drive training: a gradient term pulling each fused channel's
edge map toward the strongest source edges, and an intensity term pulling
each fused channel toward the brighter of infrared and that visible
channel. Both are averaged over H*W and summed over the three channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .checkpoint import load_entries, save_entries, scalar_entry
from .denoiser import LEAKY_SLOPE, Denoiser, DenoiserConfig, DiffusionFeatureStack, _kaiming
from .diffusion import check_multichannel, q_sample, to_diffusion_space
from .optim import AdamState, adam_step

N_TIMESTEPS = 3

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


@dataclass(frozen=True)
class FusionTrainConfig:
    """Hyperparameters for the fusion stage.

    Full-scale defaults follow the training recipe (crop 160, batch 24,
    300 epochs, lr 1e-4, features at timesteps 5/50/100); desk-scale runs
    override them. ``use_diffusion_features=False`` switches to the
    ablation path that feeds the clean image through the network at t=1.
    """

    feature_timesteps: tuple[int, int, int] = (5, 50, 100)
    crop_size: int = 160
    batch_size: int = 24
    epochs: int = 300
    lr: float = 1e-4
    feature_width: int = 32
    use_diffusion_features: bool = True
    feature_noise_seed: int = 0

    def __post_init__(self):
        if len(self.feature_timesteps) != N_TIMESTEPS:
            raise ValueError(f"exactly {N_TIMESTEPS} feature timesteps required")
        if self.crop_size % 16:
            raise ValueError("crop_size must be divisible by 16")
        if self.feature_width < 1:
            raise ValueError("feature_width must be >= 1")


def fusion_parameter_shapes(denoiser_config: DenoiserConfig, feature_width: int) -> dict[str, tuple[int, ...]]:
    up_w = denoiser_config.up_widths()
    shapes: dict[str, tuple[int, ...]] = {}
    for i, width in enumerate(up_w):
        shapes[f"proj{i + 1}/kernel"] = (1, 1, width, feature_width)
    c = feature_width
    shapes["head1/kernel"] = (3, 3, N_TIMESTEPS * c, c)
    shapes["head1/bias"] = (c,)
    shapes["head2/kernel"] = (3, 3, c, c)
    shapes["head2/bias"] = (c,)
    shapes["head3/kernel"] = (3, 3, c, 3)
    shapes["head3/bias"] = (3,)
    return shapes


def init_fusion_params(
    denoiser_config: DenoiserConfig, feature_width: int, rng: np.random.Generator
) -> dict[str, Tensor]:
    """Kaiming projections and hidden convs; near-zero final layer so the
    first fused output sits at 0.5 while gradients still flow."""
    params: dict[str, Tensor] = {}
    for name, shape in fusion_parameter_shapes(denoiser_config, feature_width).items():
        if name.endswith("/bias"):
            data = np.zeros(shape)
        elif name == "head3/kernel":
            data = _kaiming(rng, *shape, scale=1e-3)
        else:
            data = _kaiming(rng, *shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class FusionModel:
    """Projection + head parameters bound to a denoiser configuration."""

    def __init__(
        self,
        denoiser_config: DenoiserConfig,
        cfg: FusionTrainConfig,
        params: dict[str, Tensor],
    ):
        expected = fusion_parameter_shapes(denoiser_config, cfg.feature_width)
        if set(params) != set(expected):
            raise ValueError(f"fusion parameter names do not match: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"fusion parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.denoiser_config = denoiser_config
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, denoiser_config: DenoiserConfig, cfg: FusionTrainConfig, rng: np.random.Generator) -> "FusionModel":
        return cls(denoiser_config, cfg, init_fusion_params(denoiser_config, cfg.feature_width, rng))

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def save(self, path) -> None:
        entries = {f"param/{name}": p.data for name, p in self.params.items()}
        entries["meta/feature_width"] = scalar_entry(self.cfg.feature_width)
        entries["meta/feature_timesteps"] = np.asarray(self.cfg.feature_timesteps, dtype=np.float64)
        entries["meta/use_diffusion_features"] = scalar_entry(1.0 if self.cfg.use_diffusion_features else 0.0)
        entries["meta/base_width"] = scalar_entry(self.denoiser_config.base_width)
        save_entries(path, entries)

    @classmethod
    def load(cls, path, cfg: FusionTrainConfig | None = None) -> "FusionModel":
        entries, _ = load_entries(path)
        try:
            denoiser_config = DenoiserConfig(base_width=int(entries["meta/base_width"]))
            stored = FusionTrainConfig(
                feature_timesteps=tuple(int(t) for t in entries["meta/feature_timesteps"]),
                feature_width=int(entries["meta/feature_width"]),
                use_diffusion_features=bool(entries["meta/use_diffusion_features"]),
            )
        except KeyError as exc:
            raise ValueError(f"checkpoint {path} is missing entry {exc}") from exc
        if cfg is not None:
            stored = replace(
                cfg,
                feature_timesteps=stored.feature_timesteps,
                feature_width=stored.feature_width,
                use_diffusion_features=stored.use_diffusion_features,
            )
        params = {
            name[len("param/") :]: Tensor(arr, requires_grad=False, name=name[len("param/") :])
            for name, arr in entries.items()
            if name.startswith("param/")
        }
        return cls(denoiser_config, stored, params)


def initialize_fusion_model(
    sample_pair01: np.ndarray,
    denoiser: Denoiser,
    cfg: FusionTrainConfig,
    rng: np.random.Generator,
) -> FusionModel:
    """Fresh fusion parameters with scale-calibrated projections.

    Summing five stage maps hands the head whatever magnitude the
    denoiser's activations happen to have (an order of magnitude above
    unit scale for a trained network). One deterministic forward pass on
    a sample pair measures the aggregate's spread, and all projection
    kernels are divided by it so the head starts in the linear region of
    its Tanh instead of on the saturation cliff.
    """
    model = FusionModel.create(denoiser.config, cfg, rng)
    with ad.no_grad():
        stacks = extract_fusion_stacks(sample_pair01, denoiser, cfg)
        spread = float(aggregate_features(stacks, model).data.std())
    if spread > 0.0:
        for i in range(len(stacks[0].features)):
            kernel = model.params[f"proj{i + 1}/kernel"]
            kernel.data = kernel.data / spread
    return model


def aggregate_features(stacks: list[DiffusionFeatureStack], model: FusionModel) -> Tensor:
    """Resample every stage map to full size, project to a common width,
    sum across stages, and concatenate the per-timestep sums channel-wise."""
    if len(stacks) != N_TIMESTEPS:
        raise ValueError(f"expected {N_TIMESTEPS} feature stacks, got {len(stacks)}")
    h, w = stacks[0].features[-1].shape[:2]
    expected_ladder = [(h // 16, w // 16), (h // 8, w // 8), (h // 4, w // 4), (h // 2, w // 2), (h, w)]
    per_timestep: list[Tensor] = []
    for stack in stacks:
        if stack.spatial_sizes() != expected_ladder:
            raise ValueError(f"feature ladder {stack.spatial_sizes()} does not match {expected_ladder}")
        total = None
        for i, feat in enumerate(stack.features):
            resampled = ad.resample_bilinear(feat, h, w)
            projected = ad.conv2d(resampled, model.params[f"proj{i + 1}/kernel"], stride=1, padding=0)
            total = projected if total is None else ad.add(total, projected)
        per_timestep.append(total)
    return ad.concat(per_timestep, axis=-1)


def fusion_head(features: Tensor, model: FusionModel) -> Tensor:
    """Two 3x3 convolutions with Leaky ReLU, a final 3x3 convolution with
    Tanh, then the [-1, 1] -> [0, 1] output mapping."""
    p = model.params
    expected_c = N_TIMESTEPS * model.cfg.feature_width
    if features.shape[-1] != expected_c:
        raise ValueError(f"feature width {features.shape[-1]} does not match head input {expected_c}")
    x = ad.leaky_relu(ad.add(ad.conv2d(features, p["head1/kernel"], 1, 1), p["head1/bias"]), LEAKY_SLOPE)
    x = ad.leaky_relu(ad.add(ad.conv2d(x, p["head2/kernel"], 1, 1), p["head2/bias"]), LEAKY_SLOPE)
    x = ad.tanh(ad.add(ad.conv2d(x, p["head3/kernel"], 1, 1), p["head3/bias"]))
    return ad.mul(ad.add(x, 1.0), 0.5)


# -- losses ---------------------------------------------------------------

def _as_plane(x, what: str):
    if isinstance(x, Tensor):
        data = x
        shape = x.shape
    else:
        data = np.asarray(x, dtype=np.float64)
        shape = data.shape
    if len(shape) == 3 and shape[2] == 1:
        return ad.reshape(data, shape[:2]) if isinstance(data, Tensor) else data[:, :, 0]
    if len(shape) != 2:
        raise ValueError(f"{what} must be a single-channel (H, W) image, got shape {shape}")
    return data


def sobel_gradient(channel, signed: bool = False) -> Tensor:
    """L1 Sobel response |Gx| + |Gy| of one channel.

    Borders are replicate-padded so a constant image has an identically
    zero response. ``signed=True`` returns Gx + Gy instead, the raw
    directional sum used by the literal form of the gradient loss.
    """
    plane = _as_plane(channel, "sobel input")
    h, w = (plane.shape if isinstance(plane, Tensor) else plane.shape)[:2]
    if h < 3 or w < 3:
        raise ValueError(f"sobel needs at least a 3x3 image, got {h}x{w}")
    x = plane if isinstance(plane, Tensor) else Tensor(plane)
    x3 = ad.pad_edge2d(ad.reshape(x, (h, w, 1)), 1)
    gx = ad.conv2d(x3, Tensor(SOBEL_X.reshape(3, 3, 1, 1)), stride=1, padding=0)
    gy = ad.conv2d(x3, Tensor(SOBEL_Y.reshape(3, 3, 1, 1)), stride=1, padding=0)
    if signed:
        combined = ad.add(gx, gy)
    else:
        combined = ad.add(ad.absolute(gx), ad.absolute(gy))
    return ad.reshape(combined, (h, w))


def _check_fusion_inputs(fused, ir, vis):
    f = fused if isinstance(fused, Tensor) else Tensor(np.asarray(fused, dtype=np.float64))
    if len(f.shape) != 3 or f.shape[2] != 3:
        raise ValueError(f"fused image must be (H, W, 3), got {f.shape}")
    ir_plane = _as_plane(ir, "infrared image")
    ir_arr = ir_plane.data if isinstance(ir_plane, Tensor) else ir_plane
    vis_arr = np.asarray(vis, dtype=np.float64)
    if vis_arr.ndim != 3 or vis_arr.shape[2] != 3:
        raise ValueError(f"visible image must be (H, W, 3), got {vis_arr.shape}")
    if f.shape[:2] != vis_arr.shape[:2] or f.shape[:2] != ir_arr.shape[:2]:
        raise ValueError(
            f"shape mismatch: fused {f.shape[:2]}, visible {vis_arr.shape[:2]}, infrared {ir_arr.shape[:2]}"
        )
    return f, ir_arr, vis_arr


def loss_mcg(fused, ir, vis, literal: bool = False) -> Tensor:
    """Gradient loss: per channel, L1 distance between the fused edge map
    and the elementwise max of the source edge maps, divided by H*W.

    By default the fused gradient enters as a magnitude; ``literal=True``
    uses the signed directional sum instead, which penalizes edges whose
    signed response disagrees with the nonnegative target.
    """
    f, ir_arr, vis_arr = _check_fusion_inputs(fused, ir, vis)
    h, w = f.shape[:2]
    grad_ir = sobel_gradient(ir_arr).data
    total = None
    for i in range(3):
        target = np.maximum(grad_ir, sobel_gradient(vis_arr[:, :, i]).data)
        grad_f = sobel_gradient(ad.take_channel(f, i), signed=literal)
        term = ad.tensor_sum(ad.absolute(ad.sub(grad_f, Tensor(target))))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / (h * w))


def loss_mci(fused, ir, vis) -> Tensor:
    """Intensity loss: per channel, L1 distance between the fused channel
    and max(infrared, visible channel), divided by H*W."""
    f, ir_arr, vis_arr = _check_fusion_inputs(fused, ir, vis)
    h, w = f.shape[:2]
    total = None
    for i in range(3):
        target = np.maximum(ir_arr, vis_arr[:, :, i])
        term = ad.tensor_sum(ad.absolute(ad.sub(ad.take_channel(f, i), Tensor(target))))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / (h * w))


def loss_fusion(fused, ir, vis, literal_gradient: bool = False) -> Tensor:
    """Total fusion loss: gradient term plus intensity term."""
    return ad.add(loss_mcg(fused, ir, vis, literal=literal_gradient), loss_mci(fused, ir, vis))


# -- end-to-end fusion ------------------------------------------------------

def _pad_to_multiple(image: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, int, int]:
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image, h, w


def extract_fusion_stacks(
    pair01: np.ndarray,
    denoiser: Denoiser,
    cfg: FusionTrainConfig,
    rng: np.random.Generator | None = None,
) -> list[DiffusionFeatureStack]:
    """Feature stacks for one [0, 1] pair, on either the diffusion path or
    the ablation path.

    With diffusion features, the pair is jumped to each configured timestep
    with noise from ``rng`` (or a generator seeded by the configured
    feature-noise seed) before extraction. The ablation path runs the
    unchanged network once on the clean image at t=1 and reuses that stack
    for all three slots, keeping the head input shape identical.
    """
    image = to_diffusion_space(check_multichannel(pair01))
    if not cfg.use_diffusion_features:
        stack = denoiser.extract_features(image, 1)
        return [stack] * N_TIMESTEPS
    if rng is None:
        rng = np.random.default_rng(cfg.feature_noise_seed)
    stacks = []
    for t in cfg.feature_timesteps:
        gamma = rng.standard_normal(image.shape)
        noisy = q_sample(image, t, gamma, denoiser.schedule)
        stacks.append(denoiser.extract_features(noisy.image, t))
    return stacks


def fuse(
    pair01: np.ndarray,
    denoiser: Denoiser,
    model: FusionModel,
    cfg: FusionTrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Fuse one [0, 1] IR+visible pair into a [0, 1] 3-channel image.

    Deterministic for a fixed feature-noise seed. Inputs whose sizes are
    not multiples of 16 are edge-padded for the network and cropped back.
    """
    cfg = cfg or model.cfg
    pair = check_multichannel(pair01)
    padded, h, w = _pad_to_multiple(pair)
    with ad.no_grad():
        stacks = extract_fusion_stacks(padded, denoiser, cfg, rng)
        fused = fusion_head(aggregate_features(stacks, model), model)
    return fused.data[:h, :w, :]


def _random_crop(pair: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = pair.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return pair[top : top + size, left : left + size, :]


@dataclass
class FusionTrainResult:
    model: FusionModel
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def train_fusion(
    dataset: list[np.ndarray],
    denoiser: Denoiser,
    cfg: FusionTrainConfig,
    rng: np.random.Generator,
) -> FusionTrainResult:
    """Train projections and head with Adam on the fusion loss.

    The denoiser is frozen throughout; per-epoch mean losses are recorded.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    for pair in dataset:
        check_multichannel(pair)
    denoiser.set_trainable(False)
    model = initialize_fusion_model(dataset[0], denoiser, cfg, rng)
    state = AdamState(lr=cfg.lr)
    result = FusionTrainResult(model=model)
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            loss = None
            for idx in batch_idx:
                crop = _random_crop(dataset[int(idx)], cfg.crop_size, rng)
                stacks = extract_fusion_stacks(crop, denoiser, cfg, rng)
                fused = fusion_head(aggregate_features(stacks, model), model)
                item = loss_fusion(fused, crop[:, :, 3], crop[:, :, :3])
                loss = item if loss is None else ad.add(loss, item)
            loss = ad.mul(loss, 1.0 / len(batch_idx))
            ad.zero_grads(model.params.values())
            backward(loss)
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, state)
            value = loss.item()
            epoch_losses.append(value)
            result.step_losses.append(value)
        result.epoch_losses.append(float(np.mean(epoch_losses)))
    return result


def evaluate_fusion_loss(
    dataset: list[np.ndarray],
    denoiser: Denoiser,
    model: FusionModel,
    cfg: FusionTrainConfig | None = None,
) -> float:
    """Mean fusion loss over whole pairs with the configured feature seed."""
    cfg = cfg or model.cfg
    losses = []
    for pair in dataset:
        fused = fuse(pair, denoiser, model, cfg)
        losses.append(loss_fusion(Tensor(fused), pair[:, :, 3], pair[:, :, :3]).item())
    return float(np.mean(losses))
