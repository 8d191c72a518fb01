"""Joint IR+visible diffusion, chromatic feature fusion, and evaluation."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward
from .checkpoint import load_entries, save_entries
from .data import DatasetManifest, gen_synthetic, load_pair, save_image
from .denoiser import Denoiser, DenoiserConfig, DiffusionFeatureStack, timestep_embed
from .diffusion import (
    DiffusionSample,
    diffusion_loss,
    forward_step,
    posterior_stats,
    q_sample,
    reverse_step,
    sample_pair,
    train_diffusion,
)
from .fusion import (
    FusionModel,
    FusionTrainConfig,
    aggregate_features,
    fuse,
    fusion_head,
    initialize_fusion_model,
    loss_fusion,
    loss_mcg,
    loss_mci,
    sobel_gradient,
    train_fusion,
)
from .metrics import (
    MetricReport,
    evaluate,
    metric_delta_e,
    metric_mi,
    metric_qabf,
    metric_sd,
    metric_sf,
    metric_vif,
)
from .optim import AdamState, adam_step
from .schedule import NoiseSchedule, make_linear_schedule

__all__ = [
    "AdamState",
    "DatasetManifest",
    "Denoiser",
    "DenoiserConfig",
    "DiffusionFeatureStack",
    "DiffusionSample",
    "FusionModel",
    "FusionTrainConfig",
    "MetricReport",
    "NoiseSchedule",
    "Tensor",
    "adam_step",
    "aggregate_features",
    "backward",
    "diffusion_loss",
    "evaluate",
    "forward_step",
    "fuse",
    "fusion_head",
    "gen_synthetic",
    "initialize_fusion_model",
    "load_entries",
    "load_pair",
    "loss_fusion",
    "loss_mcg",
    "loss_mci",
    "make_linear_schedule",
    "metric_delta_e",
    "metric_mi",
    "metric_qabf",
    "metric_sd",
    "metric_sf",
    "metric_vif",
    "posterior_stats",
    "q_sample",
    "reverse_step",
    "sample_pair",
    "save_entries",
    "save_image",
    "sobel_gradient",
    "timestep_embed",
    "train_diffusion",
    "train_fusion",
]
