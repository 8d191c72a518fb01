"""Command-line surface tying the pipeline together.

Subcommands: gen-synthetic, train-diffusion, train-fusion, fuse, sample,
eval. Flag defaults are desk scale; the full-scale recipe (crop 160,
batch 24, 300 epochs, T=1000) is reachable through flags or a config
file. Every run writes a reproducibility record into its output
directory. Optional config files are INI-style: one section per
subcommand, keys named like the long flags with underscores; explicit
flags win over file values.
"""

from __future__ import annotations

import argparse
import configparser
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetManifest,
    gen_synthetic,
    load_image,
    load_manifest,
    load_pair,
    save_image,
)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import sample_pair, to_diffusion_space, train_diffusion
from .fusion import FusionModel, FusionTrainConfig, fuse, train_fusion
from .metrics import evaluate
from .schedule import NoiseSchedule, make_linear_schedule


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one run: schedule, networks, seed, output dir.

    Construction goes through the owning config types, so every field is
    validated against its declared ranges before any work starts.
    """

    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser: DenoiserConfig = DenoiserConfig()
    fusion: FusionTrainConfig = FusionTrainConfig()
    seed: int = 0
    out_dir: Path = Path("runs")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)


def _write_run_record(out_dir: Path, command: str, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "[meta]",
        f"command = {command}",
        f"package_version = {__version__}",
        f"numpy_version = {np.__version__}",
        f"python = {platform.python_version()}",
        "",
        "[params]",
    ]
    lines += [f"{key} = {value}" for key, value in sorted(params.items())]
    (out_dir / "run_record.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve(args: argparse.Namespace, spec: dict[str, tuple]) -> dict:
    """Merge CLI flags, config-file values, and hard defaults."""
    file_values: dict[str, str] = {}
    config_path = getattr(args, "config", None)
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise FileNotFoundError(f"config file not found: {config_path}")
        if parser.has_section(args.command):
            file_values = dict(parser.items(args.command))
    resolved = {}
    for key, (caster, default) in spec.items():
        flag_value = getattr(args, key)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            raw = file_values[key]
            resolved[key] = caster(raw)
        else:
            resolved[key] = default
    return resolved


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_timesteps(raw: str) -> tuple[int, int, int]:
    parts = [int(p) for p in raw.split(",") if p.strip()]
    if len(parts) != 3:
        raise ValueError("feature timesteps must be three comma-separated integers")
    return tuple(parts)


def _load_dataset(manifest: DatasetManifest) -> list[np.ndarray]:
    pairs = manifest.load_pairs()
    if not pairs:
        raise ValueError("manifest lists no pairs")
    return pairs


# -- subcommand handlers --------------------------------------------------------

def _cmd_gen_synthetic(args) -> int:
    spec = {
        "count": (int, 64),
        "height": (int, 32),
        "width": (int, 32),
        "seed": (int, 0),
        "split": (str, "train"),
    }
    p = _resolve(args, spec)
    out_dir = Path(args.out_dir)
    manifest = gen_synthetic(p["count"], p["height"], p["width"], p["seed"], out_dir, split=p["split"])
    _write_run_record(out_dir, "gen-synthetic", p)
    print(f"wrote {len(manifest)} pairs under {out_dir}")
    return 0


def _cmd_train_diffusion(args) -> int:
    spec = {
        "steps": (int, 2000),
        "batch_size": (int, 8),
        "lr": (float, 1e-4),
        "seed": (int, 0),
        "base_width": (int, 16),
        "emb_dim": (int, 64),
        "timesteps": (int, 200),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "squared_loss": (_parse_bool, False),
    }
    p = _resolve(args, spec)
    out_dir = Path(args.out_dir)
    manifest = load_manifest(args.manifest)
    dataset = [to_diffusion_space(pair) for pair in _load_dataset(manifest)]
    run_config = RunConfig(
        timesteps=p["timesteps"],
        beta_start=p["beta_start"],
        beta_end=p["beta_end"],
        denoiser=DenoiserConfig(base_width=p["base_width"], emb_dim=p["emb_dim"]),
        seed=p["seed"],
        out_dir=out_dir,
    )
    schedule = run_config.schedule()
    rng = np.random.default_rng(run_config.seed)
    denoiser = Denoiser.create(run_config.denoiser, schedule, rng)
    history = train_diffusion(
        dataset, denoiser, schedule, p["steps"], p["batch_size"], rng, lr=p["lr"], squared_loss=p["squared_loss"]
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    denoiser.save(out_dir / "denoiser.difz")
    (out_dir / "loss_history.txt").write_text("".join(f"{v:.10f}\n" for v in history), encoding="utf-8")
    _write_run_record(out_dir, "train-diffusion", {**p, "manifest": args.manifest})
    if history:
        print(f"trained diffusion for {p['steps']} steps; first loss {history[0]:.4f}, last {history[-1]:.4f}")
    print(f"checkpoint written to {out_dir / 'denoiser.difz'}")
    return 0


def _cmd_train_fusion(args) -> int:
    spec = {
        "epochs": (int, 25),
        "batch_size": (int, 8),
        "crop_size": (int, 32),
        "lr": (float, 1e-3),
        "feature_width": (int, 32),
        "feature_timesteps": (_parse_timesteps, (5, 50, 100)),
        "feature_noise_seed": (int, 0),
        "seed": (int, 0),
    }
    p = _resolve(args, spec)
    out_dir = Path(args.out_dir)
    manifest = load_manifest(args.manifest)
    dataset = _load_dataset(manifest)
    denoiser = Denoiser.load(args.denoiser)
    run_config = RunConfig(
        timesteps=denoiser.schedule.timesteps,
        denoiser=denoiser.config,
        fusion=FusionTrainConfig(
            feature_timesteps=tuple(p["feature_timesteps"]),
            crop_size=p["crop_size"],
            batch_size=p["batch_size"],
            epochs=p["epochs"],
            lr=p["lr"],
            feature_width=p["feature_width"],
            use_diffusion_features=not args.no_diffusion,
            feature_noise_seed=p["feature_noise_seed"],
        ),
        seed=p["seed"],
        out_dir=out_dir,
    )
    cfg = run_config.fusion
    for t in cfg.feature_timesteps:
        denoiser.schedule.check(t)
    rng = np.random.default_rng(run_config.seed)
    result = train_fusion(dataset, denoiser, cfg, rng)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.model.save(out_dir / "fusion.difz")
    (out_dir / "loss_history.txt").write_text(
        "".join(f"{v:.10f}\n" for v in result.epoch_losses), encoding="utf-8"
    )
    _write_run_record(
        out_dir,
        "train-fusion",
        {**p, "manifest": args.manifest, "denoiser": args.denoiser, "no_diffusion": args.no_diffusion},
    )
    print(
        f"trained fusion head for {cfg.epochs} epochs"
        + (f"; first epoch loss {result.epoch_losses[0]:.4f}, last {result.epoch_losses[-1]:.4f}" if result.epoch_losses else "")
    )
    print(f"checkpoint written to {out_dir / 'fusion.difz'}")
    return 0


def _cmd_fuse(args) -> int:
    spec = {"feature_noise_seed": (int, 0)}
    p = _resolve(args, spec)
    out_dir = Path(args.out_dir)
    manifest = load_manifest(args.manifest)
    denoiser = Denoiser.load(args.denoiser)
    model = FusionModel.load(args.fusion)
    cfg = FusionTrainConfig(
        feature_timesteps=model.cfg.feature_timesteps,
        feature_width=model.cfg.feature_width,
        use_diffusion_features=model.cfg.use_diffusion_features,
        feature_noise_seed=p["feature_noise_seed"],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        pair = load_pair(entry.vis_path, entry.ir_path)
        fused = fuse(pair, denoiser, model, cfg)
        save_image(fused, out_dir / f"{entry.pair_id}.png")
    _write_run_record(
        out_dir,
        "fuse",
        {**p, "manifest": args.manifest, "denoiser": args.denoiser, "fusion": args.fusion},
    )
    print(f"fused {len(manifest)} pairs into {out_dir}")
    return 0


def _cmd_sample(args) -> int:
    spec = {
        "count": (int, 4),
        "height": (int, 32),
        "width": (int, 32),
        "seed": (int, 0),
    }
    p = _resolve(args, spec)
    out_dir = Path(args.out_dir)
    denoiser = Denoiser.load(args.denoiser)
    rng = np.random.default_rng(p["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(p["count"]):
        pair = sample_pair(denoiser, denoiser.schedule, p["height"], p["width"], rng)
        save_image(pair[:, :, :3], out_dir / f"sample{i:04d}_vis.png")
        save_image(pair[:, :, 3], out_dir / f"sample{i:04d}_ir.png")
    _write_run_record(out_dir, "sample", {**p, "denoiser": args.denoiser})
    print(f"wrote {p['count']} generated pairs to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    out_dir = Path(args.out_dir)
    manifest = load_manifest(args.manifest)
    fused_dir = Path(args.fused_dir)
    ids, pairs, fused_images = [], [], []
    for entry in manifest.entries:
        fused_path = fused_dir / f"{entry.pair_id}.png"
        if not fused_path.exists():
            raise FileNotFoundError(f"no fused image for pair {entry.pair_id!r} at {fused_path}")
        ids.append(entry.pair_id)
        pairs.append(load_pair(entry.vis_path, entry.ir_path))
        fused_images.append(load_image(fused_path))
    report = evaluate(ids, pairs, fused_images)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out_dir / "records.tsv").write_text(report.to_records(), encoding="utf-8")
    _write_run_record(out_dir, "eval", {"manifest": args.manifest, "fused_dir": args.fused_dir})
    print(report.to_table(), end="")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chromafuse",
        description="Joint IR+visible diffusion, chromatic fusion, and fusion-quality evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="INI config file; section per subcommand, flags override")
        p.add_argument("--out-dir", required=True, help="directory all outputs are written under")

    p = sub.add_parser("gen-synthetic", help="generate a deterministic synthetic IR+visible dataset")
    add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", type=str)
    p.set_defaults(handler=_cmd_gen_synthetic)

    p = sub.add_parser("train-diffusion", help="train the joint noise predictor")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-width", type=int, dest="base_width")
    p.add_argument("--emb-dim", type=int, dest="emb_dim")
    p.add_argument("--timesteps", type=int)
    p.add_argument("--beta-start", type=float, dest="beta_start")
    p.add_argument("--beta-end", type=float, dest="beta_end")
    p.add_argument("--squared-loss", action="store_const", const=True, dest="squared_loss",
                   help="use the squared-norm diffusion loss instead of the plain norm")
    p.set_defaults(handler=_cmd_train_diffusion, squared_loss=None)

    p = sub.add_parser("train-fusion", help="train the fusion head on frozen diffusion features")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--denoiser", required=True, help="denoiser checkpoint (.difz)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--crop-size", type=int, dest="crop_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--feature-width", type=int, dest="feature_width")
    p.add_argument("--feature-timesteps", type=_parse_timesteps, dest="feature_timesteps")
    p.add_argument("--feature-noise-seed", type=int, dest="feature_noise_seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-diffusion", action="store_true",
                   help="ablation: extract features from the clean image at t=1 instead of noisy inputs")
    p.set_defaults(handler=_cmd_train_fusion)

    p = sub.add_parser("fuse", help="fuse every pair in a manifest")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--fusion", required=True, help="fusion checkpoint (.difz)")
    p.add_argument("--feature-noise-seed", type=int, dest="feature_noise_seed")
    p.set_defaults(handler=_cmd_fuse)

    p = sub.add_parser("sample", help="generate fresh IR+visible pairs by ancestral sampling")
    add_common(p)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("eval", help="six-metric report over a manifest and fused images")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fused-dir", required=True, dest="fused_dir")
    p.set_defaults(handler=_cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
