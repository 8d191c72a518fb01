#!/usr/bin/env python3
"""Fusion-head ablation: diffusion features versus clean-image features.

Trains the fusion stage twice on top of one diffusion checkpoint, once on
noisy multi-timestep features and once with --no-diffusion (same network,
clean image, t=1), then evaluates both on a held-out split and prints the
two metric tables side by side. Requires runs from run_desk_experiment.py
or equivalent --denoiser/--manifest arguments.
"""

import argparse
import sys
from pathlib import Path

from chromafuse.cli import main as cli


def run(args: list[str]) -> None:
    print("+ chromafuse " + " ".join(args))
    code = cli(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path, default=Path("runs/ablation"))
    parser.add_argument("--denoiser", type=Path, default=Path("runs/desk/den/denoiser.difz"))
    parser.add_argument("--train-manifest", type=Path, default=Path("runs/desk/train/manifest.tsv"))
    parser.add_argument("--test-manifest", type=Path, default=Path("runs/desk/test/manifest.tsv"))
    parser.add_argument("--epochs", type=int, default=25)
    args = parser.parse_args()

    for variant, extra in (("with_diffusion", []), ("no_diffusion", ["--no-diffusion"])):
        fus = args.root / f"fus_{variant}"
        fused = args.root / f"fused_{variant}"
        eval_dir = args.root / f"eval_{variant}"
        run(["train-fusion", "--out-dir", str(fus), "--manifest", str(args.train_manifest),
             "--denoiser", str(args.denoiser), "--epochs", str(args.epochs), "--batch-size", "8",
             "--crop-size", "32", "--lr", "1e-3", "--seed", "1", *extra])
        run(["fuse", "--out-dir", str(fused), "--manifest", str(args.test_manifest),
             "--denoiser", str(args.denoiser), "--fusion", str(fus / "fusion.difz")])
        run(["eval", "--out-dir", str(eval_dir), "--manifest", str(args.test_manifest),
             "--fused-dir", str(fused)])

    for variant in ("with_diffusion", "no_diffusion"):
        print(f"\n== {variant} ==")
        print((args.root / f"eval_{variant}" / "report.txt").read_text())


if __name__ == "__main__":
    main()
