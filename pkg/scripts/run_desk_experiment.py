#!/usr/bin/env python3
"""End-to-end desk-scale experiment: data -> diffusion -> fusion -> report.

Drives the CLI exactly as a user would, with the desk-scale defaults the
acceptance suite uses. Expect roughly ten minutes, dominated by the
2000-step diffusion stage. All outputs land under --root (default
runs/desk); rerunning with the same seeds reproduces them byte for byte.
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
    parser.add_argument("--root", type=Path, default=Path("runs/desk"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=2000, help="diffusion training steps")
    parser.add_argument("--epochs", type=int, default=25, help="fusion training epochs")
    args = parser.parse_args()

    root = args.root
    train, test = root / "train", root / "test"
    run(["gen-synthetic", "--out-dir", str(train), "--count", "64", "--height", "32",
         "--width", "32", "--seed", str(args.seed)])
    run(["gen-synthetic", "--out-dir", str(test), "--count", "16", "--height", "32",
         "--width", "32", "--seed", str(args.seed), "--split", "test"])

    run(["train-diffusion", "--out-dir", str(root / "den"), "--manifest", str(train / "manifest.tsv"),
         "--steps", str(args.steps), "--batch-size", "8", "--timesteps", "200",
         "--lr", "1e-4", "--seed", str(args.seed)])

    run(["train-fusion", "--out-dir", str(root / "fus"), "--manifest", str(train / "manifest.tsv"),
         "--denoiser", str(root / "den" / "denoiser.difz"), "--epochs", str(args.epochs),
         "--batch-size", "8", "--crop-size", "32", "--lr", "1e-3", "--seed", "1"])

    run(["fuse", "--out-dir", str(root / "fused"), "--manifest", str(test / "manifest.tsv"),
         "--denoiser", str(root / "den" / "denoiser.difz"),
         "--fusion", str(root / "fus" / "fusion.difz")])

    run(["sample", "--out-dir", str(root / "samples"), "--denoiser", str(root / "den" / "denoiser.difz"),
         "--count", "4", "--height", "32", "--width", "32", "--seed", str(args.seed)])

    run(["eval", "--out-dir", str(root / "eval"), "--manifest", str(test / "manifest.tsv"),
         "--fused-dir", str(root / "fused")])
    print(f"\ndone; report at {root / 'eval' / 'report.txt'}")


if __name__ == "__main__":
    main()
