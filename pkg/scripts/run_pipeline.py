#!/usr/bin/env python3
"""End-to-end walkthrough at reduced scale: data, proposals, both training
stages, evaluation, localization dump. Writes everything under ./runs/demo.

Roughly two minutes on a laptop CPU; shrink --n-train for a faster pass.
"""

import argparse
import sys
from pathlib import Path

from lgnet.cli import main as lgnet


def run(argv):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/demo"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-train", type=int, default=400)
    parser.add_argument("--epochs", type=int, default=3)
    args = parser.parse_args(argv)

    root = args.out
    data, props = root / "data", root / "proposals"
    stage1, stage2 = root / "stage1.lgn", root / "stage2.lgn"
    root.mkdir(parents=True, exist_ok=True)
    seed = str(args.seed)

    steps = [
        ["gen-data", "--out", str(data), "--seed", seed,
         "--n-train", str(args.n_train), "--n-val", "150", "--n-test", "150"],
        ["propose", "--images", str(data), "--out", str(props), "--top-k", "100"],
        ["train-stage1", "--data", str(data), "--out", str(stage1), "--seed", seed,
         "--epochs", str(args.epochs), "--lr", "0.6"],
        ["eval", "--model", str(stage1), "--data", str(data), "--split", "test"],
        ["train-stage2", "--data", str(data), "--model", str(stage1),
         "--proposals", str(props), "--out", str(stage2), "--seed", seed,
         "--epochs", str(args.epochs), "--lr", "0.3"],
        ["eval", "--model", str(stage2), "--data", str(data), "--split", "test",
         "--proposals", str(props), "--out", str(root / "report.json")],
        ["localize", "--model", str(stage2), "--data", str(data), "--split", "test",
         "--proposals", str(props), "--out", str(root / "localize"), "--heatmaps"],
        ["plot", "--log", str(stage2.with_suffix(".log.csv")), "--out", str(root / "curves.svg")],
    ]
    for step in steps:
        print(f"\n$ lgnet {' '.join(step)}")
        code = lgnet(step)
        if code != 0:
            return code
    print(f"\ndone; artifacts under {root}")
    return 0


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
