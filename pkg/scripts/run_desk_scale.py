#!/usr/bin/env python3
"""Drive the full desk-scale pipeline: generate data, train, evaluate, bench.

Everything goes through the command-line interface so this doubles as a
living usage example. With --fast a toy 16-grid run finishes in about a
minute; the default desk-scale run takes a few CPU-hours.

Usage:
    python3 scripts/run_desk_scale.py --root runs/desk [--fast]
"""

import argparse
import json
import sys
from pathlib import Path

from deformgrid import cli

DESK = {
    "dataset": {"grid_n": 32, "num_meshes": 300},
    "net": {"grid_n": 32, "stage_channels": [8, 16, 32, 64]},
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 4,
        "max_epochs": 8,
        "patience": 3,
    },
}

FAST = {
    "dataset": {
        "grid_n": 16,
        "num_meshes": 4,
        "force_max": 0.5,
        "train_fraction": 0.75,
    },
    "net": {"grid_n": 16, "stage_channels": [2, 3, 4, 5]},
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 2,
        "max_epochs": 2,
        "patience": 2,
    },
}


def run(argv):
    print("+ deformgrid " + " ".join(argv), flush=True)
    code = cli.main(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/desk", help="output directory")
    ap.add_argument(
        "--fast", action="store_true", help="toy settings for a quick smoke run"
    )
    args = ap.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(FAST if args.fast else DESK, indent=2))

    base = ["--config", str(cfg_path), "--deterministic"]
    run(base + ["gen-data", "--out", str(root / "data")])
    run(base + ["train", "--data", str(root / "data"), "--out", str(root / "run")])
    ckpt = str(root / "run" / "checkpoint.dgnet")
    run(
        base
        + [
            "eval",
            "--data", str(root / "data"),
            "--checkpoint", ckpt,
            "--out", str(root / "eval"),
        ]
    )
    run(base + ["bench", "--checkpoint", ckpt, "--reps", "5"])

    summary = json.loads((root / "eval" / "summary.json").read_text())
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
