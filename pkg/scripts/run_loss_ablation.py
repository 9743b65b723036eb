#!/usr/bin/env python3
"""Loss-tier ablation: pretrain global-only, local-only, and combined
variants under shared seeds, probe each identically, print the table.

Usage: python scripts/run_loss_ablation.py [--phantoms 800] [--epochs 10]
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mlvicx.config import RunConfig, apply_overrides
from mlvicx.data import generate_phantoms
from mlvicx.evaluate import ablation_suite


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--phantoms", type=int, default=800)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--modes", default="frozen")
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()

    cfg = apply_overrides(RunConfig(), {
        "data.phantom_count": str(args.phantoms),
        "train.epochs": str(args.epochs),
    })
    dataset = generate_phantoms(cfg.phantom_spec(), args.phantoms)
    table = ablation_suite(dataset, cfg,
                           modes=tuple(args.modes.split(",")),
                           seeds=tuple(int(s) for s in args.seeds.split(",")))
    for variant, modes in table["median"].items():
        for mode, value in modes.items():
            print(f"{variant:12s} {mode:9s} median AUC {value:.3f}")
    if args.out:
        args.out.write_text(json.dumps(table, indent=2))
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
