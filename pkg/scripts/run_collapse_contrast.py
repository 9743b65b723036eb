#!/usr/bin/env python3
"""Collapse-contrast experiment: invariance-only pretraining collapses
the embedding spread while the full objective holds it up.

Runs two short pretrainings on the same phantom corpus that differ only
in the loss coefficients, then prints the per-dimension embedding-std
summary for each.

Usage: python scripts/run_collapse_contrast.py [--steps 300] [--phantoms 2000]
"""

import argparse
import json
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mlvicx.config import RunConfig, apply_overrides
from mlvicx.data import generate_phantoms
from mlvicx.train import collapse_report, embed_dataset, load_model_from_checkpoint, pretrain


def run(label: str, overrides: dict, dataset, epochs: int) -> dict:
    cfg = apply_overrides(RunConfig(), dict(overrides, **{"train.epochs": str(epochs)}))
    result = pretrain(dataset, cfg)
    model = load_model_from_checkpoint(result.checkpoint, cfg)
    z, m = embed_dataset(model, dataset, limit=512)
    report = collapse_report(z)
    print(f"{label}: mean z std {report.std_mean:.4f}  min {report.std_min:.4f}  "
          f"|offdiag cov| {report.cov_offdiag_mean:.4f}  collapsed={report.collapsed}")
    return {"label": label, "z": report.as_dict(), "m": collapse_report(m).as_dict()}


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--phantoms", type=int, default=2000)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()

    base = {"data.phantom_count": str(args.phantoms)}
    cfg = apply_overrides(RunConfig(), base)
    dataset = generate_phantoms(cfg.phantom_spec(), args.phantoms)
    steps_per_epoch = max(1, args.phantoms // cfg.train.batch_size)
    epochs = max(1, math.ceil(args.steps / steps_per_epoch))
    print(f"{args.steps} steps ~ {epochs} epochs on {args.phantoms} phantoms")

    rows = [
        run("invariance-only (beta=gamma=0)",
            dict(base, **{"loss.beta": "0", "loss.gamma": "0"}), dataset, epochs),
        run("full objective", base, dataset, epochs),
    ]
    if args.out:
        args.out.write_text(json.dumps(rows, indent=2))
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
