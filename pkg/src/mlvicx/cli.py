"""Command-line entry point.

Subcommands: pretrain, probe, ablate, diagnose, gradcheck, gen-data.
Dotted config overrides (``--loss.balance=0.5``) can follow any
subcommand and win over config-file values. Exit codes: 0 success,
1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config, resolved_text
from .data import DataError, Dataset, generate_phantoms, load_pgm_dir, save_dataset_pgm
from .evaluate import EvalError, ProbeConfig, ablation_suite, linear_probe
from .gradcheck import run_gradcheck
from .train import TrainError, collapse_report, embed_dataset, load_model_from_checkpoint, pretrain

logger = logging.getLogger("mlvicx")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--section.key=value`` tokens out of argv."""
    rest: list[str] = []
    overrides: dict[str, str] = {}
    for token in argv:
        if token.startswith("--") and "=" in token and "." in token.split("=", 1)[0]:
            key, _, value = token[2:].partition("=")
            overrides[key] = value
        else:
            rest.append(token)
    return rest, overrides


def _resolve_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    explicit_keys = set(overrides)
    if config_path:
        text = Path(config_path).read_text()
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#") and "=" in line:
                explicit_keys.add(line.partition("=")[0].strip())
        config = load_config(config_path, overrides)
    else:
        config = apply_overrides(RunConfig(), overrides)
    env_seed = os.environ.get("MLVICX_SEED")
    if env_seed is not None and "train.seed" not in explicit_keys:
        config = apply_overrides(config, {"train.seed": env_seed})
        logger.warning("seed %s taken from MLVICX_SEED environment variable", env_seed)
    return config


def _dataset_from_config(config: RunConfig) -> Dataset:
    if config.data.source == "phantom":
        return generate_phantoms(config.phantom_spec(), config.data.phantom_count)
    if config.data.source == "pgm":
        if not config.data.pgm_dir:
            raise ConfigError("data.source=pgm requires data.pgm_dir")
        return load_pgm_dir(config.data.pgm_dir)
    raise ConfigError(f"unknown data.source {config.data.source!r}")


def _prepare_run_dir(out: str, force: bool) -> Path:
    run_dir = Path(out)
    if run_dir.exists() and any(run_dir.iterdir()) and not force:
        raise ConfigError(f"run directory {run_dir} already exists; pass --force to reuse")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _emit_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_pretrain(args, overrides) -> int:
    config = _resolve_config(args.config, overrides)
    run_dir = _prepare_run_dir(args.out, args.force)
    (run_dir / "config.resolved").write_text(resolved_text(config))
    dataset = _dataset_from_config(config)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if args.force:
            resume = replace(resume, config_hash="")
    result = pretrain(dataset, config, run_dir=run_dir, resume=resume)
    print(f"run complete: {run_dir} (final checkpoint: {result.last_good_path})")
    return EXIT_OK


def cmd_probe(args, overrides) -> int:
    config = _resolve_config(args.config, overrides)
    if args.mode:
        config = apply_overrides(config, {"eval.mode": args.mode})
    if args.fraction is not None:
        config = apply_overrides(config, {"eval.fraction": str(args.fraction)})
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _dataset_from_config(config)
    probe = ProbeConfig(
        mode=config.eval.mode, fraction=config.eval.fraction, lr=config.eval.lr,
        epochs=config.eval.epochs, patience=config.eval.patience, seed=config.eval.seed,
    )
    report = linear_probe(ckpt, dataset, config, probe)
    _emit_json(report.as_dict(), args.out)
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    config = _resolve_config(args.config, overrides)
    dataset = _dataset_from_config(config)
    modes = tuple(args.modes.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    table = ablation_suite(dataset, config, modes=modes, seeds=seeds)
    logger.info("ablation ran %d pretrainings with shared per-seed streams",
                len(table["variants"]) * len(seeds))
    _emit_json(table, args.out)
    return EXIT_OK


def cmd_diagnose(args, overrides) -> int:
    config = _resolve_config(args.config, overrides)
    ckpt = load_checkpoint(args.checkpoint)
    model = load_model_from_checkpoint(ckpt, config)
    dataset = _dataset_from_config(config)
    z, m = embed_dataset(model, dataset, limit=args.limit)
    payload = {
        "n_samples": int(z.shape[0]),
        "r": int(z.shape[1]),
        "z": collapse_report(z).as_dict(),
        "m": collapse_report(m).as_dict(),
    }
    _emit_json(payload, args.out)
    return EXIT_OK


def cmd_gradcheck(args, overrides) -> int:
    del overrides
    results = run_gradcheck(scope=args.scope, step=args.step, tol=args.tolerance)
    failures = 0
    for name, result in results:
        print(f"{name}: {result}")
        if not result.passed:
            failures += 1
    print(f"gradcheck: {len(results) - failures}/{len(results)} passed")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def cmd_gen_data(args, overrides) -> int:
    config = _resolve_config(args.config, overrides)
    if args.seed is not None:
        config = apply_overrides(config, {"data.phantom_seed": str(args.seed)})
    if args.lesion_p is not None:
        config = apply_overrides(config, {"data.lesion_p": str(args.lesion_p)})
    if args.size is not None:
        config = apply_overrides(config, {"data.phantom_size": str(args.size)})
    dataset = generate_phantoms(config.phantom_spec(), args.count)
    save_dataset_pgm(dataset, args.out)
    print(f"wrote {len(dataset)} PGM files + labels.csv to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlvicx",
        description="Self-supervised pretraining, probing, and diagnostics "
                    "for grayscale images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the self-supervised training loop")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="run directory (append-only)")
    p.add_argument("--force", action="store_true", help="reuse an existing run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--mode", choices=["frozen", "finetune"])
    p.add_argument("--fraction", type=float, help="label fraction for the probe train split")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="pretrain/probe the three loss variants")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--modes", default="frozen", help="comma list of probe modes")
    p.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    p.add_argument("--out", help="write the table JSON here instead of stdout")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="embedding-collapse report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--limit", type=int, default=512, help="max samples to embed")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", default="full", help="'full' or one op group")
    p.add_argument("--step", type=float, default=None,
                   help="override the per-group default step")
    p.add_argument("--tolerance", type=float, default=None,
                   help="override the per-group default tolerance")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write phantom PGM files + labels.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--lesion-p", dest="lesion_p", type=float)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(rest)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args, overrides)
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainError, EvalError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
