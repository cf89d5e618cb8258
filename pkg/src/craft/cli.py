"""Command-line front end.

Subcommands: synth, train-source, adapt, evaluate, fit-prior, sweep.  Every
command takes ``--config PATH`` (JSON, see ExperimentConfig) plus a few flag
overrides; flags beat environment path overrides, which beat the file.  On
failure the process exits nonzero with a one-line error JSON on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .harness import (
    ExperimentConfig,
    run_adapt,
    run_evaluate,
    run_fit_prior,
    run_sweep,
    run_synth,
    run_train_source,
)

_COMMANDS = {
    "synth": run_synth,
    "train-source": run_train_source,
    "adapt": run_adapt,
    "evaluate": run_evaluate,
    "fit-prior": run_fit_prior,
    "sweep": run_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="craft",
                                     description="Source-free semi-supervised regression transfer")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--method", choices=["craft", "tl", "naive"])
        p.add_argument("--alpha", type=float)
        p.add_argument("--bins", type=int)
        p.add_argument("--label-fraction", type=float, dest="label_fraction")
        p.add_argument("--prior", help="fit | file:PATH | true")
        p.add_argument("--checkpoint", help="source checkpoint path")
        p.add_argument("--data", help="dataset CSV (evaluate/fit-prior input)")
        p.add_argument("--epochs", type=int)
    return parser


def _parse_prior_flag(value: str) -> dict:
    if value == "fit":
        return {"prior_source": "fit_labeled"}
    if value == "true":
        return {"prior_source": "true_marginal"}
    if value.startswith("file:"):
        return {"prior_source": "file", "prior_file": value[len("file:"):]}
    raise ValueError(f"--prior must be fit, true, or file:PATH (got {value!r})")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_env_overrides()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out:
        updates["out_dir"] = args.out
    if args.method:
        updates["method"] = args.method
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if args.bins is not None:
        updates["bins"] = args.bins
    if args.label_fraction is not None:
        updates["label_fraction"] = args.label_fraction
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    if args.prior:
        updates.update(_parse_prior_flag(args.prior))
    if args.checkpoint:
        updates["source_checkpoint"] = args.checkpoint
    if args.data:
        # evaluate scores this file; fit-prior reads labels from it
        updates["target_test" if args.command == "evaluate" else "target_train"] = args.data
    return dataclasses.replace(cfg, **updates)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        result = _COMMANDS[args.command](cfg)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    json.dump(result, sys.stdout, indent=2)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
