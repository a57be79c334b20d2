"""filtstab command line: run | preset | constants."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .chain_core import ModelError, conditional_pi_constants, invariant_measure, load_model
from .experiment import PRESETS, ConfigError, ExperimentConfig, dumps, preset, run_experiment


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trials", type=int, help="Monte Carlo trials (overrides config)")
    p.add_argument("--dt", type=float, help="time step (overrides config)")
    p.add_argument("--seed", type=int, help="base seed (overrides config)")
    p.add_argument("--strict", action="store_true", help="exit nonzero if any verdict fails")
    p.add_argument("--out", type=Path, help="output directory for report, CSV series and manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filtstab", description="Filter stability experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config", type=Path)
    _add_common(p)
    p = sub.add_parser("preset", help=f"run a builtin experiment ({', '.join(sorted(PRESETS))})")
    p.add_argument("name")
    _add_common(p)
    p = sub.add_parser("constants", help="Poincare constants of a model")
    p.add_argument("model", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def _overrides(args) -> dict:
    return {"n_trials": args.trials, "dt": args.dt, "seed": args.seed}


def _emit(text: str, out: Path | None, filename: str) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text)
    sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "constants":
            model = load_model(args.model)
            mu_bar = invariant_measure(model.generator)
            consts = conditional_pi_constants(model.generator, mu_bar)
            positive = [k for k in consts.CERTIFYING if getattr(consts, k) > 0]
            _emit(dumps({"invariant_measure": mu_bar, "constants": consts.to_dict(),
                         "certifying_positive": positive,
                         "certified_rate": consts.best_conditional() if positive else None}),
                  args.out, "constants.json")
            return 0
        if args.command == "run":
            base = ExperimentConfig.load(args.config).to_dict()
            base.update({k: v for k, v in _overrides(args).items() if v is not None})
            config = ExperimentConfig.from_dict(base, base_dir=args.config.parent)
        else:
            config = preset(args.name, **_overrides(args))
    except (ConfigError, ModelError, OSError, json.JSONDecodeError) as exc:
        print(f"filtstab: {exc}", file=sys.stderr)
        return 2

    report = run_experiment(config)
    if args.out is not None:
        report.write(args.out)
    sys.stdout.write(dumps({"name": config.name, "verdicts": report.verdicts(), "passed": report.passed}))
    for name, res in report.checks.items():
        if "error" in res:
            print(f"filtstab: check {name} failed: {res['error']}", file=sys.stderr)
    return 1 if args.strict and not report.passed else 0


if __name__ == "__main__":
    sys.exit(main())
