"""Command-line entry point: ``dkgp <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import ExperimentConfig, diagnose_correlation, evaluate_saved, run_experiment

EXACT = ("exact-se", "exact-dkl")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "freeze_net", False):
        over["freeze_net"] = True
    if getattr(args, "batch_size", None) is not None:
        over["batch_size"] = args.batch_size
    return replace(cfg, **over) if over else cfg


def _run(args, mode: str, allowed) -> int:
    cfg = _load_config(args)
    if cfg.model not in allowed:
        raise SystemExit(f"{args.command}: model {cfg.model!r} not supported here; use one of {allowed}")
    rep = run_experiment(cfg, args.out, mode)
    print(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    return 0


def cmd_fit_exact(args):
    return _run(args, "fit", EXACT)


def cmd_fit_svgp(args):
    return _run(args, "fit", ("svgp", "vdkl", "svdkl", "fsvdkl"))


def cmd_sample_hmc(args):
    return _run(args, "hmc", EXACT)


def cmd_sample_sgld(args):
    return _run(args, "sgld", ("exact-se", "exact-dkl", "svgp", "vdkl", "svdkl", "fsvdkl"))


def cmd_diagnose_corr(args):
    run_dir = Path(args.run or args.out)
    res = diagnose_correlation(run_dir, args.out)
    print(json.dumps(res, indent=1, sort_keys=True))
    return 0


def cmd_eval(args):
    run_dir = Path(args.run or args.out)
    rep = evaluate_saved(run_dir, args.out)
    print(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dkgp", description="Exact, sparse and sampled deep-kernel GPs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=True):
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        if training:
            sp.add_argument("--seed", type=int, help="overrides the config seed")
            sp.add_argument("--freeze-net", action="store_true", help="keep network weights fixed")
            sp.add_argument("--batch-size", type=int, help="minibatch size")

    for name, fn, helptext in [
        ("fit-exact", cmd_fit_exact, "type-II ML fit of an exact GP (SE or deep kernel)"),
        ("fit-svgp", cmd_fit_svgp, "stochastic variational fit (SVGP / SVDKL)"),
        ("sample-hmc", cmd_sample_hmc, "HMC over network weights and hyperparameters"),
        ("sample-sgld", cmd_sample_sgld, "SGLD over network weights and hyperparameters"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.set_defaults(func=fn)

    for name, fn, helptext in [
        ("diagnose-corr", cmd_diagnose_corr, "prior correlation diagnostics of a finished run"),
        ("eval", cmd_eval, "recompute metrics of a finished run"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", type=Path, help="ignored; the run directory's config is used")
        sp.add_argument("--run", type=Path, help="finished run directory (default: --out)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="ignored; kept for a uniform flag set")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"dkgp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
