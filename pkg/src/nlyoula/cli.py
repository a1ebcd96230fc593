"""Command-line entry point: ``nlyoula {train,eval,attack,verify,report}``.

Exit codes: 0 success, 2 invalid config or inputs, 3 audit failure,
4 partial failure (some seeds or files missing; artifacts are kept).
Set ``NLYOULA_WORKERS`` to train seeds in parallel processes.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from .experiments import (EXIT_AUDIT, EXIT_OK, EXIT_PARTIAL, EXIT_VALIDATION, AuditFailure,
                          ValidationError, cmd_attack, cmd_eval, cmd_report, cmd_train, cmd_verify,
                          dump_json, list_presets, load_config, run_config)
from .dynamics import ConfigurationError


def _seeds(text):
    if text is None:
        return None
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--seed takes integers, got {text!r}") from exc


def _floats(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--eps takes numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlyoula", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="experiment TOML file or bundled preset name")
        sp.add_argument("--seed", type=_seeds, default=None,
                        help="comma-separated seeds (default: all seeds in the config)")
        sp.add_argument("--out", default=None, help="parent directory for new output")
        sp.add_argument("--force", action="store_true",
                        help="accept checkpoints produced by a different config")

    t = sub.add_parser("train", help="train all seeds of an experiment")
    common(t)
    t.add_argument("--skip-audit", action="store_true",
                   help="train even if the base controller audit fails")

    for name, desc in (("eval", "normalized test cost of checkpoints"),
                       ("attack", "adversarial attack sweep or critical-size bisection")):
        sp = sub.add_parser(name, help=desc)
        common(sp, config_required=False)
        sp.add_argument("--run", default=None, help="training run directory")
        sp.add_argument("--checkpoint", default=None, help="single checkpoint (.json/.bin)")
        if name == "attack":
            sp.add_argument("--eps", type=_floats, default=None,
                            help="comma-separated attack sizes; bisection when omitted")

    v = sub.add_parser("verify", help="run the audit suite")
    v.add_argument("--config", default=None, help="restrict environment audits to this config")
    v.add_argument("--out", default=None)

    r = sub.add_parser("report", help="aggregate CSVs and figures for a campaign directory")
    r.add_argument("campaign", help="run directory or a directory of runs")
    r.add_argument("--out", default=None, help="report directory (default: CAMPAIGN/report)")
    r.add_argument("--no-plots", action="store_true")

    sub.add_parser("presets", help="list bundled experiment presets")
    return p


def _resolve_config(args):
    if args.config is not None:
        return load_config(args.config)
    if getattr(args, "run", None) is not None:
        return run_config(args.run)
    raise ValidationError("--config or --run is required")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            print("\n".join(list_presets()))
            return EXIT_OK
        if args.command == "train":
            cfg = load_config(args.config)
            res = cmd_train(cfg, out=args.out, seeds=args.seed, skip_audit=args.skip_audit)
            print(res.run_dir)
            for s, e in res.failures.items():
                print(f"seed {s} failed: {e}", file=sys.stderr)
            return res.exit_code
        if args.command == "eval":
            cfg = _resolve_config(args)
            d, rep = cmd_eval(cfg, run_dir=args.run, checkpoint=args.checkpoint, seeds=args.seed,
                              out=args.out, force=args.force)
            print(d)
            print(f"mean normalized test cost {rep['mean_normalized_test_cost']:.6g}")
            return EXIT_OK
        if args.command == "attack":
            cfg = _resolve_config(args)
            d, rep = cmd_attack(cfg, run_dir=args.run, checkpoint=args.checkpoint, seeds=args.seed,
                                out=args.out, eps_list=args.eps, force=args.force)
            print(d)
            if "mean_critical_eps" in rep:
                print(f"mean critical attack size {rep['mean_critical_eps']:.6g}")
            return EXIT_OK
        if args.command == "verify":
            cfg = None if args.config is None else load_config(args.config)
            d, rep = cmd_verify(cfg, out=args.out)
            for c in rep["checks"]:
                print(f"{'ok  ' if c['ok'] else 'FAIL'} {c['check']}")
            print(d)
            return EXIT_OK if rep["passed"] else EXIT_AUDIT
        if args.command == "report":
            with warnings.catch_warnings(record=True):
                warnings.simplefilter("always")
                out, notes = cmd_report(args.campaign, out=args.out, plots=not args.no_plots)
            for n in notes:
                print(f"warning: {n}", file=sys.stderr)
            print(out)
            return EXIT_PARTIAL if notes else EXIT_OK
    except AuditFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(dump_json(exc.report), file=sys.stderr)
        return EXIT_AUDIT
    except (ConfigurationError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
