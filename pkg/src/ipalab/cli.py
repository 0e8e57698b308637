"""Command-line front end.

Subcommands::

    ipalab verify   [--seed N] [--json]
    ipalab pipeline [--config FILE] [--seed N] [--out DIR] [--json]
    ipalab sweep    {beta,lambda,objectives} [--config FILE] [--seed N] [--out DIR] [--jobs N] [--json]
    ipalab curate   [--config FILE] [--seed N] [--out DIR] [--json]
    ipalab evaluate [--config FILE] [--out DIR] [--policy P] [--reference R] [--preferences F] [--json]

Exit codes: 0 success, 1 a verification check failed, 2 usage or config
error, 3 data error (empty curated set, missing inputs, divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

from . import config as cfgmod
from . import pipeline, verification
from .errors import EmptyCurationError, IpaLabError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _load_config(args):
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        print(text)


def cmd_verify(args):
    checks = verification.run_all(seed=args.seed or 0)
    summary = verification.summarize(checks)
    lines = [c.line() for c in checks]
    if summary["passed"]:
        lines.append("verify: all gating checks PASS")
    else:
        lines.append(f"verify: FAIL (first failing check: {summary['first_failure']})")
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK if summary["passed"] else EXIT_CHECK


def cmd_pipeline(args):
    cfg = _load_config(args)
    res = pipeline.run_pipeline(cfg)
    payload = {
        "out": res.out,
        "audit": res.audit,
        "base": asdict(res.base),
        "aligned": asdict(res.aligned),
        "files": sorted(os.listdir(res.out)),
    }
    text = (f"pipeline finished: {res.out}\n"
            f"curated samples {res.audit['good_yield']}, strict pairs {res.audit['pair_yield']}\n"
            + pipeline.metrics_text({"base": res.base, "aligned": res.aligned}).rstrip())
    _emit(args, payload, text)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    table = pipeline.run_sweep(cfg, args.kind, jobs=args.jobs)
    from .plots import read_csv_columns
    _emit(args, {"kind": args.kind, "out": cfg.out, "table": read_csv_columns(table)}, table.rstrip())
    return EXIT_OK


def cmd_curate(args):
    cfg = _load_config(args)
    cur = pipeline.run_curate(cfg)
    a = cur.audit
    text = "\n".join([f"curation written to {cfg.out}",
                      f"good samples (curated set): {a['good_yield']}",
                      f"strict good/bad pairs:      {a['pair_yield']}",
                      f"consistently bad samples:   {a['consistently_bad']}",
                      f"unpaired bad pool:          {a['unpaired_bad']}",
                      "cases: " + ", ".join(f"{k}={v}" for k, v in a["cases"].items())])
    _emit(args, a, text)
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    out = cfg.out
    reports = pipeline.run_evaluate(
        cfg,
        args.policy or os.path.join(out, "policy.npz"),
        args.reference or os.path.join(out, "base.npz"),
        args.preferences or os.path.join(out, "preference_sets.json"),
        out=out)
    _emit(args, {k: asdict(v) for k, v in reports.items()},
          pipeline.metrics_text(reports).rstrip())
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--jobs", type=int, default=1, help="concurrent sweep members")
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = argparse.ArgumentParser(prog="ipalab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run the numerical self-checks")
    sub.add_parser("pipeline", parents=[common], help="pretrain, curate, align, evaluate")
    p = sub.add_parser("sweep", parents=[common], help="beta, lambda or objective ablation")
    p.add_argument("kind", choices=pipeline.SWEEP_KINDS)
    sub.add_parser("curate", parents=[common], help="pretrain and curate only")
    p = sub.add_parser("evaluate", parents=[common], help="metrics for a saved policy")
    p.add_argument("--policy", help="policy checkpoint (default OUT/policy.npz)")
    p.add_argument("--reference", help="reference checkpoint (default OUT/base.npz)")
    p.add_argument("--preferences", help="preference-set file (default OUT/preference_sets.json)")
    return parser


COMMANDS = {
    "verify": cmd_verify,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "curate": cmd_curate,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EmptyCurationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IpaLabError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
