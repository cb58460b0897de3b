"""Command line entry point: ``kslab run | compare | audit``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments, reports

WORKERS_ENV = "KSLAB_WORKERS"

DEFAULT_AUDIT = {
    "kind": "oracle-audit",
    "model": {"chi": 0.2, "lambda": 1.0, "mu": 1.0, "dim": 1, "box": 3.141592653589793, "grid": 64,
              "a": {"kind": "constant", "params": {"value": 1.0}},
              "b": {"kind": "constant", "params": {"value": 1.0}}},
    "initial": {"kind": "constant", "value": 1.0},
}


def worker_count(flag: int | None) -> int:
    """--workers wins, then $KSLAB_WORKERS, then 1."""
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"{WORKERS_ENV} must be an integer (got {env!r})")
    return 1


def _load(path):
    try:
        return experiments.ExperimentConfig.load(path)
    except experiments.ConfigError as exc:
        raise SystemExit(str(exc))


def cmd_run(args) -> int:
    cfg = _load(args.config)
    out = experiments.run(cfg, args.out, worker_count(args.workers))
    m = experiments.load_manifest(out)
    print(f"{m['status']} {m['kind']} -> {out}")
    print(f"content hash {m['content_hash']}")
    return 0


def cmd_compare(args) -> int:
    try:
        diffs = experiments.compare(args.dir1, args.dir2, rtol=args.rtol, atol=args.atol)
    except experiments.IncompatibleRuns as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not diffs:
        print("no differences")
        return 0
    for d in diffs:
        print(json.dumps({k: (reports.fmt(v) if isinstance(v, float) else v) for k, v in d.items()}))
    return 0 if all(d.get("within_tol", False) for d in diffs) else 1


def cmd_audit(args) -> int:
    if args.config:
        cfg = _load(args.config)
        cfg.kind = "oracle-audit"
    else:
        cfg = experiments.ExperimentConfig.from_dict(DEFAULT_AUDIT)
    if args.out:
        experiments.run(cfg, args.out, worker_count(args.workers))
    print("quantity,value")
    for row in experiments.oracle_rows(cfg):
        print(f"{row['quantity']},{reports.fmt(row['value'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kslab", description="chemotaxis-logistic experiment runner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True, help="YAML or JSON experiment config")
    r.add_argument("--out", help="artifact directory (overrides the config's output)")
    r.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="diff the reports of two artifact directories")
    c.add_argument("dir1")
    c.add_argument("dir2")
    c.add_argument("--rtol", type=float, default=1e-9)
    c.add_argument("--atol", type=float, default=1e-12)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("audit", help="print every closed-form quantity for a model")
    a.add_argument("--config", help="config whose model is audited (default: a=b=1, chi=0.2)")
    a.add_argument("--out", help="also write an artifact directory")
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
