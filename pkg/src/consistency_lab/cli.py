"""Command-line entry point.

    consistency-lab rates --sweep {n,M,T,eps}
    consistency-lab check {identities,contraction,tails}
    consistency-lab train {cd,ct}
    consistency-lab sample

Common flags: ``--config PATH`` (JSON; defaults to the bundled config for the
subcommand), ``--out DIR``, ``--seed U64``, ``--threads K``.
Exit codes: 0 pass, 1 assertion failure, 2 usage or config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .lab import EXIT_USAGE, ConfigError, ExperimentConfig, bundled_config, run


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="consistency-lab", description="Consistency-model rate studies and checks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: bundled config for the subcommand)")
    common.add_argument("--out", help="output directory (default: runs/<subcommand>)")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--threads", type=_positive, default=1, help="worker threads for cells and trials")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("rates", parents=[common], help="run a convergence-rate sweep")
    r.add_argument("--sweep", required=True, choices=["n", "M", "T", "eps"])
    c = sub.add_parser("check", parents=[common], help="run a property check")
    c.add_argument("which", choices=["identities", "contraction", "tails"])
    c.add_argument("--inject-fault", choices=["tweedie", "jacobian", "composition"],
                   help="corrupt one identity path (negative control)")
    t = sub.add_parser("train", parents=[common], help="train a consistency net")
    t.add_argument("loss", choices=["cd", "ct"])
    sub.add_parser("sample", parents=[common], help="one-step samples from a checkpoint or the baseline")
    return p


def _selector(args) -> tuple[str, dict]:
    if args.command == "rates":
        return f"rates_{args.sweep}", {"command": "rates", "sweep": args.sweep}
    if args.command == "check":
        return f"check_{args.which}", {"command": "check", "check": args.which}
    if args.command == "train":
        return f"train_{args.loss}", {"command": "train", "loss": args.loss}
    return "sample", {"command": "sample"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    name, overrides = _selector(args)
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else bundled_config(name)
        opts = dict(cfg.options)
        if getattr(args, "inject_fault", None):
            opts["inject_fault"] = args.inject_fault
        overrides["options"] = opts
        cfg = cfg.replace(**overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or f"runs/{name}"
    cfg_dir = os.path.dirname(os.path.abspath(args.config)) if args.config else None
    code, doc = run(cfg, out, threads=args.threads, seed=args.seed, config_dir=cfg_dir)
    if code == EXIT_USAGE:
        print(f"config error: {doc.get('error')}", file=sys.stderr)
        return code
    print(f"{name}: {doc['status']} -> {out}")
    fit = doc.get("fit")
    if isinstance(fit, dict):
        print(f"  slope {fit['slope']:.4f} +/- {fit['stderr']:.4f}  band {fit.get('band')}")
    for chk in doc.get("checks", []):
        mark = "ok  " if chk["passed"] else "FAIL"
        info = {k: v for k, v in chk.items() if k not in ("name", "passed")}
        print(f"  [{mark}] {chk['name']} {json.dumps(info, default=str)[:160]}")
    for note in doc.get("notes", []):
        print(f"  note: {note}")
    return code


if __name__ == "__main__":
    sys.exit(main())
