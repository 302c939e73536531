"""Command-line entry point: ``capsule {collect,pretrain,train,eval,aggregate}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import RUN_MODES, RunConfig, load_config
from .errors import CapsuleError, ConfigError

log = logging.getLogger("capsule")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsule", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run configuration")
            p.add_argument("--seed", type=int, help="override the seed (data, ensemble, or the run seed list)")
            p.add_argument("--mode", choices=RUN_MODES, help="override the run mode")
        p.add_argument("--out", help="output directory (the CAPSULE_OUT variable takes precedence)")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("collect", help="roll an exploration policy and save an offline dataset"))
    common(sub.add_parser("pretrain", help="fit the dynamics ensembles on the offline dataset"))
    p = sub.add_parser("train", help="filtered on-policy training, one run per seed")
    common(p)
    p.add_argument("--trace", action="store_true", help="write a per-step filter trace")
    common(sub.add_parser("eval", help="evaluate saved policies"))
    p = sub.add_parser("aggregate", help="per-epoch mean/std across seed runs")
    common(p, needs_config=False)
    p.add_argument("runs", nargs="+", help="run directories holding metrics.csv files")
    return parser


def _out_dir(args, cfg: RunConfig | None) -> Path:
    env = os.environ.get("CAPSULE_OUT")
    if env:
        return Path(env)
    if args.out:
        return Path(args.out)
    return Path(cfg.paths.out) if cfg is not None else Path("runs")


def _apply_overrides(args, cfg: RunConfig) -> RunConfig:
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    if args.seed is not None:
        if args.command == "collect":
            cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
        elif args.command == "pretrain":
            cfg.ensemble = dataclasses.replace(cfg.ensemble, seed=args.seed)
        else:
            cfg = dataclasses.replace(cfg, seeds=[args.seed])
    return cfg


def _dispatch(args) -> int:
    if args.command == "aggregate":
        out = _out_dir(args, None)
        path, dropped = harness.aggregate(args.runs, out)
        print(f"wrote {path}" + (f" ({dropped} misaligned epoch(s) dropped)" if dropped else ""))
        return 0
    cfg = _apply_overrides(args, load_config(args.config))
    out = _out_dir(args, cfg)
    if args.command == "collect":
        print(f"wrote {harness.run_collect(cfg, out)}")
    elif args.command == "pretrain":
        art = harness.run_pretrain(cfg, out)
        per_dim = " ".join(f"{c:.4f}" for c in art.coverage)
        print(f"wrote {art.ensemble} and {art.report}")
        print(f"calibration coverage at p_delta={art.p_delta:.4g}: per-dimension {per_dim}, joint {art.joint_coverage:.4f}")
    elif args.command == "train":
        results = harness.run_train(cfg, out, trace=args.trace)
        for r in results:
            last = r.rows[-1] if r.rows else None
            msg = f"seed {r.seed}: {r.status}"
            if last is not None:
                msg += f", cumulative violations {last[6]}, final eval return {last[3]:.4g}"
            print(msg)
        if any(r.status == "numeric_abort" for r in results):
            return 4
    elif args.command == "eval":
        for row in harness.run_eval(cfg, out):
            print(f"seed {row[0]}: return {row[2]:.4g} ± {row[3]:.3g}, cost {row[4]:.4g}, "
                  f"violating steps {row[6]:.3%}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CapsuleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
