"""Command-line entry points: gen-data, train, eval, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import ConfigError, FlowsegError, NumericError
from .harness import (GRADCHECK_COMPONENTS, TrainConfig, apply_mode, evaluate,
                      gradcheck, parse_config_file, train)
from .synthdata import load_dataset, make_dataset, save_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _cmd_gen_data(args):
    scenes = make_dataset(args.seed, args.count, args.size, args.size,
                          args.classes, labeled_fraction=args.labeled_fraction,
                          integer_only=args.integer_only)
    save_dataset(args.out, scenes)
    labeled = sum(s.labeled for s in scenes)
    print(f"wrote {len(scenes)} scenes ({labeled} labeled) to {args.out}")
    return EXIT_OK


def _load_train_config(args):
    cfg = parse_config_file(args.config) if args.config else TrainConfig()
    if args.mode:
        cfg = apply_mode(cfg, args.mode)
    overrides = {}
    for name in ("seed", "max_iters", "batch_size", "base_lr"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_train(args):
    cfg = _load_train_config(args)
    dataset = load_dataset(args.data)
    log, _ = train(cfg, dataset, out_dir=args.out)
    last_step, last_bd, _ = log.rows[-1]
    print(f"trained {len(log.rows)} steps; final total={last_bd.total:.6g}; "
          f"checkpoint={log.checkpoint_path}")
    return EXIT_OK


def _cmd_eval(args):
    cfg = _load_train_config(args)
    dataset = load_dataset(args.data)
    metrics = evaluate(args.checkpoint, dataset, cfg)
    noc = "n/a" if metrics.epe_noc is None else f"{metrics.epe_noc:.4f}"
    print(f"epe_all={metrics.epe_all:.4f} epe_noc={noc} miou={metrics.miou:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args):
    components = GRADCHECK_COMPONENTS if args.component == "all" else (args.component,)
    failed = False
    for component in components:
        report = gradcheck(component, seed=args.seed)
        status = "ok" if report.passed else "FAIL"
        print(f"{component}: max_rel_error={report.max_rel_error:.3e} [{status}]")
        failed = failed or not report.passed
    return EXIT_OK if not failed else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="flowseg")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=20)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--labeled-fraction", type=float, default=0.5)
    gen.add_argument("--integer-only", action="store_true")
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=_cmd_gen_data)

    tr = sub.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--mode", help="ablation preset name")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-iters", dest="max_iters", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--base-lr", dest="base_lr", type=float)
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--config", help="key=value config file")
    ev.add_argument("--mode")
    ev.set_defaults(fn=_cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--component", default="all",
                    choices=("all",) + GRADCHECK_COMPONENTS)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FlowsegError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
