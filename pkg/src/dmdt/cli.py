"""Command line: ``dmdt train | eval | flops | trace | ablate-init``.

Heavy imports happen inside the commands so ``DMDT_THREADS`` can cap the
BLAS thread pools before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def apply_thread_cap(environ=os.environ):
    n = environ.get("DMDT_THREADS")
    if n:
        if not n.isdigit() or int(n) < 1:
            raise SystemExit(f"DMDT_THREADS must be a positive integer, got {n!r}")
        for var in THREAD_VARS:
            environ.setdefault(var, n)


def _load_config(path, seed=None, init_sampling=None):
    from .config import RunConfig

    cfg = RunConfig.load(path) if path else RunConfig().validate()
    if seed is not None:
        cfg.train.seed = seed
    if init_sampling is not None:
        cfg.model.init_sampling = init_sampling
    return cfg.validate()


def cmd_train(args):
    from .train import train

    cfg = _load_config(args.config, args.seed, args.init_sampling)
    _, history = train(cfg, args.out, max_steps=args.max_steps)
    print(json.dumps(history[-1]))
    return 0


def cmd_eval(args):
    from . import checkpoint
    from .train import evaluate, load_splits

    model, cfg, _ = checkpoint.load(args.checkpoint)
    ds = load_splits(cfg, (args.split,))[args.split]
    metrics, _, _ = evaluate(model, ds)
    print(json.dumps(metrics))
    return 0


def cmd_flops(args):
    from . import flops

    if args.preset:
        arch = flops.preset(args.preset, flops_per_mac=args.flops_per_mac)
    else:
        cfg = _load_config(args.config)
        arch = flops.arch_from_model_config(cfg.model, flops_per_mac=args.flops_per_mac)
    report = flops.model_flops(arch)
    print(report.to_json())
    print(report.table())
    return 0


def cmd_trace(args):
    from . import checkpoint
    from .train import load_splits, write_trace_csv

    model, cfg, _ = checkpoint.load(args.checkpoint)
    ds = load_splits(cfg, (args.split,))[args.split]
    if not 0 <= args.example < len(ds):
        raise IndexError(f"example {args.example} is outside the {args.split} split (size {len(ds)})")
    i = slice(args.example, args.example + 1)
    _, trace = model.predict(ds.rasters[i], ds.tokens[i], ds.mask[i])
    write_trace_csv(args.out, trace, 0)
    return 0


def cmd_ablate_init(args):
    from .train import evaluate, load_splits, train

    base = _load_config(args.config, args.seed)
    splits = load_splits(base)
    rows = []
    for mode in args.modes:
        cfg = _load_config(args.config, args.seed, mode)
        out = os.path.join(args.out, mode) if args.out else None
        model, history = train(cfg, out, splits=splits, max_steps=args.max_steps)
        test, _, _ = evaluate(model, splits["test"])
        rows.append({"init_sampling": mode, "val_acc50": history[-1]["val_acc50"],
                     "test_acc50": test["acc50"], "test_mean_iou": test["mean_iou"]})
    print(json.dumps(rows))
    print(ablation_table(rows))
    if args.out:
        with open(os.path.join(args.out, "ablation.json"), "w") as f:
            json.dump(rows, f, indent=2)
    return 0


def ablation_table(rows):
    lines = [f"{'init sampling':<14}  {'val acc@0.5':>11}  {'test acc@0.5':>12}  {'test mIoU':>9}"]
    for r in rows:
        lines.append(f"{r['init_sampling']:<14}  {r['val_acc50']:>11.4f}  {r['test_acc50']:>12.4f}"
                     f"  {r['test_mean_iou']:>9.4f}")
    return "\n".join(lines)


def build_parser():
    p = argparse.ArgumentParser(prog="dmdt", description="Dynamic sampling grounding model on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints + metrics.jsonl")
    t.add_argument("--config", help="JSON run config (defaults when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--init-sampling", choices=("grid", "uniform", "learnable"))
    t.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="analytic FLOPs report")
    g = f.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--preset", choices=("paper-transvg", "paper-static-decoder",
                                        "paper-sampling-only", "paper-dynamic"))
    f.add_argument("--flops-per-mac", type=int, default=1, choices=(1, 2))
    f.set_defaults(func=cmd_flops)

    r = sub.add_parser("trace", help="write per-layer sampled points for one example as CSV")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--example", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="test", choices=("train", "val", "test"))
    r.set_defaults(func=cmd_trace)

    a = sub.add_parser("ablate-init", help="train grid/uniform/learnable init sampling and compare")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.add_argument("--modes", nargs="+", default=["grid", "uniform", "learnable"],
                   choices=("grid", "uniform", "learnable"))
    a.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    a.set_defaults(func=cmd_ablate_init)
    return p


def main(argv=None):
    apply_thread_cap()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    from .errors import DmdtError

    try:
        return args.func(args)
    except (DmdtError, IndexError, OSError) as exc:
        print(f"dmdt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
