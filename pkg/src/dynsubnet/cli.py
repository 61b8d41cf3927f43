"""Command-line entry point: ``dynsubnet <stage|pipeline> [flags]``.

The run configuration is taken from ``--config`` if given, else from the
output directory's ``config.json`` when it exists, else the defaults; any
flag given on the command line overrides it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import DynSubnetError
from .pipeline import METHODS, STAGES, PipelineConfig, run_pipeline, run_stage


def _add_common(p):
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("--out", help="output directory for checkpoints, logs and reports")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--method", choices=METHODS, help="ranking method")
    p.add_argument("--arch", help="built-in architecture name or architecture JSON path")
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=("synthetic", "cifar10"))
    g.add_argument("--data-dir", help="directory with CIFAR-10 binary batches")
    g.add_argument("--train-limit", type=int, help="CIFAR-10 training subset size")
    g.add_argument("--classes", type=int)
    g.add_argument("--samples", type=int, help="synthetic training samples")
    g.add_argument("--image-size", type=int)
    g.add_argument("--separation", type=float)
    g.add_argument("--val-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None,
                   help="random crop/flip on training batches")
    g = p.add_argument_group("search")
    g.add_argument("--group", type=int, help="channel groups per layer (G)")
    g.add_argument("--threshold", type=float, help="fine-tune accuracy threshold")
    g.add_argument("--min-ratio", type=float, help="minimum size ratio")
    g.add_argument("--fine-tune-steps", type=int)
    g.add_argument("--fine-tune-lr", type=float)
    g.add_argument("--val-subset", type=int, help="validation subset size")
    g.add_argument("--bn-recal-batches", type=int)
    g = p.add_argument_group("training")
    g.add_argument("--pretrain-epochs", type=int)
    g.add_argument("--noise-epochs", type=int)
    g.add_argument("--train-weights", action=argparse.BooleanOptionalAction, default=None,
                   help="update weights during noise training")
    g.add_argument("--fuse-epochs", type=int)
    g.add_argument("--subnets-per-batch", type=int, help="random middle sub-nets per fused batch")
    g = p.add_argument_group("benchmark")
    g.add_argument("--bench-runs", type=int)
    g.add_argument("--bench-warmup", type=int)
    g.add_argument("--bench-batch-size", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="dynsubnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p)
        if stage == "report":
            p.add_argument("--runs", nargs="*", default=[], help="other run directories to merge into the report")
    p = sub.add_parser("pipeline", help="run every stage in order")
    _add_common(p)
    p.add_argument("--stages", nargs="+", choices=STAGES, help="subset of stages to run (in order)")
    return parser


def _set(obj, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(obj, **kw) if kw else obj


def resolve_config(args):
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif args.out and (Path(args.out) / "config.json").exists():
        cfg = PipelineConfig.load(Path(args.out) / "config.json")
    else:
        cfg = PipelineConfig()
    data = dict(cfg.dataset)
    if args.dataset:
        data["kind"] = args.dataset
    for key, value in (("path", args.data_dir), ("train_limit", args.train_limit), ("classes", args.classes),
                       ("samples", args.samples), ("size", args.image_size), ("separation", args.separation),
                       ("val", args.val_size), ("test", args.test_size)):
        if value is not None:
            data[key] = value
    if data.get("kind") == "cifar10":
        for key in ("classes", "samples", "size", "separation", "test"):
            data.pop(key, None)
    search = _set(cfg.search, group_count=args.group, threshold=args.threshold, min_ratio=args.min_ratio,
                  fine_tune_steps=args.fine_tune_steps, fine_tune_lr=args.fine_tune_lr,
                  val_subset_size=args.val_subset, bn_recal_batches=args.bn_recal_batches)
    noise = _set(cfg.noise, epochs=args.noise_epochs, train_weights=args.train_weights)
    fused = _set(cfg.fused, epochs=args.fuse_epochs, subnets_per_batch=args.subnets_per_batch)
    return _set(cfg, dataset=data, search=search, noise=noise, fused=fused, out=args.out, seed=args.seed,
                method=args.method, arch=args.arch, augment=args.augment, pretrain_epochs=args.pretrain_epochs,
                bench_runs=args.bench_runs, bench_warmup=args.bench_warmup, bench_batch_size=args.bench_batch_size)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "pipeline":
            result = run_pipeline(cfg, tuple(args.stages) if args.stages else STAGES)
        elif args.command == "report":
            result = run_stage(cfg, "report", extra_runs=args.runs)
        else:
            result = run_stage(cfg, args.command)
    except DynSubnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if result == "warning":
        print("warning: report is empty", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
