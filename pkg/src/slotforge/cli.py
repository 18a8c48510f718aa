"""Command-line entry point: ``slotforge <command> [flags]``.

Commands run one pipeline stage each and communicate only through files in
the ``--out`` directory. Exit status is 0 on success and 1 with a one-line
message on a known failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .indicator import ConfigurationError, StateError, TrainingError
from .metrics import evaluate_directories, write_scores_csv
from .scenegen import DatasetError, GenerationError

log = logging.getLogger("slotforge")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file; missing keys take defaults")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("--steps", type=int, help="override the step count of every training stage")


def build_parser():
    parser = argparse.ArgumentParser(prog="slotforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the train and val datasets")
    _common(p)
    p = sub.add_parser("train-indicator", help="train the fg/bg indicator")
    _common(p)
    p = sub.add_parser("train-fusion", help="train the base and/or fusion models")
    _common(p)
    p.add_argument("--variant", choices=("base", "fusion", "full"),
                   help="base: base model only; fusion: fusion model only; default or full: both")
    p = sub.add_parser("train-bootstrap", help="train the bootstrap adapter")
    _common(p)
    p = sub.add_parser("eval", help="score variants on a split, or score a prediction directory")
    _common(p)
    p.add_argument("--variant", choices=pipeline.VARIANTS, action="append",
                   help="variant to score; repeatable (default: all)")
    p.add_argument("--split", default="val")
    p.add_argument("--pred", type=Path, help="directory of predicted label PNGs")
    p.add_argument("--gt", type=Path, help="directory of ground-truth label PNGs")
    p = sub.add_parser("viz", help="write side-by-side overlays")
    _common(p)
    p.add_argument("-n", type=int, default=4)
    p.add_argument("--split", default="val")
    p = sub.add_parser("print-config", help="print the resolved config and its hash")
    _common(p)
    return parser


def run(args):
    cfg = pipeline.load_config(args.config, args.seed, args.steps)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "print-config":
        print(pipeline.config_json(cfg))
        print(f"config_hash: {pipeline.config_hash(cfg)}")
    elif cmd == "gen-data":
        print(pipeline.gen_data(cfg, out))
    elif cmd == "train-indicator":
        _, history = pipeline.train_indicator_stage(cfg, out)
        print(f"indicator: {len(history)} steps, final total {history[-1]['total']:.4f}" if history
              else "indicator: 0 steps")
    elif cmd == "train-fusion":
        models = pipeline.train_fusion_stage(cfg, out, args.variant)
        print("trained: " + ", ".join(models))
    elif cmd == "train-bootstrap":
        _, history = pipeline.train_bootstrap_stage(cfg, out)
        print(f"bootstrap: {len(history)} steps")
    elif cmd == "eval":
        if (args.pred is None) != (args.gt is None):
            raise ConfigurationError("--pred and --gt must be given together")
        if args.pred is not None:
            rows = evaluate_directories(args.pred, args.gt)
            path = out / "eval_dirs.csv"
            write_scores_csv(path, rows, pipeline.config_hash(cfg))
            means = [dict(variant="pred", **{k: sum(r[k] for r in rows) / len(rows)
                                             for k in ("mbo_i", "miou", "fg_iou")})]
        else:
            path, means = pipeline.eval_stage(cfg, out, tuple(args.variant or pipeline.VARIANTS), args.split)
        for m in means:
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in m.items() if k != "image"))
        print(path)
    elif cmd == "viz":
        for p in pipeline.viz_stage(cfg, out, args.n, args.split):
            print(p)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # a single thread keeps floating-point reductions, and so the metric files, reproducible
    torch.set_num_threads(1)
    try:
        return run(args)
    except (pipeline.MissingArtifactError, DatasetError) as exc:
        print(f"error: missing prerequisite: {exc}", file=sys.stderr)
    except (ConfigurationError, StateError, TrainingError, GenerationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
