"""Command-line entry point: ``rtpen generate | train | eval | export-attention``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import config_from_snapshot, load_train_config, parse_key_values, resolve_paths
from .errors import RTPENError
from .evaluation import format_report, write_predictions
from .pipeline import evaluate, export_attention, find_sample, train
from .synthetic import generate_dataset, synthetic_config_from_dict

log = logging.getLogger("rtpen")


def _generate(args) -> int:
    path = Path(args.config)
    values = resolve_paths(parse_key_values(path.read_text(encoding="utf-8"), str(path)), path.parent)
    for item in args.override:
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    out_dir = values.get("out_dir") or values.get("output_dir") or "data/synthetic"
    paths = generate_dataset(synthetic_config_from_dict(values), out_dir)
    for name, p in paths.items():
        print(f"{name}={p}")
    return 0


def _train(args) -> int:
    cfg = load_train_config(args.config, args.override)
    result = train(cfg)
    for record in result.history:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))
    if result.best_path is not None:
        print(f"best_checkpoint={result.best_path}")
    print(f"last_checkpoint={Path(cfg.output_dir) / 'last.ckpt'}")
    return 0


def _eval(args) -> int:
    cfg = load_train_config(args.config, args.override)
    report, preds = evaluate(cfg, args.checkpoint, args.split, return_predictions=True)
    sys.stdout.write(format_report(report))
    if args.predictions:
        write_predictions(args.predictions, preds)
    return 0


def _export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_train_config(args.config, args.override)
    else:
        cfg = config_from_snapshot(ckpt.config)
    sample = find_sample(cfg, args.sample)
    out = args.out or f"attention_{args.sample}.csv"
    print(export_attention(ckpt, sample, out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtpen", description="Weakly-supervised video moment retrieval")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="flat key = value config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
        return p

    p = with_config(sub.add_parser("generate", help="write a synthetic dataset"))
    p.set_defaults(func=_generate)
    p = with_config(sub.add_parser("train", help="train a model"))
    p.set_defaults(func=_train)
    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--predictions", help="also write ranked predictions to this file")
    p.set_defaults(func=_eval)
    p = with_config(sub.add_parser("export-attention", help="dump attention heat maps of one sample"),
                    required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample id or video id")
    p.add_argument("--out", help="output file (default attention_<sample>.csv)")
    p.set_defaults(func=_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RTPENError, ValueError, KeyError, OSError) as err:
        print(f"rtpen: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
