"""Command-line pipeline: generate, cross-validate, scan, report.

Exit codes are a stable scripting contract: 0 for success (or a good-file
verdict from `scan`), 2 for a malware verdict, 1 for any error. Seeds come
from --seed, falling back to the ROBOMAL_SEED environment variable, then 0.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, corpusgen, elfio, metrics, trainer
from .featurize import EmptyPayload, featurize
from .models import MODEL_KINDS, ModelConfig
from .trainer import LabeledDataset, TrainConfig

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MALWARE = 2


def _env_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("ROBOMAL_SEED")
    return int(env) if env else 0


def load_corpus(data_dir: Path) -> tuple[LabeledDataset, corpusgen.CorpusManifest]:
    """Read manifest.csv and featurize every listed file's .pydata section."""
    manifest = corpusgen.CorpusManifest.read_csv(data_dir / "manifest.csv")
    sequences = []
    labels = []
    for row in manifest.rows:
        image = (data_dir / row.filename).read_bytes()
        payload = elfio.extract_section(elfio.parse_elf(image), ".pydata")
        sequences.append(featurize(payload))
        labels.append(row.label)
    return LabeledDataset(sequences=sequences, labels=labels), manifest


def cmd_gen(args) -> int:
    seed = _env_seed(args.seed)
    out_dir = Path(args.out)
    manifest = corpusgen.generate_corpus(
        count=args.count, malware_fraction=args.malware_fraction,
        seed=seed, out_dir=out_dir)
    malware, good = manifest.class_counts()
    print(f"wrote {len(manifest.rows)} files to {out_dir}")
    print(f"manifest: {out_dir / 'manifest.csv'}")
    print(f"malware={malware} good={good}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    seed = _env_seed(args.seed)
    data_dir = Path(args.data)
    dataset, _ = load_corpus(data_dir)
    config = TrainConfig.for_kind(
        args.model, seed=seed, paper_steps=args.paper_steps,
        max_steps=args.steps, folds=args.folds)
    workers = args.workers if args.workers else min(config.folds, os.cpu_count() or 1)
    result = trainer.crossval(config, dataset, workers=workers)

    out_path = Path(args.out) if args.out else data_dir / f"report_{args.model}.json"
    report_text = metrics.render_report_json(
        model=args.model, seed=seed, per_fold=result.per_fold,
        fold_sizes=result.fold_sizes, loss_curves=result.loss_curves,
        curve_stride=trainer.CURVE_STRIDE, max_steps=config.max_steps)
    out_path.write_text(report_text)

    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else out_path.parent / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for i, ckpt in enumerate(result.checkpoints):
        trainer.save_checkpoint(ckpt, ckpt_dir / f"{args.model}_fold{i}.rmck")

    agg, _ = metrics.aggregate(result.per_fold)
    print(metrics.render_table([(args.model, agg.as_dict())]))
    print(f"report: {out_path}")
    print(f"checkpoints: {ckpt_dir}")
    return EXIT_OK


def cmd_scan(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    image = Path(args.file).read_bytes()
    if args.raw_offset is not None or args.raw_length is not None:
        if args.raw_offset is None or args.raw_length is None:
            raise ValueError("--raw-offset and --raw-length must be given together")
        if args.section is not None:
            raise ValueError("choose either --section or the raw offset/length pair")
        payload = elfio.extract_range(image, args.raw_offset, args.raw_length)
    else:
        section = args.section if args.section is not None else ".pydata"
        payload = elfio.extract_section(elfio.parse_elf(image), section)
    seq = featurize(payload)
    result = trainer.evaluate_fold(
        ckpt,
        LabeledDataset(sequences=[seq], labels=[0]),
        trainer.Fold(train_indices=np.array([], dtype=int),
                     test_indices=np.array([0])))
    prob = float(result.probabilities[0])
    verdict = "malware" if prob >= 0.5 else "good"
    print(f"{args.file}: {verdict} (malware probability {prob:.4f})")
    return EXIT_MALWARE if verdict == "malware" else EXIT_OK


def cmd_report(args) -> int:
    rows = []
    docs = []
    for path in args.reports:
        text = Path(path).read_text()
        if not text.strip():
            raise ValueError(f"{path}: empty report file")
        doc = metrics.parse_report_json(text)
        docs.append(doc)
        rows.append((doc["model"], doc["aggregate"]))
    print(metrics.render_table(rows))
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "fold", "step", "loss"])
            for doc in docs:
                stride = doc.get("loss_curve_stride", 1)
                last_step = doc.get("max_steps", 0) - 1
                for fold_i, curve in enumerate(doc.get("loss_curves", [])):
                    for j, value in enumerate(curve):
                        step = j * stride
                        if j == len(curve) - 1:
                            step = max(step, last_step)
                        writer.writerow([doc["model"], fold_i, step, repr(value)])
        print(f"loss curves: {args.loss_csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robomal",
        description="Static malware detection for robot controller ELF binaries")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a labeled synthetic corpus")
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--malware-fraction", type=float,
                       default=corpusgen.DEFAULT_MALWARE_FRACTION)
    p_gen.set_defaults(func=cmd_gen)

    p_cv = sub.add_parser("crossval", help="k-fold cross-validation on a corpus")
    p_cv.add_argument("--model", choices=MODEL_KINDS, required=True)
    p_cv.add_argument("--data", required=True)
    p_cv.add_argument("--folds", type=int, default=10)
    p_cv.add_argument("--seed", type=int, default=None)
    p_cv.add_argument("--steps", type=int, default=None,
                      help="gradient updates per fold (desk-scale default 5000)")
    p_cv.add_argument("--paper-steps", action="store_true",
                      help="use the full-scale step counts (100k recurrent, 50k conv/dense)")
    p_cv.add_argument("--workers", type=int, default=None)
    p_cv.add_argument("--out", default=None, help="report JSON path")
    p_cv.add_argument("--checkpoint-dir", default=None)
    p_cv.set_defaults(func=cmd_crossval)

    p_scan = sub.add_parser("scan", help="classify one ELF file")
    p_scan.add_argument("file")
    p_scan.add_argument("--checkpoint", required=True)
    p_scan.add_argument("--section", default=None,
                        help="section holding controller bytes (default .pydata)")
    p_scan.add_argument("--raw-offset", type=int, default=None)
    p_scan.add_argument("--raw-length", type=int, default=None)
    p_scan.set_defaults(func=cmd_scan)

    p_rep = sub.add_parser("report", help="render stored reports as a table")
    p_rep.add_argument("reports", nargs="+")
    p_rep.add_argument("--loss-csv", default=None)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
