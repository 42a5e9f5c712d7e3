#!/usr/bin/env python3
"""Full experiment: generate the 450-file corpus, cross-validate all four
models, and render the combined results table.

Desk-scale by default (5,000 steps per fold for the recurrent models takes
a while on laptop hardware; pass --quick for a fast smoke run, or
--paper-steps for the full 100k/50k-step protocol).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from robomal.cli import main as cli_main
from robomal.metrics import render_table

QUICK_STEPS = {"lstm": 60, "gru": 60, "cnn": 20, "ann": 100}


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/comparison", help="output directory")
    parser.add_argument("--count", type=int, default=450)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--folds", type=int, default=10)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--quick", action="store_true", help="few steps per fold")
    parser.add_argument("--paper-steps", action="store_true")
    args = parser.parse_args(argv)

    out = Path(args.out)
    corpus = out / "corpus"
    if not (corpus / "manifest.csv").exists():
        rc = cli_main(["gen", "--count", str(args.count), "--seed", str(args.seed),
                       "--out", str(corpus)])
        if rc != 0:
            return rc

    rows = []
    for kind in ("lstm", "gru", "cnn", "ann"):
        report = out / f"report_{kind}.json"
        cmd = ["crossval", "--model", kind, "--data", str(corpus),
               "--folds", str(args.folds), "--seed", str(args.seed),
               "--out", str(report), "--checkpoint-dir", str(out / "checkpoints")]
        if args.quick:
            cmd += ["--steps", str(QUICK_STEPS[kind])]
        elif args.paper_steps:
            cmd += ["--paper-steps"]
        if args.workers:
            cmd += ["--workers", str(args.workers)]
        t0 = time.perf_counter()
        rc = cli_main(cmd)
        if rc != 0:
            return rc
        print(f"[{kind}] finished in {(time.perf_counter() - t0) / 60:.1f} min")
        rows.append((kind, json.loads(report.read_text())["aggregate"]))

    print("\n=== combined results ===")
    print(render_table(rows))
    rc = cli_main(["report", *(str(out / f"report_{k}.json") for k in
                               ("lstm", "gru", "cnn", "ann")),
                   "--loss-csv", str(out / "loss_curves.csv")])
    return rc


if __name__ == "__main__":
    sys.exit(run())
