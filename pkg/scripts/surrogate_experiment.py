"""Run the full surrogate pipeline through the CLI and print a short summary.

    python3 scripts/surrogate_experiment.py --out runs --seeds 0 1 2
"""

import argparse
import csv
import json
from pathlib import Path

from saliency_audit.pipeline import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--config")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    for seed in args.seeds:
        out = Path(args.out) / f"seed{seed}"
        timings = run(out, seed, args.config, args.jobs)
        summary = json.loads((out / "model/summary.json").read_text())
        print(f"seed {seed}: test accuracy {summary['test_acc']:.3f}")
        print("  stage seconds: " + ", ".join(f"{k} {v:.0f}" for k, v in timings.items()))
        with open(out / "retrain/retrain.csv") as fh:
            for row in csv.DictReader(fh):
                print(f"  retrain {row['method']:<22} acc {row['accuracy'] or '-':>8} sel {row['selective_accuracy'] or '-':>8} {row['error']}")


if __name__ == "__main__":
    main()
