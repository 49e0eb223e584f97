"""Backward transfer on overlapping class ranges.

Five tasks, each sharing half of its classes with the next. CUBER lets a new
task update weights inside an old task's subspace when their gradients agree,
so old tasks can improve; the two ablations cannot.

    python3 demos/overlap_backward_transfer.py [--threads 3]
"""
import argparse
from pathlib import Path

import numpy as np

from cuber.experiment import ExperimentConfig, run_experiment

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "overlap_bwt.json"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    cfg = ExperimentConfig.load(CONFIG)
    results = run_experiment(cfg, threads=args.threads)
    print(f"{'mode':<16} {'ACC':>8} {'BWT':>9}")
    for mode in cfg.modes:
        rows = [r["metrics"] for r in results if r["mode"] == mode]
        acc = np.mean([m["acc"] for m in rows])
        bwt = np.mean([m["bwt"] for m in rows])
        print(f"{mode:<16} {acc:8.4f} {bwt:+9.4f}")


if __name__ == "__main__":
    main()
