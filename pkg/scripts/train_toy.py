#!/usr/bin/env python3
"""Generate a small mixed corpus and train the default model on it.

Usage: python scripts/train_toy.py [--steps N] [--seed S] [--scenes N]
Artifacts land under $DAPE_RUN_DIR (default ./runs).
"""

import argparse
import json
from pathlib import Path

from dape.config import DapeConfig
from dape.harness import cmd_gen, cmd_train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scenes", type=int, default=80)
    args = ap.parse_args()

    corpus = cmd_gen(args.scenes, args.seed, (1, 1, 1))
    cfg = DapeConfig(steps=args.steps, corpus=str(corpus))
    summary = cmd_train(cfg)
    print(json.dumps(summary, indent=2))
    print(f"metrics: {Path(summary['run_dir']) / 'metrics.csv'}")


if __name__ == "__main__":
    main()
