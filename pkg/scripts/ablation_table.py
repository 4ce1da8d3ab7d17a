#!/usr/bin/env python3
"""Train each component-toggle variant and print the comparison table.

Usage: python scripts/ablation_table.py [--steps N] [--scenes N]
"""

import argparse

from dape.config import DapeConfig
from dape.harness import cmd_ablate, cmd_gen


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--scenes", type=int, default=40)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    corpus = cmd_gen(args.scenes, args.seed, (1, 1, 1))
    cfg = DapeConfig(steps=args.steps, eval_interval=max(args.steps // 4, 1),
                     corpus=str(corpus))
    rows = cmd_ablate(cfg)
    print(f"{'variant':<8} {'R@1':>6} {'R@5':>6} {'MACs':>12} {'fine MACs':>12} {'steps/s':>8}")
    for r in rows:
        print(
            f"{r.variant:<8} {r.r_at_1:>6.3f} {r.r_at_5:>6.3f} "
            f"{r.total_macs:>12d} {r.fine_macs:>12d} {r.steps_per_sec:>8.2f}"
        )


if __name__ == "__main__":
    main()
