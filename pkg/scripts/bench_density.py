#!/usr/bin/env python3
"""Sweep forced dense-row fractions and print the fine-alignment cost
curve against the everything-everywhere baseline.

Usage: python scripts/bench_density.py [--densities 0,25,50,75,100]
"""

import argparse

from dape.config import DapeConfig
from dape.harness import bench_densities


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--densities", default="0,10,25,50,75,90,100")
    args = ap.parse_args()
    densities = [float(x) for x in args.densities.split(",")]

    rows = bench_densities(DapeConfig(), densities)
    print(f"{'density':>8} {'cosines':>9} {'uniform':>9} {'ratio':>8}")
    for r in rows:
        print(f"{r.density:>8.2f} {r.cosines:>9d} {r.uniform:>9d} {r.ratio:>8.4f}")


if __name__ == "__main__":
    main()
