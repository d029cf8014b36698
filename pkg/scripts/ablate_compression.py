#!/usr/bin/env python3
"""Compression-coefficient ablation on the point-mass task: trains with the
penalty on and off across seeds and compares the squared gap between the two
dummy-action halves over the tail of training."""

import argparse

import numpy as np

from genpo.cli import RunConfig, build_trainer
from genpo.objectives import LossConfig


def tail_gap(seed: int, compression_coeff: float, iterations: int) -> float:
    cfg = RunConfig(seed=seed, iterations=iterations, compression_coeff=compression_coeff)
    history = build_trainer(cfg).run()
    return float(np.mean([r["mean_sq_gap"] for r in history[-50:]]))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--iterations", type=int, default=300)
    parser.add_argument("--coeff", type=float, default=LossConfig().compression_coeff)
    args = parser.parse_args()

    with_penalty, without = [], []
    for seed in range(args.seeds):
        on = tail_gap(seed, args.coeff, args.iterations)
        off = tail_gap(seed, 0.0, args.iterations)
        with_penalty.append(on)
        without.append(off)
        print(f"seed {seed}: gap nu={args.coeff}: {on:.4f}   nu=0: {off:.4f}")

    print(f"median gap with penalty:    {np.median(with_penalty):.4f}")
    print(f"median gap without penalty: {np.median(without):.4f}")


if __name__ == "__main__":
    main()
