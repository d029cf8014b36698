#!/usr/bin/env python3
"""Train the coupled-flow policy on the point-mass task and compare the
result against the scripted PD baseline."""

import argparse

import numpy as np

from genpo.cli import MetricsWriter, resolve_out_dir, save_checkpoint, build_trainer, RunConfig
from genpo.envs import PointMassConfig, scripted_episode_returns
from genpo.numerics import make_rng


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--iterations", type=int, default=300)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    cfg = RunConfig(seed=args.seed, iterations=args.iterations)
    oracle = scripted_episode_returns(PointMassConfig(), 200, make_rng(123)).mean()
    print(f"scripted PD baseline mean return: {oracle:.3f}")

    trainer = build_trainer(cfg)
    out_dir = resolve_out_dir(cfg, args.out)
    with MetricsWriter(out_dir / "metrics.jsonl") as sink:
        history = trainer.run(sink=sink.write)
    save_checkpoint(out_dir / "checkpoint.json", trainer)

    final20 = np.mean([r["return_mean"] for r in history[-20:]])
    print(f"final 20-iteration mean return: {final20:.3f}")
    print(f"ratio vs baseline: {final20 / oracle:.3f} (lower is better; < 0.9 beats the gate)")
    print(f"artifacts in {out_dir}")


if __name__ == "__main__":
    main()
