"""Sequence-embedding ablation and sampling-interval trend on 32 x 32 maps.

    python3 notebooks/trend_studies.py --out runs/trends

Each arm trains one model per seed and scores validation MSE of sampled
next frames against the truth.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import torch

from crashdiff.runtime import studies
from crashdiff.runtime.config import MapSection, ModelSection, RunConfig, ScenarioSection, TrainSection


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/trends")
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    config = RunConfig(
        scenario=ScenarioSection(segment_length=50.0, vehicle_count=4, episodes=40),
        map=MapSection(32, 32),
        model=ModelSection(base_width=16),
        train=TrainSection(steps=args.steps, lr=1e-3, T=100, log_every=250),
    ).validate()
    seeds = tuple(range(args.seeds))
    lines = []
    with_se, without_se = studies.ablation_study(config, seeds, windows=30)
    for arm in (with_se, without_se):
        lines.append(f"{arm.name}: mean {arm.mean:.5f} per seed {[round(v, 5) for v in arm.mse]}")
    for arm in studies.interval_study(config, (0.1, 0.4), seeds, windows=30):
        lines.append(f"{arm.name}: mean {arm.mean:.5f} per seed {[round(v, 5) for v in arm.mse]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trends.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
