"""End-to-end detection: crash index series around injected crashes versus
non-crash traffic, with the threshold calibrated on the non-crash indices.

    python3 notebooks/detection_study.py --out runs/detection
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import torch

from crashdiff.runtime import pipeline, studies
from crashdiff.runtime.config import (
    DetectSection,
    ExtractorSection,
    MapSection,
    ModelSection,
    RunConfig,
    ScenarioSection,
    TrainSection,
)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/detection")
    parser.add_argument("--episodes", type=int, default=10)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    config = RunConfig(
        scenario=ScenarioSection(segment_length=50.0, vehicle_count=4, interval=0.2, episodes=60),
        map=MapSection(32, 32),
        model=ModelSection(base_width=16),
        train=TrainSection(steps=10000, lr=1e-3, T=50, log_every=500),
        extractor=ExtractorSection(kind="patch", patch=8, dim=64, blocks=2, heads=4, features=64, steps=1500),
        detect=DetectSection(k=5, window=4.0),
    ).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training = pipeline.generate_episodes(config, crash="none")
    model, _ = pipeline.fit_base(config, training)
    extractor, _ = pipeline.fit_extractor(config, training)
    pipeline.save_denoiser(out / "base.mapf", model, config, config.train.steps)
    pipeline.save_extractor(out / "extractor.mapf", extractor, config, config.extractor.steps)
    crashes, normals = studies.detection_episodes(config, args.episodes)
    result = studies.detection_study(model, extractor, config, crashes, normals)
    (out / "detection.txt").write_text(result.to_text())
    print(result.to_text())


if __name__ == "__main__":
    main()
