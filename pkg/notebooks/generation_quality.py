"""Train the desk-scale denoiser and look at what it generates.

Run from the repository root:

    python3 notebooks/generation_quality.py --out runs/generation

Writes the checkpoint, the training log, a PNG strip of context frames,
truth and samples for a few held-out windows, and a summary of the
count-exact and centroid metrics.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np
import torch

from crashdiff.mapfusion import sample_windows
from crashdiff.rsm_codec import SegmentMap, export_image
from crashdiff.runtime import pipeline, studies
from crashdiff.runtime.config import RunConfig, TrainSection
from crashdiff.scenario_gen import to_dataset


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/generation")
    parser.add_argument("--steps", type=int, default=3000)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = RunConfig(train=TrainSection(steps=args.steps, lr=1e-3, T=200, log_every=250)).validate()
    ckpt = out / "base.mapf"
    if ckpt.exists():
        model = pipeline.load_denoiser(ckpt)[0]
    else:
        model, log = pipeline.fit_base(config, pipeline.generate_episodes(config, crash="none"))
        pipeline.save_denoiser(ckpt, model, config, config.train.steps)
        (out / "train_base.log").write_text(log.to_text())

    held_out = studies.validation_episodes(config)
    quality = studies.generation_quality(model, config, held_out, windows=20, k=5)
    centroid = studies.centroid_fidelity(model, config, studies.single_vehicle_episodes(config, 10), k=5)
    histogram = {int(v): int(np.sum(quality.count_diffs == v)) for v in np.unique(quality.count_diffs)}
    summary = [
        f"samples: {quality.samples}",
        f"mse: {quality.mse:.5f}",
        f"count_exact: {quality.count_exact:.3f}",
        f"count_diff_histogram: {histogram}",
        f"centroid_within_2px: {centroid:.3f}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))

    # a few windows as images: the last context frame, the truth and three samples
    windows = to_dataset(held_out[:3], config.model.f, config.dims())[::40][:3]
    contexts = np.stack([w.context.stack() for w in windows])
    samples = sample_windows(model, config.train_config().schedule(), contexts, None, 3, list(range(len(windows))))
    for i, w in enumerate(windows):
        strip = [w.context.frames[-1].chw(), w.target.chw(), *samples[i]]
        export_image(out / f"window_{i}.png", SegmentMap.from_chw(np.concatenate(strip, axis=2)))


if __name__ == "__main__":
    main()
