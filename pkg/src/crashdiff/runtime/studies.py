"""Desk-scale experiments: generation quality, sequence-embedding ablation,
sampling-interval trend and end-to-end detection.

Every study is a pure function of a ``RunConfig`` (plus trained models where
noted), so reruns with the same config give the same numbers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..crash_detector import calibrate_threshold, detect, eval_generation
from ..mapfusion import DenoiserModel, sample_windows
from ..rsm_codec import vehicle_centroids, world_to_pixel
from ..scenario_gen import Episode, episode_background, render_episode, simulate, to_dataset
from . import pipeline
from .config import RunConfig

logger = logging.getLogger(__name__)

# offsets into the episode index space keep study splits disjoint from training
VALIDATION_OFFSET = 100_000
CRASH_OFFSET = 200_000
NORMAL_OFFSET = 300_000


# --------------------------------------------------------------------------- generation


@dataclass(frozen=True)
class GenerationQuality:
    windows: int
    samples: int
    mse: float
    mae: float
    count_exact: float  # fraction of samples with vehicle-count difference 0
    count_diffs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=int))


def validation_episodes(config: RunConfig, count: int = 20) -> list[Episode]:
    return pipeline.generate_episodes(config, crash="none", count=count, offset=VALIDATION_OFFSET)


def generation_quality(
    model: DenoiserModel,
    config: RunConfig,
    episodes: list[Episode],
    windows: int = 20,
    k: int | None = None,
    seed: int | None = None,
) -> GenerationQuality:
    """Sample k maps for ``windows`` randomly chosen windows and score each
    against the true next frame."""
    seed = config.seed if seed is None else seed
    k = config.detect.k if k is None else k
    data = to_dataset(episodes, config.model.f, config.dims())
    if not data:
        raise ValueError("no evaluation windows")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(data), min(windows, len(data)), replace=False))
    contexts = np.stack([data[i].context.stack() for i in pick])
    bgs = np.stack([data[i].background.chw() for i in pick]) if model.control is not None else None
    seeds = [pipeline.derive_seed(seed, 9, int(i)) for i in pick]
    samples = sample_windows(model, config.train_config().schedule(), contexts, bgs, k, seeds)
    rows = [eval_generation(s, data[i].target.chw()) for j, i in enumerate(pick) for s in samples[j]]
    mse, mae, diff = (np.array(c) for c in zip(*rows))
    return GenerationQuality(len(pick), len(rows), float(mse.mean()), float(mae.mean()), float(np.mean(diff == 0)), diff)


def single_vehicle_episodes(config: RunConfig, count: int = 10) -> list[Episode]:
    """Lone constant-velocity vehicles at varied lanes, positions and speeds,
    each placed to sit mid-segment when the first target frame is drawn."""
    s = config.scenario
    rng = np.random.default_rng(pipeline.derive_seed(config.seed, 13))
    f = config.model.f
    out = []
    for i in range(count):
        lane = i % s.lane_count
        speed = float(rng.uniform(s.speed_min, s.speed_max))
        x_target = float(rng.uniform(0.3, 0.7)) * s.segment_length
        x0 = x_target - speed * f * s.interval
        sc = config.scenario_config(
            seed=pipeline.derive_seed(config.seed, 13, i),
            vehicle_count=1,
            upstream=False,
            duration=(f + 1) * s.interval,
            initial_vehicles=((lane, x0, speed),),
        )
        out.append(simulate(sc))
    return out


def centroid_fidelity(model: DenoiserModel, config: RunConfig, episodes: list[Episode], k: int = 5, tolerance: float = 2.0) -> float:
    """Fraction of samples that decode to exactly one vehicle whose centroid
    lies within ``tolerance`` pixels of the true vehicle centre."""
    dims = config.dims()
    f = config.model.f
    windows = [to_dataset([ep], f, dims)[0] for ep in episodes]
    contexts = np.stack([w.context.stack() for w in windows])
    bgs = np.stack([w.background.chw() for w in windows]) if model.control is not None else None
    seeds = [pipeline.derive_seed(config.seed, 14, i) for i in range(len(windows))]
    samples = sample_windows(model, config.train_config().schedule(), contexts, bgs, k, seeds)
    ok = 0
    for ep, per_window in zip(episodes, samples):
        (record,) = ep.frames[f][1]
        truth = np.array(world_to_pixel(record.x, record.y, ep.config.extent, dims))
        for s in per_window:
            found = vehicle_centroids(s[0])
            if len(found) == 1 and np.hypot(*(np.array(found[0]) - truth)) <= tolerance:
                ok += 1
    return ok / (len(episodes) * k)


# --------------------------------------------------------------------------- trend studies


@dataclass(frozen=True)
class ArmResult:
    name: str
    seeds: tuple[int, ...]
    mse: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.mse))


def _train_and_score(config: RunConfig, windows: int, k: int) -> float:
    model, _ = pipeline.fit_base(config, pipeline.generate_episodes(config, crash="none"))
    quality = generation_quality(model, config, validation_episodes(config), windows=windows, k=k)
    logger.info("seed %d: validation mse %.6f", config.seed, quality.mse)
    return quality.mse


def ablation_study(config: RunConfig, seeds=(0, 1, 2), windows: int = 20, k: int = 2) -> tuple[ArmResult, ArmResult]:
    """Validation MSE with and without the sequence embedding. Each seed
    trains both arms on the same episodes and scores the same windows."""
    arms = []
    for name, on in (("with_se", True), ("without_se", False)):
        scores = []
        for seed in seeds:
            run = replace(config, seed=seed, model=replace(config.model, sequence_embedding=on))
            scores.append(_train_and_score(run, windows, k))
        arms.append(ArmResult(name, tuple(seeds), tuple(scores)))
    return arms[0], arms[1]


def interval_study(config: RunConfig, intervals=(0.1, 0.4), seeds=(0, 1, 2), windows: int = 20, k: int = 2) -> list[ArmResult]:
    """Validation MSE per sampling interval. Episodes keep their duration, so
    coarser intervals give fewer, further-spaced frames."""
    out = []
    for dt in intervals:
        scores = []
        for seed in seeds:
            run = replace(config, seed=seed, scenario=replace(config.scenario, interval=dt)).validate()
            scores.append(_train_and_score(run, windows, k))
        out.append(ArmResult(f"interval_{dt}", tuple(seeds), tuple(scores)))
    return out


# --------------------------------------------------------------------------- detection


@dataclass(frozen=True)
class DetectionStudy:
    gamma: float
    crash_peaks: tuple[float, ...]  # per crash episode: max index within the label band
    normal_peaks: tuple[float, ...]  # per non-crash episode: max index over its frames
    flagged: tuple[bool, ...]
    tolerance: int

    @property
    def hits(self) -> int:
        return int(sum(self.flagged))

    @property
    def paired_wins(self) -> int:
        return int(sum(n < c for c, n in zip(self.crash_peaks, self.normal_peaks)))

    def to_text(self) -> str:
        lines = [f"gamma: {self.gamma!r}", f"hits: {self.hits}/{len(self.flagged)}", f"paired_wins: {self.paired_wins}/{len(self.crash_peaks)}"]
        for i, (c, n, hit) in enumerate(zip(self.crash_peaks, self.normal_peaks, self.flagged)):
            lines.append(f"{i} crash_peak {c!r} normal_peak {n!r} {'hit' if hit else 'miss'}")
        return "\n".join(lines) + "\n"


def detection_episodes(config: RunConfig, count: int = 10) -> tuple[list[Episode], list[Episode]]:
    """``count`` crash episodes alternating between the two crash kinds, and
    ``count`` non-crash episodes at the full vehicle count."""
    crashes = []
    for i in range(count):
        kind = ("sudden_stop", "lane_change_collision")[i % 2]
        crashes += pipeline.generate_episodes(config, crash=kind, count=1, offset=CRASH_OFFSET + i)
    normals = []
    for i in range(count):
        seed = pipeline.derive_seed(config.seed, 1, NORMAL_OFFSET + i)
        normals.append(simulate(config.scenario_config(seed=seed)))
    return crashes, normals


def frames_near(episode: Episode, f: int, center: float, window: float) -> list[int]:
    times = episode.times
    return [n for n in range(f, len(episode)) if abs(times[n] - center) <= window + 1e-9]


def detection_study(
    model: DenoiserModel,
    extractor,
    config: RunConfig,
    crashes: list[Episode],
    normals: list[Episode],
    tolerance: int = 2,
) -> DetectionStudy:
    """Score crash and non-crash episodes over the same window around the
    scripted crash time, calibrate gamma on the non-crash indices and pair
    episodes by position."""
    dims = config.dims()
    dc = config.detector_config()
    sched = config.train_config().schedule()
    window = config.detect.window
    center = config.scenario.crash_time

    def run(ep: Episode, key: int, i: int, frames: list[int]):
        bg = episode_background(ep, dims) if model.control is not None else None
        seed = pipeline.derive_seed(config.seed, key, i)
        return detect(render_episode(ep, dims), model, sched, extractor, dc, seed=seed, background=bg, frames=frames)

    normal_series = [run(ep, 12, i, frames_near(ep, dc.f, center, window)) for i, ep in enumerate(normals)]
    gamma = calibrate_threshold(np.concatenate([s.index for s in normal_series]), config.detect.quantile)
    crash_peaks, flagged = [], []
    for i, ep in enumerate(crashes):
        if ep.label_frame is None:
            raise ValueError(f"crash episode {i} has no label")
        series = run(ep, 11, i, frames_near(ep, dc.f, ep.label, window))
        band = np.abs(series.frames - ep.label_frame) <= tolerance
        peak = float(series.index[band].max())
        crash_peaks.append(peak)
        flagged.append(bool(peak > gamma))
        logger.info("crash %d: peak %.4f (gamma %.4f)", i, peak, gamma)
    normal_peaks = tuple(float(s.index.max()) for s in normal_series)
    return DetectionStudy(float(gamma), tuple(crash_peaks), normal_peaks, tuple(flagged), tolerance)


__all__ = [
    "ArmResult",
    "DetectionStudy",
    "GenerationQuality",
    "ablation_study",
    "centroid_fidelity",
    "detection_episodes",
    "detection_study",
    "frames_near",
    "generation_quality",
    "interval_study",
    "single_vehicle_episodes",
    "validation_episodes",
]
