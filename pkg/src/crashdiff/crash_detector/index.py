"""Crash Index, threshold calibration, sliding-window detection and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rsm_codec import SegmentMap, count_vehicles
from .features import extract_features

MIN_CALIBRATION_VALUES = 50


class DetectorError(ValueError):
    pass


def default_lambda(c: int) -> int:
    return max(1, math.ceil(c / 16))


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 5
    lam: int | None = None  # None -> default_lambda(C)
    gamma: float = math.inf
    f: int = 5
    quantile: float = 0.99

    def validate(self, c: int | None = None) -> None:
        if self.k < 2:
            raise DetectorError("k must be >= 2")
        if self.f < 1:
            raise DetectorError("f must be >= 1")
        if not 0 < self.quantile <= 1:
            raise DetectorError("quantile must lie in (0, 1]")
        # negative gamma is allowed as a "flag every frame" override
        if math.isnan(self.gamma):
            raise DetectorError("gamma must not be NaN")
        if c is not None and self.lam is not None and not 1 <= self.lam <= c:
            raise DetectorError(f"lambda {self.lam} outside 1..{c}")

    def resolved_lambda(self, c: int) -> int:
        return default_lambda(c) if self.lam is None else self.lam


def crash_index(sample_features, observed, lam: int) -> float:
    """Squared deviation of ``observed`` from the sample mean: the mean over
    all C components plus the mean of the ``lam`` largest components."""
    s = np.asarray(sample_features, dtype=np.float64)
    r = np.asarray(observed, dtype=np.float64)
    if s.ndim != 2 or len(s) < 2:
        raise DetectorError("need at least two sample feature vectors")
    if s.shape[1] != r.shape[-1] or r.ndim != 1:
        raise DetectorError(f"feature length mismatch {s.shape[1]} vs {r.shape}")
    c = r.shape[0]
    if not 1 <= lam <= c:
        raise DetectorError(f"lambda {lam} outside 1..{c}")
    d2 = (s.mean(axis=0) - r) ** 2
    # stable sort on -d2 keeps the lowest index first among ties
    top = np.argsort(-d2, kind="stable")[:lam]
    return float(d2.sum() / c + d2[top].sum() / lam)


def calibrate_threshold(values, quantile: float = 0.99) -> float:
    """Empirical quantile with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DetectorError("no index values to calibrate on")
    if v.size < MIN_CALIBRATION_VALUES:
        raise DetectorError(f"need at least {MIN_CALIBRATION_VALUES} values, got {v.size}")
    if not 0 < quantile <= 1:
        raise DetectorError("quantile must lie in (0, 1]")
    return float(np.quantile(v, quantile, method="linear"))


@dataclass
class CrashIndexSeries:
    times: np.ndarray
    index: np.ndarray
    gamma: float
    frames: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.index = np.asarray(self.index, dtype=np.float64)
        if self.frames is None:
            self.frames = np.arange(len(self.times))
        self.frames = np.asarray(self.frames, dtype=np.int64)

    @property
    def decisions(self) -> np.ndarray:
        return (self.index > self.gamma).astype(np.int64)

    def with_gamma(self, gamma: float) -> "CrashIndexSeries":
        return CrashIndexSeries(self.times, self.index, gamma, self.frames)

    def to_text(self) -> str:
        lines = [f"# gamma={float(self.gamma)!r}\n"]
        lines += [f"{t:.4f} {float(a)!r} {d}\n" for t, a, d in zip(self.times, self.index, self.decisions)]
        return "".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "CrashIndexSeries":
        gamma = math.inf
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("# gamma="):
                gamma = float(line.split("=", 1)[1])
            elif line and not line.startswith("#"):
                t, a, _ = line.split()
                rows.append((float(t), float(a)))
        times, index = (np.array(c) for c in zip(*rows)) if rows else (np.zeros(0), np.zeros(0))
        return cls(times, index, gamma)


def detect(
    maps: list[SegmentMap],
    model,
    sched,
    extractor,
    config: DetectorConfig = DetectorConfig(),
    seed: int = 0,
    background=None,
    frames=None,
) -> CrashIndexSeries:
    """Slide an f-frame context over the episode with stride 1 and score
    each observed frame against k generated maps.

    ``frames`` optionally restricts scoring to a subset of frame indices
    (each must be >= f). Each window's sample seed is derived from
    (seed, frame index), so restricting frames does not change the scores.
    """
    from ..mapfusion.sampling import sample_windows

    config.validate()
    f = config.f
    if len(maps) < f + 1:
        raise DetectorError(f"episode has {len(maps)} frames, need at least f+1={f + 1}")
    if frames is None:
        frames = list(range(f, len(maps)))
    frames = [int(n) for n in frames]
    if any(n < f or n >= len(maps) for n in frames):
        raise DetectorError(f"frames must lie in {f}..{len(maps) - 1}")
    stack = np.stack([m.chw() for m in maps])
    contexts = np.stack([stack[n - f : n] for n in frames])
    bgs = None
    if background is not None:
        bgs = np.broadcast_to(background.chw(), (len(frames),) + background.chw().shape)
    seeds = [int(np.random.SeedSequence([int(seed), n]).generate_state(1)[0]) for n in frames]
    samples = sample_windows(model, sched, contexts, bgs, config.k, seeds)
    w, k = samples.shape[:2]
    sample_feats = extract_features(extractor, samples.reshape((w * k,) + samples.shape[2:])).reshape(w, k, -1)
    observed = extract_features(extractor, stack[frames])
    c = observed.shape[1]
    config.validate(c)
    lam = config.resolved_lambda(c)
    index = [crash_index(sample_feats[i], observed[i], lam) for i in range(w)]
    times = [maps[n].time for n in frames]
    return CrashIndexSeries(times, index, config.gamma, frames)


def eval_generation(generated, truth, threshold: float = 0.5) -> tuple[float, float, int]:
    """Pixel MSE, pixel MAE and vehicle-count difference (generated - truth)."""
    g = generated.chw() if isinstance(generated, SegmentMap) else np.asarray(generated)
    t = truth.chw() if isinstance(truth, SegmentMap) else np.asarray(truth)
    if g.shape != t.shape:
        raise DetectorError(f"shape mismatch {g.shape} vs {t.shape}")
    diff = g.astype(np.float64) - t.astype(np.float64)
    count_diff = count_vehicles(g[0] if g.ndim == 3 else g, threshold) - count_vehicles(t[0] if t.ndim == 3 else t, threshold)
    return float((diff**2).mean()), float(np.abs(diff).mean()), int(count_diff)


@dataclass(frozen=True)
class DetectionReport:
    hit: bool | None  # None for episodes without a crash label
    delay: int | None  # first alarm frame in the tolerance band minus label frame
    false_alarm_rate: float
    false_alarms: int
    non_crash_frames: int

    def to_text(self) -> str:
        hit = "n/a" if self.hit is None else ("hit" if self.hit else "miss")
        delay = "n/a" if self.delay is None else str(self.delay)
        return (
            f"detection: {hit}\n"
            f"delay_frames: {delay}\n"
            f"false_alarms: {self.false_alarms}/{self.non_crash_frames}\n"
            f"false_alarm_rate: {self.false_alarm_rate:.4f}\n"
        )


def detection_report(series: CrashIndexSeries, label_frame: int | None = None, tolerance: int = 2) -> DetectionReport:
    """Hit within +-``tolerance`` frames of the label, delay of the first such
    alarm, and false alarms over frames before the tolerance band (all
    frames for a non-crash episode)."""
    frames = series.frames
    decisions = series.decisions
    if label_frame is None:
        normal = np.ones(len(frames), dtype=bool)
        hit = delay = None
    else:
        band = np.abs(frames - label_frame) <= tolerance
        normal = frames < label_frame - tolerance
        alarms = frames[band & (decisions == 1)]
        hit = bool(len(alarms))
        delay = int(alarms[0] - label_frame) if hit else None
    n = int(normal.sum())
    fa = int(decisions[normal].sum())
    return DetectionReport(hit, delay, fa / n if n else 0.0, fa, n)
