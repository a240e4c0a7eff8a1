"""Glue between the run configuration, the modules and checkpoint files."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..crash_detector import FeatureExtractor, MidBlockExtractor, train_feature_extractor
from ..mapfusion import DenoiserModel, TrainLog, train_base, train_control
from ..scenario_gen import (
    CrashKind,
    CrashSpec,
    Episode,
    generate_crash_episode,
    read_episode,
    render_episode,
    simulate,
    to_dataset,
    write_episode,
)
from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for a sub-task of a run."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --------------------------------------------------------------------------- episodes


def generate_episodes(config: RunConfig, crash: str | None = None, count: int | None = None, offset: int = 0) -> list[Episode]:
    """Non-crash episodes cycle through 1..vehicle_count vehicles so the set
    contains sparse and dense traffic; crash episodes use the full count."""
    crash = config.scenario.crash if crash is None else crash
    count = config.scenario.episodes if count is None else count
    s = config.scenario
    out = []
    for i in range(offset, offset + count):
        seed = derive_seed(config.seed, 1, i)
        if crash == "none":
            sc = config.scenario_config(seed=seed, vehicle_count=1 + i % s.vehicle_count)
            out.append(simulate(sc))
        else:
            spec = CrashSpec(CrashKind(crash), s.crash_time, s.lead_margin)
            out.append(generate_crash_episode(config.scenario_config(seed=seed), spec))
    return out


def write_episodes(directory, episodes: list[Episode], prefix: str = "episode") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ep in enumerate(episodes):
        path = directory / f"{prefix}_{i:04d}.txt"
        write_episode(path, ep)
        paths.append(path)
    return paths


def read_episodes(directory) -> list[Episode]:
    paths = sorted(Path(directory).glob("*.txt"))
    if not paths:
        raise ConfigError(f"no episode files in {directory}")
    return [read_episode(p) for p in paths]


# --------------------------------------------------------------------------- models


def save_denoiser(path, model: DenoiserModel, config: RunConfig, step: int) -> None:
    tensors = ckpt_io.state_tensors(model)
    ck = ckpt_io.Checkpoint("denoiser", config.to_text(), step, ckpt_io.rng_summary(config.seed, step), tensors)
    ckpt_io.save(path, ck)


def load_denoiser(path) -> tuple[DenoiserModel, RunConfig, int]:
    ck = ckpt_io.load(path)
    if ck.kind != "denoiser":
        raise ckpt_io.CheckpointError(f"{path} holds a {ck.kind}, not a denoiser")
    config = RunConfig.from_text(ck.config_text)
    model = DenoiserModel(config.denoiser_config(), seed=config.seed)
    if any(name.startswith("control.") for name in ck.tensors):
        model.attach_control()
    ckpt_io.load_tensors(model, ck.tensors)
    model.eval()
    return model, config, ck.step


def save_extractor(path, extractor: FeatureExtractor, config: RunConfig, step: int) -> None:
    tensors = ckpt_io.state_tensors(extractor)
    ck = ckpt_io.Checkpoint("extractor", config.to_text(), step, ckpt_io.rng_summary(config.seed, step), tensors)
    ckpt_io.save(path, ck)


def load_extractor(path, model: DenoiserModel | None = None):
    """Patch extractor from a checkpoint, or the denoiser's mid-block when
    ``path`` is the literal ``unet``."""
    if str(path) == "unet":
        if model is None:
            raise ConfigError("the unet extractor needs a denoiser checkpoint")
        return MidBlockExtractor(model)
    ck = ckpt_io.load(path)
    if ck.kind != "extractor":
        raise ckpt_io.CheckpointError(f"{path} holds a {ck.kind}, not an extractor")
    config = RunConfig.from_text(ck.config_text)
    extractor = FeatureExtractor(config.extractor_config())
    ckpt_io.load_tensors(extractor, ck.tensors)
    extractor.eval()
    return extractor


def fit_base(config: RunConfig, episodes: list[Episode]) -> tuple[DenoiserModel, TrainLog]:
    windows = to_dataset(episodes, config.model.f, config.dims())
    return train_base(windows, config.denoiser_config(), config.train_config())


def fit_control(config: RunConfig, model: DenoiserModel, episodes: list[Episode]) -> tuple[DenoiserModel, TrainLog]:
    windows = to_dataset(episodes, config.model.f, config.dims())
    return train_control(windows, model, config.train_config(control=True))


def fit_extractor(config: RunConfig, episodes: list[Episode]) -> tuple[FeatureExtractor, TrainLog]:
    maps = []
    for ep in episodes:
        end = len(ep) if ep.label_frame is None else ep.label_frame
        maps += render_episode(ep, config.dims())[:end]
    e = config.extractor
    return train_feature_extractor(maps, config.extractor_config(), steps=e.steps, batch_size=e.batch_size, lr=e.lr)


def evaluation_frames(episode: Episode, f: int, window: float) -> list[int]:
    """Frames scored by detection: every frame from f on, or only those
    within ``window`` seconds of the crash label when one exists."""
    frames = list(range(f, len(episode)))
    if episode.label is None or window <= 0:
        return frames
    times = episode.times
    return [n for n in frames if abs(times[n] - episode.label) <= window + 1e-9]


def with_overrides(config: RunConfig, **flags) -> RunConfig:
    """Apply the global CLI flags (None means "not given")."""
    if flags.get("seed") is not None:
        config = replace(config, seed=flags["seed"])
    values: dict[str, dict[str, object]] = {}
    if flags.get("interval") is not None:
        values.setdefault("scenario", {})["interval"] = flags["interval"]
    for key, section, name in (("k", "detect", "k"), ("lam", "detect", "lam"), ("quantile", "detect", "quantile"), ("gamma", "detect", "gamma")):
        if flags.get(key) is not None:
            values.setdefault(section, {})[name] = flags[key]
    if flags.get("ablate_se") is not None:
        values.setdefault("model", {})["sequence_embedding"] = flags["ablate_se"] == "off"
    return config.with_values(values).validate()
