"""Run configuration: every tunable in one validated, sectioned structure.

Files are ``key = value`` text with ``[section]`` headers. Unknown sections
or keys are rejected, and command-line flags override file values.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..crash_detector import DetectorConfig, ExtractorConfig
from ..mapfusion import DenoiserConfig, TrainConfig
from ..rsm_codec import MapDims
from ..scenario_gen import CrashKind, ScenarioConfig

INTERVALS = (0.1, 0.2, 0.3, 0.4)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSection:
    lane_count: int = 3
    segment_length: float = 100.0
    vehicle_count: int = 6
    interval: float = 0.1
    duration: float = 12.0
    speed_min: float = 10.0
    speed_max: float = 20.0
    episodes: int = 60
    crash: str = "none"  # none, sudden_stop, lane_change_collision
    crash_time: float = 6.0
    lead_margin: float = 2.0


@dataclass(frozen=True)
class MapSection:
    height: int = 64
    width: int = 64
    channels: int = 1


@dataclass(frozen=True)
class ModelSection:
    f: int = 5
    base_width: int = 16
    depth: int = 2
    heads: int = 4
    token_dim: int = 64
    embed_hidden: int = 16
    sequence_embedding: bool = True
    locality: float = 1.0  # token cells; 0 lets cross-attention start unbiased


@dataclass(frozen=True)
class TrainSection:
    steps: int = 3000
    control_steps: int = 500
    batch_size: int = 4
    lr: float = 5e-5
    T: int = 200
    beta_start: float = 0.0  # 0 -> reference range rescaled to T
    beta_end: float = 0.0
    log_every: int = 50


@dataclass(frozen=True)
class ExtractorSection:
    kind: str = "patch"  # patch or unet
    patch: int = 8
    dim: int = 64
    blocks: int = 2
    heads: int = 4
    features: int = 64
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3


@dataclass(frozen=True)
class DetectSection:
    k: int = 5
    lam: int = 0  # 0 -> max(1, ceil(C/16))
    quantile: float = 0.99
    gamma: float = math.inf
    window: float = 4.0  # seconds either side of a crash label; 0 scores every frame


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    map: MapSection = field(default_factory=MapSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    detect: DetectSection = field(default_factory=DetectSection)

    # ------------------------------------------------------------------ validation

    def validate(self) -> "RunConfig":
        s, m, d = self.scenario, self.model, self.detect
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if s.crash not in ("none",) + tuple(k.value for k in CrashKind):
            raise ConfigError(f"unknown crash kind {s.crash!r}")
        if s.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if s.duration < (m.f + 1) * s.interval:
            raise ConfigError("duration must cover at least f+1 frames")
        if self.extractor.kind not in ("patch", "unet"):
            raise ConfigError(f"unknown extractor kind {self.extractor.kind!r}")
        if d.lam < 0:
            raise ConfigError("lambda must be >= 1 (or 0 for the default)")
        if self.train.steps < 1 or self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("steps, batch_size and lr must be positive")
        try:
            self.scenario_config().validate()
            self.dims().validate()
            self.denoiser_config().validate()
            self.extractor_config().validate()
            self.detector_config().validate()
            self.train_config().schedule()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return self

    # ------------------------------------------------------------------ module configs

    def dims(self) -> MapDims:
        return MapDims(self.map.channels, self.map.height, self.map.width)

    def scenario_config(self, seed: int | None = None, **overrides) -> ScenarioConfig:
        s = self.scenario
        base = ScenarioConfig(
            lane_count=s.lane_count,
            segment_length=s.segment_length,
            vehicle_count=s.vehicle_count,
            interval=s.interval,
            duration=s.duration,
            speed_range=(s.speed_min, s.speed_max),
            seed=self.seed if seed is None else seed,
        )
        return replace(base, **overrides)

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        return DenoiserConfig(
            channels=self.map.channels,
            height=self.map.height,
            width=self.map.width,
            f=m.f,
            base_width=m.base_width,
            depth=m.depth,
            heads=m.heads,
            token_dim=m.token_dim,
            embed_hidden=m.embed_hidden,
            use_sequence_embedding=m.sequence_embedding,
            attention_locality=m.locality,
        )

    def train_config(self, control: bool = False) -> TrainConfig:
        t = self.train
        return TrainConfig(
            steps=t.control_steps if control else t.steps,
            batch_size=t.batch_size,
            lr=t.lr,
            T=t.T,
            beta_start=t.beta_start or None,
            beta_end=t.beta_end or None,
            seed=self.seed,
            log_every=t.log_every,
        )

    def extractor_config(self) -> ExtractorConfig:
        e = self.extractor
        return ExtractorConfig(
            channels=self.map.channels,
            height=self.map.height,
            width=self.map.width,
            patch=e.patch,
            dim=e.dim,
            blocks=e.blocks,
            heads=e.heads,
            features=e.features,
            seed=self.seed,
        )

    def detector_config(self) -> DetectorConfig:
        d = self.detect
        return DetectorConfig(k=d.k, lam=d.lam or None, gamma=d.gamma, f=self.model.f, quantile=d.quantile)

    # ------------------------------------------------------------------ text form

    def to_text(self) -> str:
        lines = ["[run]", f"seed = {self.seed}"]
        for f in fields(self):
            if f.name == "seed":
                continue
            lines += ["", f"[{f.name}]"]
            section = getattr(self, f.name)
            for sf in fields(section):
                lines.append(f"{sf.name} = {_format(getattr(section, sf.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config: {err}") from None
        return cls().with_values({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        return cls.from_text(text)

    def with_values(self, sections: dict[str, dict[str, object]]) -> "RunConfig":
        """Apply {section: {key: value}} overrides; values may be strings."""
        out = self
        sub = {f.name: f for f in fields(self) if f.name != "seed"}
        for name, values in sections.items():
            if name == "run":
                for key, value in values.items():
                    if key != "seed":
                        raise ConfigError(f"unknown key [run] {key}")
                    out = replace(out, seed=_coerce(int, value, "run", key))
                continue
            if name not in sub:
                raise ConfigError(f"unknown section [{name}]")
            section = getattr(out, name)
            known = {f.name: f for f in fields(section)}
            changes = {}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key [{name}] {key}")
                changes[key] = _coerce(_field_type(section, key), value, name, key)
            out = replace(out, **{name: replace(section, **changes)})
        return out


def _field_type(section, key):
    default = getattr(type(section)(), key)
    return type(default)


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(kind, value, section, key):
    if not isinstance(value, str):
        return kind(value)
    text = value.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("on", "true", "yes", "1"):
                return True
            if lowered in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text, 0)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {kind.__name__}") from None


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(config.to_text().encode()).hexdigest()[:16]


__all__ = [
    "ConfigError",
    "DetectSection",
    "ExtractorSection",
    "INTERVALS",
    "MapSection",
    "ModelSection",
    "RunConfig",
    "ScenarioSection",
    "TrainSection",
    "config_digest",
]
