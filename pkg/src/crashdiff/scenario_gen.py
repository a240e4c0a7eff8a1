"""Synthetic multi-lane traffic episodes with optional injected crashes.

Vehicles drive on straight lanes under a deterministic gap-keeping rule
integrated at a fixed internal step (``SIM_DT``). Frames are emitted every
``interval`` seconds, so an episode simulated at 0.4 s is exactly every
4th frame of the same seed simulated at 0.1 s.

Traffic upstream of the segment is seeded at the same density so the
segment keeps a steady stream of vehicles entering at ``x_min``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rsm_codec import (
    BackgroundMap,
    ConfigurationError,
    MapDims,
    MapSequence,
    ParseError,
    SegmentExtent,
    SegmentMap,
    VehicleClass,
    VehicleRecord,
    make_background,
    rasterize_frame,
    read_records,
    write_records,
)

logger = logging.getLogger(__name__)

SIM_DT = 0.02

# gap-keeping controller
MIN_STANDSTILL_GAP = 2.0  # m, bumper to bumper
TIME_HEADWAY = 1.2  # s
HARD_MIN_GAP = 0.5  # m, enforced by the safety clamp
SPEED_GAIN = 0.5  # 1/s
GAP_GAIN = 0.2  # 1/s^2
CLOSING_GAIN = 0.8  # 1/s
MAX_ACCEL = 2.0
MAX_BRAKE = 9.0

# crash dynamics
MIN_EXTREME_DECEL = 6.0
MAX_EXTREME_DECEL = 60.0
POST_IMPACT_DECEL = 8.0
IMPACT_PENETRATION = 1.0  # m, crumple depth past first contact
IMPACT_YAW = (0.4, 0.8)  # rad, magnitude range of the impact rotation
CRASH_EDGE_MARGIN = 10.0  # m, contact must happen this far inside the segment


class InjectionError(RuntimeError):
    """No vehicle pair can produce the requested crash."""


class CrashKind(str, enum.Enum):
    SUDDEN_STOP = "sudden_stop"
    LANE_CHANGE_COLLISION = "lane_change_collision"


@dataclass(frozen=True)
class ScenarioConfig:
    lane_count: int = 3
    segment_length: float = 100.0
    vehicle_count: int = 6
    interval: float = 0.1
    duration: float = 12.0
    speed_range: tuple[float, float] = (10.0, 20.0)
    seed: int = 0
    lane_width: float = 3.6
    truck_fraction: float = 0.1
    upstream: bool = True
    # scripted vehicles as (lane, x, speed[, length, width]); replaces random placement
    initial_vehicles: tuple | None = None

    @property
    def extent(self) -> SegmentExtent:
        return SegmentExtent.for_lanes(self.lane_count, self.segment_length, self.lane_width)

    @property
    def frame_count(self) -> int:
        return int(round(self.duration / self.interval)) + 1

    @property
    def steps_per_frame(self) -> int:
        ratio = self.interval / SIM_DT
        steps = int(round(ratio))
        if steps < 1 or abs(ratio - steps) > 1e-6:
            raise ConfigurationError(f"interval {self.interval} is not a multiple of {SIM_DT}s")
        return steps

    def validate(self) -> None:
        if self.lane_count < 1 or self.vehicle_count < 0:
            raise ConfigurationError("lane_count must be >= 1 and vehicle_count >= 0")
        if self.segment_length <= 0 or self.duration <= 0:
            raise ConfigurationError("segment_length and duration must be positive")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"bad speed range {self.speed_range}")
        self.steps_per_frame


@dataclass(frozen=True)
class CrashSpec:
    kind: CrashKind = CrashKind.SUDDEN_STOP
    crash_time: float = 6.0
    lead_margin: float = 2.0


@dataclass
class Episode:
    frames: list[tuple[float, list[VehicleRecord]]]
    label: float | None = None
    config: ScenarioConfig = field(default_factory=ScenarioConfig)
    crash: CrashSpec | None = None

    @property
    def interval(self) -> float:
        return self.config.interval

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.frames])

    @property
    def label_frame(self) -> int | None:
        if self.label is None:
            return None
        return int(np.argmin(np.abs(self.times - self.label)))

    def __len__(self) -> int:
        return len(self.frames)


# --------------------------------------------------------------------------- geometry


def rectangle_corners(x, y, length, width, heading) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rectangles_overlap(a: VehicleRecord, b: VehicleRecord) -> bool:
    """Separating-axis test on two rotated footprints (touching is not overlap)."""
    ca = rectangle_corners(a.x, a.y, a.length, a.width, a.heading)
    cb = rectangle_corners(b.x, b.y, b.length, b.width, b.heading)
    for heading in (a.heading, b.heading):
        for axis in ((math.cos(heading), math.sin(heading)), (-math.sin(heading), math.cos(heading))):
            pa, pb = ca @ axis, cb @ axis
            if pa.max() <= pb.min() + 1e-9 or pb.max() <= pa.min() + 1e-9:
                return False
    return True


def frame_has_overlap(records: list[VehicleRecord]) -> bool:
    return any(
        rectangles_overlap(records[i], records[j])
        for i in range(len(records))
        for j in range(i + 1, len(records))
    )


def sudden_stop_contact_time(gap: float, v_lead: float, v_follow: float, decel: float) -> float:
    """Time until a constant-speed follower touches a leader braking at ``decel``.

    Returns ``inf`` when they never touch.
    """
    if gap <= 0:
        return 0.0
    stop_time = v_lead / decel if decel > 0 else math.inf
    # while the leader still moves: gap + (v_l - v_f) t - decel t^2 / 2 = 0
    a, b, c = -0.5 * decel, v_lead - v_follow, gap
    roots = []
    if abs(a) < 1e-12:
        if b < 0:
            roots.append(-c / b)
    else:
        disc = b * b - 4 * a * c
        if disc >= 0:
            sq = math.sqrt(disc)
            roots.extend(r for r in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)) if r > 0)
    roots = [r for r in roots if r <= stop_time]
    if roots:
        return min(roots)
    if v_follow <= 0 or math.isinf(stop_time):
        return math.inf
    # leader stopped at stop_time after covering v_l^2 / (2 decel)
    remaining = gap + v_lead * v_lead / (2 * decel) - v_follow * stop_time
    return stop_time + max(remaining, 0.0) / v_follow


def _required_decel(gap: float, v_lead: float, v_follow: float, horizon: float) -> float | None:
    """Leader deceleration that makes contact happen exactly after ``horizon``."""
    travel = v_follow * horizon - gap  # distance the leader may cover
    if travel < 0:
        return None
    if travel <= 0.5 * v_lead * horizon:
        return math.inf if travel == 0 else v_lead * v_lead / (2 * travel)
    return 2 * (v_lead * horizon - travel) / horizon**2


# --------------------------------------------------------------------------- simulation


class _Mode(enum.IntEnum):
    NORMAL = 0
    DISTRACTED = 1  # keeps its speed, ignores the leader
    BRAKING = 2  # decelerates at the per-vehicle extreme rate
    CRASHED = 3
    LANE_CHANGE = 4


@dataclass
class _State:
    lane: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    v_des: np.ndarray
    length: np.ndarray
    width: np.ndarray
    heading: np.ndarray
    cls: np.ndarray
    mode: np.ndarray
    decel: np.ndarray
    lateral: np.ndarray  # lateral speed of lane-changing vehicles

    def copy(self) -> "_State":
        return _State(**{k: v.copy() for k, v in self.__dict__.items()})

    def __len__(self) -> int:
        return len(self.x)


def _lane_centre(lane, lane_width):
    return (np.asarray(lane) + 0.5) * lane_width


def _draw_sizes(rng, n, truck_fraction):
    is_truck = rng.random(n) < truck_fraction
    length = np.where(is_truck, rng.uniform(8.0, 12.0, n), rng.uniform(4.2, 5.0, n))
    width = np.where(is_truck, rng.uniform(2.3, 2.5, n), rng.uniform(1.7, 1.9, n))
    cls = np.where(is_truck, VehicleClass.TRUCK, VehicleClass.CAR)
    return length, width, cls


def _place_in_lane(rng, lo, hi, lengths):
    """Centres of vehicles packed into [lo, hi] with random spacing."""
    need = lengths + MIN_STANDSTILL_GAP
    free = (hi - lo) - need.sum()
    if free < 0:
        raise ConfigurationError(
            f"cannot fit {len(lengths)} vehicles into {hi - lo:.1f} m of lane with minimum gaps"
        )
    offsets = np.sort(rng.uniform(0.0, free, len(lengths)))
    starts = lo + offsets + np.concatenate([[0.0], np.cumsum(need)[:-1]])
    return starts + 0.5 * lengths


def _initial_state(config: ScenarioConfig) -> _State:
    rng = np.random.default_rng(config.seed)
    lo_v, hi_v = config.speed_range
    if config.initial_vehicles is not None:
        rows = [tuple(v) for v in config.initial_vehicles]
        n = len(rows)
        lane = np.array([r[0] for r in rows], dtype=int)
        x = np.array([r[1] for r in rows], dtype=float)
        v = np.array([r[2] for r in rows], dtype=float)
        length = np.array([r[3] if len(r) > 3 else 4.5 for r in rows], dtype=float)
        width = np.array([r[4] if len(r) > 4 else 1.8 for r in rows], dtype=float)
        cls = np.where(length > 7.0, VehicleClass.TRUCK, VehicleClass.CAR)
        v_des = v.copy()
    else:
        n_visible = config.vehicle_count
        upstream_len = hi_v * config.duration if config.upstream else 0.0
        n_up = int(round(n_visible * upstream_len / config.segment_length)) if n_visible else 0
        n = n_visible + n_up
        length, width, cls = _draw_sizes(rng, n, config.truck_fraction)
        lane = rng.integers(0, config.lane_count, n)
        v_des = rng.uniform(lo_v, hi_v, n)
        x = np.empty(n)
        visible = np.arange(n) < n_visible
        for ln in range(config.lane_count):
            for region, (lo, hi) in (
                (visible, (0.0, config.segment_length)),
                (~visible, (-upstream_len, -14.0)),
            ):
                idx = np.flatnonzero(region & (lane == ln))
                if len(idx):
                    x[idx] = _place_in_lane(rng, lo, hi, length[idx])
        v = v_des.copy()
    state = _State(
        lane=lane,
        x=x,
        y=_lane_centre(lane, config.lane_width),
        v=v,
        v_des=v_des,
        length=length,
        width=width,
        heading=np.zeros(n),
        cls=np.asarray(cls, dtype=int),
        mode=np.zeros(n, dtype=int),
        decel=np.zeros(n),
        lateral=np.zeros(n),
    )
    if config.initial_vehicles is None:
        # start every follower at a speed its gap can sustain
        for i, lead in _leaders(state):
            if lead >= 0:
                gap = _gap(state, i, lead)
                state.v[i] = min(state.v[i], max(0.0, (gap - MIN_STANDSTILL_GAP) / TIME_HEADWAY))
    return state


def _leaders(state: _State):
    """(vehicle, leader or -1) pairs ordered front to back within each lane."""
    order = np.lexsort((-state.x, state.lane))
    pairs = []
    prev_lane, prev = None, -1
    for i in order:
        lead = prev if state.lane[i] == prev_lane else -1
        pairs.append((int(i), int(lead)))
        prev_lane, prev = state.lane[i], i
    return pairs


def _gap(state: _State, i: int, lead: int) -> float:
    return state.x[lead] - state.x[i] - 0.5 * (state.length[lead] + state.length[i])


def _follow_accel(state: _State, i: int, lead: int) -> float:
    a = SPEED_GAIN * (state.v_des[i] - state.v[i])
    if lead >= 0:
        gap = _gap(state, i, lead)
        desired = MIN_STANDSTILL_GAP + TIME_HEADWAY * state.v[i]
        a = min(a, GAP_GAIN * (gap - desired) + CLOSING_GAIN * (state.v[lead] - state.v[i]))
    return float(np.clip(a, -MAX_BRAKE, MAX_ACCEL))


def _record(state: _State, i: int, time: float) -> VehicleRecord:
    heading = math.atan2(math.sin(state.heading[i]), math.cos(state.heading[i]))
    return VehicleRecord(
        time,
        float(state.x[i]),
        float(state.y[i]),
        float(state.length[i]),
        float(state.width[i]),
        heading,
        VehicleClass(int(state.cls[i])),
    )


def _visible(state: _State, i: int, extent: SegmentExtent) -> bool:
    reach = 0.5 * math.hypot(state.length[i], state.width[i])
    return state.x[i] + reach > extent.x_min and state.x[i] - reach < extent.x_max


class _Simulator:
    def __init__(self, config: ScenarioConfig, crash: CrashSpec | None = None):
        config.validate()
        self.config = config
        self.crash = crash
        self.state = _initial_state(config)
        self.extent = config.extent
        self.involved: tuple[int, int] | None = None
        self.contact_time: float | None = None
        self._impact_rng = np.random.default_rng([config.seed, 7919])

    # crash setup -----------------------------------------------------------
    def _arm_sudden_stop(self, time: float) -> None:
        crash = self.crash
        horizon = crash.crash_time - time
        best = None
        for i, lead in _leaders(self.state):
            if lead < 0 or self.state.mode[i] != _Mode.NORMAL:
                continue
            gap = _gap(self.state, i, lead)
            v_l, v_f = self.state.v[lead], self.state.v[i]
            decel = _required_decel(gap, v_l, v_f, horizon)
            if decel is None or decel > MAX_EXTREME_DECEL:
                continue
            decel = max(decel, MIN_EXTREME_DECEL)
            t_hit = sudden_stop_contact_time(gap, v_l, v_f, decel)
            contact_x = self.state.x[i] + v_f * t_hit + 0.5 * self.state.length[i]
            if not (self.extent.x_min + CRASH_EDGE_MARGIN < contact_x < self.extent.x_max - CRASH_EDGE_MARGIN):
                continue
            score = abs(contact_x - 0.5 * (self.extent.x_min + self.extent.x_max))
            if best is None or score < best[0]:
                best = (score, i, lead, decel)
        if best is None:
            raise InjectionError(f"no vehicle pair can produce a sudden-stop crash at t={crash.crash_time}s")
        _, follower, leader, decel = best
        self.state.mode[leader] = _Mode.BRAKING
        self.state.decel[leader] = decel
        self.state.mode[follower] = _Mode.DISTRACTED
        self.involved = (follower, leader)

    def _arm_lane_change(self, time: float) -> None:
        crash, s = self.crash, self.state
        horizon = crash.crash_time - time
        best = None
        for i in range(len(s)):
            if s.mode[i] != _Mode.NORMAL:
                continue
            for j in range(len(s)):
                if abs(int(s.lane[j]) - int(s.lane[i])) != 1 or s.mode[j] != _Mode.NORMAL:
                    continue
                # constant-speed prediction of both vehicles at crash time
                xi = s.x[i] + s.v[i] * horizon
                xj = s.x[j] + s.v[j] * horizon
                if abs(xi - xj) > 0.35 * (s.length[i] + s.length[j]):
                    continue
                if not (self.extent.x_min + CRASH_EDGE_MARGIN < xi < self.extent.x_max - CRASH_EDGE_MARGIN):
                    continue
                score = abs(xi - xj)
                if best is None or score < best[0]:
                    best = (score, i, j)
        if best is None:
            raise InjectionError(f"no vehicle pair can produce a lane-change collision at t={crash.crash_time}s")
        _, mover, victim = best
        shift = s.y[victim] - s.y[mover]
        # reach the boundary of the victim's footprint at crash time
        reach = abs(shift) - 0.5 * (s.width[mover] + s.width[victim])
        s.lateral[mover] = math.copysign(reach / horizon, shift)
        s.mode[mover] = _Mode.LANE_CHANGE
        s.mode[victim] = _Mode.DISTRACTED
        self.involved = (mover, victim)

    def _check_contact(self, time: float) -> None:
        i, j = self.involved
        a, b = _record(self.state, i, time), _record(self.state, j, time)
        if not rectangles_overlap(a, b):
            return
        s = self.state
        self.contact_time = time
        striker, struck = i, j
        rear, front = (i, j) if s.x[i] <= s.x[j] else (j, i)
        yaw = self._impact_rng.uniform(*IMPACT_YAW) * self._impact_rng.choice([-1.0, 1.0])
        s.heading[front] += yaw
        s.heading[rear] -= 0.7 * yaw
        self._interpenetrate(striker, struck, time)
        common = 0.5 * (s.v[i] + s.v[j])
        for k in (i, j):
            s.v[k] = common
            s.mode[k] = _Mode.CRASHED
            s.lateral[k] = 0.0

    def _interpenetrate(self, striker: int, struck: int, time: float) -> None:
        """Push the striker towards the struck vehicle until the footprints
        overlap by ``IMPACT_PENETRATION``; the pair then moves rigidly."""
        s = self.state
        direction = np.array([s.x[struck] - s.x[striker], s.y[struck] - s.y[striker]])
        direction /= max(np.linalg.norm(direction), 1e-9)
        step = 0.05
        for _ in range(400):
            if rectangles_overlap(_record(s, striker, time), _record(s, struck, time)):
                break
            s.x[striker] += step * direction[0]
            s.y[striker] += step * direction[1]
        s.x[striker] += IMPACT_PENETRATION * direction[0]
        s.y[striker] += IMPACT_PENETRATION * direction[1]

    # integration -----------------------------------------------------------
    def _step(self, dt: float) -> None:
        s = self.state
        new_v = s.v.copy()
        for i, lead in _leaders(s):
            mode = s.mode[i]
            if mode == _Mode.NORMAL:
                v = max(0.0, s.v[i] + _follow_accel(s, i, lead) * dt)
                if lead >= 0:
                    gap = _gap(s, i, lead)
                    v = min(v, max(0.0, new_v[lead] + (gap - HARD_MIN_GAP) / dt))
            elif mode in (_Mode.DISTRACTED, _Mode.LANE_CHANGE):
                v = s.v[i]
            elif mode == _Mode.BRAKING:
                v = max(0.0, s.v[i] - s.decel[i] * dt)
            else:
                v = max(0.0, s.v[i] - POST_IMPACT_DECEL * dt)
            new_v[i] = v
        s.v = new_v
        # heading is visual only; longitudinal motion stays along the lane
        s.x = s.x + s.v * dt
        s.y = s.y + s.lateral * dt
        changing = s.mode == _Mode.LANE_CHANGE
        if changing.any():
            s.heading[changing] = np.arctan2(s.lateral[changing], np.maximum(s.v[changing], 1e-6))

    def run(self) -> tuple[list[tuple[float, list[VehicleRecord]]], list[_State]]:
        config = self.config
        per_frame = config.steps_per_frame
        total_steps = (config.frame_count - 1) * per_frame
        arm_step = None
        if self.crash is not None:
            arm_step = int(round((self.crash.crash_time - self.crash.lead_margin) / SIM_DT))
        frames, states = [], []
        for step in range(total_steps + 1):
            time = step * SIM_DT
            if step == arm_step:
                if self.crash.kind == CrashKind.SUDDEN_STOP:
                    self._arm_sudden_stop(time)
                else:
                    self._arm_lane_change(time)
            if self.involved is not None and self.contact_time is None:
                self._check_contact(time)
            if step % per_frame == 0:
                t = round(step * SIM_DT, 9)
                records = [_record(self.state, i, t) for i in range(len(self.state)) if _visible(self.state, i, self.extent)]
                frames.append((t, records))
                states.append(self.state.copy())
            if step < total_steps:
                self._step(SIM_DT)
        return frames, states


def simulate(config: ScenarioConfig) -> Episode:
    """Non-crash episode; deterministic in ``config.seed``."""
    frames, _ = _Simulator(config).run()
    return Episode(frames, None, config, None)


def simulate_states(config: ScenarioConfig, crash: CrashSpec | None = None) -> list[_State]:
    """Full simulated state (including vehicles outside the segment) per frame."""
    return _Simulator(config, crash).run()[1]


def inject_crash(episode: Episode, spec: CrashSpec) -> Episode:
    """Re-run the episode's scenario with a crash armed ``lead_margin`` before
    ``crash_time``; the label is the first frame with overlapping footprints."""
    config = episode.config
    if not 4.0 < spec.crash_time < config.duration - 4.0:
        raise InjectionError(
            f"crash_time {spec.crash_time}s must lie in (4, {config.duration - 4.0}) for an 8 s window"
        )
    if spec.lead_margin <= 0 or spec.lead_margin >= spec.crash_time:
        raise InjectionError(f"lead_margin {spec.lead_margin}s out of range")
    sim = _Simulator(config, spec)
    frames, _ = sim.run()
    label = next((t for t, records in frames if frame_has_overlap(records)), None)
    if label is None:
        raise InjectionError("armed crash never produced overlapping footprints")
    return Episode(frames, label, config, spec)


def generate_crash_episode(config: ScenarioConfig, spec: CrashSpec, attempts: int = 20) -> Episode:
    """Try successive seeds (seed, seed+1000, ...) until the crash can be injected."""
    for attempt in range(attempts):
        candidate = replace(config, seed=config.seed + 1000 * attempt)
        try:
            return inject_crash(simulate(candidate), spec)
        except InjectionError:
            continue
    raise InjectionError(f"no eligible pair in {attempts} seeds starting at {config.seed}")


# --------------------------------------------------------------------------- datasets


@dataclass
class Window:
    context: MapSequence
    target: SegmentMap
    background: BackgroundMap


def render_episode(episode: Episode, dims: MapDims = MapDims()) -> list[SegmentMap]:
    extent = episode.config.extent
    return [rasterize_frame(records, extent, dims, time=t) for t, records in episode.frames]


def episode_background(episode: Episode, dims: MapDims = MapDims()) -> BackgroundMap:
    return make_background(episode.config.lane_count, episode.config.extent, dims)


def to_dataset(
    episodes: list[Episode],
    f: int,
    dims: MapDims = MapDims(),
    include_crash: bool = False,
) -> list[Window]:
    """Stride-1 windows of ``f`` context frames plus the next frame as target.

    Windows whose target is at or after a crash label are dropped unless
    ``include_crash`` is set.
    """
    windows = []
    for episode in episodes:
        if len(episode) < f + 1:
            logger.warning("episode with %d frames is shorter than f+1=%d; skipped", len(episode), f + 1)
            continue
        maps = render_episode(episode, dims)
        background = episode_background(episode, dims)
        for n in range(f, len(maps)):
            if not include_crash and episode.label is not None and maps[n].time >= episode.label - 1e-9:
                break
            windows.append(Window(MapSequence(maps[n - f : n], episode.interval), maps[n], background))
    return windows


# --------------------------------------------------------------------------- episode files


def write_episode(path, episode: Episode) -> None:
    """Record text file with the episode metadata as ``# key=value`` comments."""
    c = episode.config
    header = {
        "label": "none" if episode.label is None else repr(float(episode.label)),
        "interval": repr(float(c.interval)),
        "lane_count": c.lane_count,
        "segment_length": repr(float(c.segment_length)),
        "lane_width": repr(float(c.lane_width)),
        "duration": repr(float(c.duration)),
        "seed": c.seed,
        "crash": "none" if episode.crash is None else episode.crash.kind.value,
    }
    write_records(path, episode.frames, header)


def _read_header(path) -> dict[str, str]:
    header = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                header[key.strip()] = value.strip()
    return header


def read_episode(path) -> Episode:
    header = _read_header(path)
    try:
        config = ScenarioConfig(
            lane_count=int(header.get("lane_count", 3)),
            segment_length=float(header.get("segment_length", 100.0)),
            interval=float(header.get("interval", 0.1)),
            duration=float(header.get("duration", 12.0)),
            lane_width=float(header.get("lane_width", 3.6)),
            seed=int(header.get("seed", 0)),
        )
        label = header.get("label", "none")
        label = None if label == "none" else float(label)
        crash = header.get("crash", "none")
        crash = None if crash == "none" else CrashSpec(CrashKind(crash))
    except ValueError as err:
        raise ParseError(f"{path}: bad episode header: {err}") from None
    return Episode(read_records(path), label, config, crash)
