from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from crashdiff.rsm_codec import ConfigurationError, MapDims, VehicleRecord
from crashdiff.scenario_gen import (
    CrashKind,
    CrashSpec,
    Episode,
    InjectionError,
    ScenarioConfig,
    generate_crash_episode,
    inject_crash,
    read_episode,
    rectangles_overlap,
    simulate,
    simulate_states,
    sudden_stop_contact_time,
    to_dataset,
    write_episode,
)

from .oracles import frame_overlaps, records_overlap

DIMS = MapDims(1, 32, 32)


def test_single_vehicle_constant_speed():
    cfg = ScenarioConfig(vehicle_count=1, upstream=False, initial_vehicles=((1, 10.0, 10.0),), duration=2.0)
    ep = simulate(cfg)
    xs = np.array([records[0].x for _, records in ep.frames])
    assert np.allclose(np.diff(xs), 1.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(25))
def test_non_crash_episodes_never_overlap(seed):
    ep = simulate(ScenarioConfig(seed=seed, vehicle_count=1 + seed % 6))
    assert ep.label is None
    assert not any(frame_overlaps(records) for _, records in ep.frames)


def test_same_seed_same_episode():
    a = simulate(ScenarioConfig(seed=11))
    b = simulate(ScenarioConfig(seed=11))
    assert a.frames == b.frames
    assert simulate(ScenarioConfig(seed=12)).frames != a.frames


def test_uniform_frame_spacing():
    for interval in (0.1, 0.2, 0.3, 0.4):
        ep = simulate(ScenarioConfig(seed=1, interval=interval))
        assert np.allclose(np.diff(ep.times), interval)
        assert len(ep) == int(round(12 / interval)) + 1


def test_infeasible_density_is_rejected():
    with pytest.raises(ConfigurationError):
        simulate(ScenarioConfig(vehicle_count=200, segment_length=50.0, lane_count=1))
    with pytest.raises(ConfigurationError):
        simulate(ScenarioConfig(interval=0.013))


def test_conservation_until_exit():
    """With no upstream traffic the visible count can only drop, one exit at a time,
    and a vehicle leaves only at the downstream edge."""
    cfg = ScenarioConfig(seed=5, upstream=False)
    ep = simulate(cfg)
    states = simulate_states(cfg)
    counts = [len(r) for _, r in ep.frames]
    assert counts[0] == cfg.vehicle_count
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    for state, (_, records) in zip(states, ep.frames):
        hidden = len(state.x) - len(records)
        assert hidden == int(np.sum(state.x - 0.5 * state.length > cfg.segment_length))


def test_upstream_vehicles_enter_from_upstream_edge():
    cfg = ScenarioConfig(seed=3)
    states = simulate_states(cfg)
    for prev, cur in zip(states, states[1:]):
        assert np.all(cur.x >= prev.x - 1e-9)  # nobody moves backwards, so nobody re-enters


def test_downsampling_consistency_constant_velocity_is_exact():
    vehicles = ((0, 5.0, 12.0), (1, 30.0, 15.0), (2, 60.0, 10.0))
    fine = simulate(ScenarioConfig(initial_vehicles=vehicles, vehicle_count=3, upstream=False, interval=0.1, duration=4.0))
    coarse = simulate(ScenarioConfig(initial_vehicles=vehicles, vehicle_count=3, upstream=False, interval=0.4, duration=4.0))
    assert [f for f in fine.frames[::4]] == coarse.frames


@pytest.mark.parametrize("seed", range(5))
def test_downsampling_consistency_car_following(seed):
    fine = simulate(ScenarioConfig(seed=seed, interval=0.1))
    coarse = simulate(ScenarioConfig(seed=seed, interval=0.4))
    for (tf, rf), (tc, rc) in zip(fine.frames[::4], coarse.frames):
        assert math.isclose(tf, tc, abs_tol=1e-9) and len(rf) == len(rc)
        for a, b in zip(rf, rc):
            assert abs(a.x - b.x) <= 0.1 and abs(a.y - b.y) <= 0.1


# --------------------------------------------------------------------------- crash injection


def _integrate_contact(gap, v_lead, v_follow, decel, dt=1e-5):
    """Explicit time stepping of the leader braking in front of a constant-speed follower."""
    t, xl, xf, vl = 0.0, gap, 0.0, v_lead
    while t < 60:
        if xf >= xl:
            return t
        vl = max(0.0, vl - decel * dt)
        xl += vl * dt
        xf += v_follow * dt
        t += dt
    return math.inf


@pytest.mark.parametrize(
    "gap,v_lead,v_follow,decel",
    [(5.0, 10.0, 20.0, 8.0), (5.0, 15.0, 15.0, 20.0), (12.0, 20.0, 18.0, 40.0), (3.0, 2.0, 10.0, 9.0), (30.0, 10.0, 5.0, 1.0)],
)
def test_contact_time_matches_kinematic_integration(gap, v_lead, v_follow, decel):
    closed = sudden_stop_contact_time(gap, v_lead, v_follow, decel)
    numeric = _integrate_contact(gap, v_lead, v_follow, decel)
    if math.isinf(numeric):
        assert math.isinf(closed)
    else:
        assert abs(closed - numeric) < 1e-3


def test_contact_time_gap_five_closing_ten():
    # leader barely braking: contact after gap / closing speed
    assert math.isclose(sudden_stop_contact_time(5.0, 10.0, 20.0, 1e-9), 0.5, rel_tol=1e-6)
    # leader stopping almost instantly: follower covers the gap alone
    assert math.isclose(sudden_stop_contact_time(5.0, 10.0, 20.0, 1e9), 0.25, rel_tol=1e-6)
    # slower follower never reaches a leader that keeps moving away
    assert math.isinf(sudden_stop_contact_time(5.0, 20.0, 10.0, 0.0))


@pytest.mark.parametrize("kind", list(CrashKind))
@pytest.mark.parametrize("seed", range(6))
def test_injected_episode_label_is_first_overlap_frame(kind, seed):
    ep = generate_crash_episode(ScenarioConfig(seed=seed), CrashSpec(kind))
    flags = [frame_overlaps(recs) for _, recs in ep.frames]
    assert any(flags)
    assert ep.label == ep.frames[flags.index(True)][0]
    assert abs(ep.label - 6.0) <= 0.3


def test_crash_time_outside_window_is_rejected():
    ep = simulate(ScenarioConfig(seed=0))
    with pytest.raises(InjectionError):
        inject_crash(ep, CrashSpec(crash_time=9.0))
    with pytest.raises(InjectionError):
        inject_crash(ep, CrashSpec(crash_time=3.5))


def test_no_eligible_pair():
    lone = ScenarioConfig(vehicle_count=1, upstream=False, initial_vehicles=((0, 20.0, 15.0),))
    with pytest.raises(InjectionError):
        inject_crash(simulate(lone), CrashSpec())


def test_overlap_test_agrees_with_polygon_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        a = VehicleRecord(0, rng.uniform(0, 10), rng.uniform(0, 4), rng.uniform(3, 8), rng.uniform(1.5, 2.5), rng.uniform(-1, 1))
        b = VehicleRecord(0, rng.uniform(0, 10), rng.uniform(0, 4), rng.uniform(3, 8), rng.uniform(1.5, 2.5), rng.uniform(-1, 1))
        assert rectangles_overlap(a, b) == records_overlap(a, b)


# --------------------------------------------------------------------------- datasets


def _episode_with_frames(n, interval=0.1, label=None):
    cfg = ScenarioConfig(seed=0, interval=interval, duration=(n - 1) * interval, upstream=False)
    ep = simulate(cfg)
    assert len(ep) == n
    return Episode(ep.frames, label, cfg)


def test_window_counts():
    assert len(to_dataset([_episode_with_frames(11)], 10, DIMS)) == 1
    assert len(to_dataset([_episode_with_frames(12)], 10, DIMS)) == 2
    w = to_dataset([_episode_with_frames(12)], 10, DIMS)[1]
    assert len(w.context) == 10 and math.isclose(w.target.time, 1.1)


def test_short_episode_skipped_with_warning(caplog):
    assert to_dataset([_episode_with_frames(5)], 10, DIMS) == []
    assert "shorter" in caplog.text


def test_crash_windows_excluded():
    ep = generate_crash_episode(ScenarioConfig(seed=2), CrashSpec())
    windows = to_dataset([ep], 10, DIMS)
    assert windows and all(w.target.time < ep.label for w in windows)
    assert len(windows) == ep.label_frame - 10
    assert len(to_dataset([ep], 10, DIMS, include_crash=True)) == len(ep) - 10


def test_episode_file_round_trip(tmp_path):
    ep = generate_crash_episode(ScenarioConfig(seed=4, interval=0.2), CrashSpec(CrashKind.LANE_CHANGE_COLLISION))
    write_episode(tmp_path / "e.txt", ep)
    back = read_episode(tmp_path / "e.txt")
    assert back.frames == ep.frames and back.label == ep.label
    assert back.interval == 0.2 and back.crash.kind == CrashKind.LANE_CHANGE_COLLISION
    assert (tmp_path / "e.txt").read_bytes() == (write_episode(tmp_path / "f.txt", ep) or (tmp_path / "f.txt").read_bytes())


def test_config_replace_keeps_validation():
    with pytest.raises(ConfigurationError):
        replace(ScenarioConfig(), speed_range=(5, 1)).validate()
