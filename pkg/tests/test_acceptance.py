"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

The training-based criteria (6-9) cache their checkpoints under
``.cache/acceptance`` keyed by the run configuration and a hash of the
modules used in training, so an unchanged tree re-runs them from the cached models.
Delete the directory to force a full retrain.

Run alone with ``pytest tests/test_acceptance.py -v``; the report lines are
printed even without ``-s``.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

import crashdiff
from crashdiff.mapfusion import (
    DenoiserModel,
    TrainConfig,
    build_schedule,
    forward_sample,
    forward_step,
    reverse_step,
    train_control,
)
from crashdiff.rsm_codec import (
    MapDims,
    SegmentExtent,
    VehicleRecord,
    count_vehicles,
    rasterize_frame,
    vehicle_centroids,
    world_to_pixel,
)
from crashdiff.runtime import pipeline, studies
from crashdiff.runtime.cli import main as cli_main
from crashdiff.runtime.config import (
    DetectSection,
    ExtractorSection,
    MapSection,
    ModelSection,
    RunConfig,
    ScenarioSection,
    TrainSection,
)
from crashdiff.runtime.gradcheck import TOLERANCE, run_suite
from crashdiff.scenario_gen import to_dataset

from .oracles import bfs_components, random_layout, rectangle_footprint

CACHE = Path(__file__).resolve().parents[1] / ".cache" / "acceptance"

# criterion 6: full desk scale, 64 x 64 maps over the default 100 m segment
GENERATION = RunConfig(
    seed=0,
    train=TrainSection(steps=3000, lr=1e-3, T=200, log_every=250),
)

# criteria 7 and 8: smaller maps so six training runs fit the budget
TREND = RunConfig(
    seed=0,
    scenario=ScenarioSection(segment_length=50.0, vehicle_count=4, episodes=40),
    map=MapSection(32, 32),
    model=ModelSection(base_width=16),
    train=TrainSection(steps=1500, lr=1e-3, T=100, log_every=250),
)

# criterion 9: detection over a +-4 s window around the crash
DETECTION = RunConfig(
    seed=0,
    scenario=ScenarioSection(segment_length=50.0, vehicle_count=4, interval=0.2, episodes=60),
    map=MapSection(32, 32),
    model=ModelSection(base_width=16),
    train=TrainSection(steps=10000, lr=1e-3, T=50, log_every=500),
    extractor=ExtractorSection(kind="patch", patch=8, dim=64, blocks=2, heads=4, features=64, steps=1500),
    detect=DetectSection(k=5, window=4.0),
)


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})")

    return emit


# modules that never touch training; editing them keeps cached checkpoints valid
_NOT_TRAINING = {"runtime/cli.py", "runtime/gradcheck.py", "runtime/studies.py"}


def _source_digest() -> str:
    h = hashlib.sha256()
    root = Path(crashdiff.__file__).parent
    for path in sorted(root.rglob("*.py")):
        if path.relative_to(root).as_posix() in _NOT_TRAINING:
            continue
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _cache_path(config: RunConfig, name: str) -> Path:
    key = hashlib.sha256((config.to_text() + _source_digest()).encode()).hexdigest()[:16]
    return CACHE / f"{name}-{key}.mapf"


def cached_base(config: RunConfig) -> DenoiserModel:
    path = _cache_path(config, "base")
    if path.exists():
        return pipeline.load_denoiser(path)[0]
    torch.manual_seed(config.seed)
    start = time.time()
    model, _ = pipeline.fit_base(config, pipeline.generate_episodes(config, crash="none"))
    path.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_denoiser(path, model, config, config.train.steps)
    path.with_suffix(".seconds").write_text(f"{time.time() - start:.1f}\n")
    return pipeline.load_denoiser(path)[0]


def training_seconds(config: RunConfig) -> float:
    """Wall time of the run that produced the cached base checkpoint."""
    return float(_cache_path(config, "base").with_suffix(".seconds").read_text())


def cached_extractor(config: RunConfig):
    path = _cache_path(config, "extractor")
    if path.exists():
        return pipeline.load_extractor(path)
    extractor, _ = pipeline.fit_extractor(config, pipeline.generate_episodes(config, crash="none"))
    path.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_extractor(path, extractor, config, config.extractor.steps)
    return pipeline.load_extractor(path)


def validation_mse(config: RunConfig, windows: int = 30, k: int = 2) -> float:
    model = cached_base(config)
    return studies.generation_quality(model, config, studies.validation_episodes(config), windows=windows, k=k).mse


# --------------------------------------------------------------------------- 1


def test_criterion_01_marginal_consistency(report):
    start = time.time()
    T, n = 200, 10_000
    sched = build_schedule(T)
    gen = torch.Generator().manual_seed(0)
    r0 = torch.linspace(-1.0, 1.0, 16, dtype=torch.float64).reshape(4, 4)
    worst_z = worst_var = 0.0
    x = r0.expand(n, 4, 4).clone()
    for step in range(1, T + 1):
        x = forward_step(x, step, torch.randn(x.shape, generator=gen, dtype=torch.float64), sched)
        if step in (1, T // 2, T):
            expected_var = 1.0 - sched.alpha_bar[step]
            z = (x.mean(0) - math.sqrt(sched.alpha_bar[step]) * r0).abs() / math.sqrt(expected_var / n)
            worst_z = max(worst_z, float(z.max()))
            worst_var = max(worst_var, float((x.var(0) / expected_var - 1).abs().max()))
    elapsed = time.time() - start
    ok = worst_z < 4 and worst_var < 0.05 and elapsed < 60
    report(1, "marginal consistency", ok, f"max |z| {worst_z:.2f}, max var error {worst_var:.3%}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2


def test_criterion_02_exact_inversion(report):
    sched = build_schedule(200)
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        r0 = torch.rand((1, 1, 64, 64), generator=gen) * 2 - 1
        eps = torch.randn(r0.shape, generator=gen)
        back = reverse_step(forward_sample(r0, 1, eps, sched), 1, eps, sched, None)
        worst = max(worst, float((back - r0).abs().max()))
    ok = worst <= 1e-5
    report(2, "exact inversion at t=1", ok, f"max abs error {worst:.2e} over 100 maps")
    assert ok


# --------------------------------------------------------------------------- 3


def test_criterion_03_gradient_suite(report):
    start = time.time()
    results = run_suite(seeds=20)
    elapsed = time.time() - start
    worst_name, worst = max(results, key=lambda r: r[1])
    names = {name for name, _ in results}
    ok = worst < TOLERANCE and {"loss_base", "loss_control"} <= names and elapsed < 300
    report(3, "gradient suite", ok, f"{len(results)} checks x 20 seeds, worst {worst_name} {worst:.2e}, {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_04_control_identity_and_freeze(report):
    config = replace(GENERATION, scenario=replace(GENERATION.scenario, episodes=2))
    windows = to_dataset(pipeline.generate_episodes(config, crash="none"), config.model.f, config.dims())[:8]
    model = DenoiserModel(config.denoiser_config(), seed=3)
    gen = torch.Generator().manual_seed(0)
    xt = torch.randn((2, 1, 64, 64), generator=gen)
    t = np.array([5, 150])
    ctx = torch.from_numpy(np.stack([w.context.stack() for w in windows[:2]]))
    bg = torch.from_numpy(np.stack([w.background.chw() for w in windows[:2]]))
    with torch.no_grad():
        tokens = model.embed(ctx)
        before = model(xt, t, tokens)
        model.attach_control()
        after = model(xt, t, tokens, bg)
    identical = torch.equal(before, after)
    base = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("control.")}
    train_control(windows, model, TrainConfig(steps=3, lr=1e-3, T=200, log_every=1))
    state = model.state_dict()
    frozen = all(torch.equal(state[k], v) for k, v in base.items())
    moved = any(p.any() for p in model.control.zero_mid.parameters())
    ok = identical and frozen and moved
    report(4, "control zero-init and freeze", ok, f"bit-identical {identical}, base frozen {frozen}, control trained {moved}")
    assert ok


# --------------------------------------------------------------------------- 5


def test_criterion_05_rasterizer_oracles(report):
    start = time.time()
    extent = SegmentExtent(0.0, 100.0, 0.0, 10.8)
    dims = MapDims(1, 64, 64)
    rng = np.random.default_rng(0)

    def make(x, y, length, width, heading):
        return VehicleRecord(0.0, x, y, length, width, heading)

    placements = failures = vehicles = 0
    while placements < 1000:
        placed = random_layout(rng, int(rng.integers(1, 7)), dims, extent, make)
        if not placed:
            continue
        placements += 1
        vehicles += len(placed)
        records = [r for r, _ in placed]
        layer = rasterize_frame(records, extent, dims).values[..., 0]
        oracle = np.zeros(layer.shape, dtype=bool)
        for r in records:
            oracle |= rectangle_footprint(r, extent, dims)
        comps = bfs_components(oracle)
        centroids = vehicle_centroids(layer)
        truth = [world_to_pixel(r.x, r.y, extent, dims) for r in records]
        ok = np.array_equal(layer > 0.5, oracle) and count_vehicles(layer) == len(records) == len(comps)
        oracle_centres = sorted((float(np.mean([p[0] for p in c])), float(np.mean([p[1] for p in c]))) for c in comps)
        ok = ok and np.allclose(sorted(centroids), oracle_centres)
        # every true centre has a decoded centroid within 1 px
        ok = ok and all(min(math.hypot(a - r, b - c) for r, c in centroids) <= 1.0 for a, b in truth)
        failures += not ok
    elapsed = time.time() - start
    ok = failures == 0 and elapsed < 60
    report(5, "rasterizer oracle equivalence", ok, f"{placements} placements, {vehicles} vehicles, {failures} failures, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_06_generation_quality(report):
    config = GENERATION
    model = cached_base(config)
    trained = training_seconds(config)
    quality = studies.generation_quality(model, config, studies.validation_episodes(config), windows=20, k=5)
    centroid = studies.centroid_fidelity(model, config, studies.single_vehicle_episodes(config, 10), k=5)
    ok = quality.count_exact >= 0.70 and centroid >= 0.80 and trained <= 1800
    report(
        6,
        "toy generation quality",
        ok,
        f"count-exact {quality.count_exact:.0%} of {quality.samples}, centroid within 2 px {centroid:.0%} of 50, "
        f"trained in {trained:.0f}s",
    )
    assert ok


# --------------------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_07_ablation_ordering(report):
    seeds = (0, 1, 2)
    with_se = [validation_mse(replace(TREND, seed=s)) for s in seeds]
    without = [validation_mse(replace(TREND, seed=s, model=replace(TREND.model, sequence_embedding=False))) for s in seeds]
    ok = np.mean(with_se) < np.mean(without)
    report(7, "ablation ordering", ok, f"mean validation MSE with SE {np.mean(with_se):.5f} vs without {np.mean(without):.5f}")
    assert ok


# --------------------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_08_interval_trend(report):
    seeds = (0, 1, 2)
    fine = [validation_mse(replace(TREND, seed=s)) for s in seeds]
    coarse = [validation_mse(replace(TREND, seed=s, scenario=replace(TREND.scenario, interval=0.4))) for s in seeds]
    ok = np.mean(coarse) >= np.mean(fine)
    report(8, "interval trend", ok, f"mean validation MSE at 0.4 s {np.mean(coarse):.5f} vs 0.1 s {np.mean(fine):.5f}")
    assert ok


# --------------------------------------------------------------------------- 9


@pytest.mark.slow
def test_criterion_09_end_to_end_detection(report):
    config = DETECTION
    model = cached_base(config)
    start = time.time()
    extractor = cached_extractor(config)
    crashes, normals = studies.detection_episodes(config, 10)
    result = studies.detection_study(model, extractor, config, crashes, normals)
    scoring = time.time() - start
    # the runtime budget covers the whole pipeline: denoiser training, extractor and scoring
    total = training_seconds(config) + scoring
    ok = result.hits >= 8 and result.paired_wins >= 8 and total <= 1800
    report(
        9,
        "end-to-end detection",
        ok,
        f"hits {result.hits}/10, paired wins {result.paired_wins}/10, gamma {result.gamma:.4g}, "
        f"training {training_seconds(config):.0f}s + extractor and scoring {scoring:.0f}s",
    )
    assert ok


# --------------------------------------------------------------------------- 10


TINY_RUN = """
[run]
seed = 5
[scenario]
segment_length = 40.0
vehicle_count = 3
duration = 10.0
episodes = 3
crash_time = 5.0
lead_margin = 1.5
[map]
height = 16
width = 16
[model]
f = 2
base_width = 8
heads = 2
token_dim = 8
embed_hidden = 4
[train]
steps = 3
control_steps = 2
T = 4
log_every = 1
[extractor]
patch = 8
dim = 8
blocks = 1
heads = 2
steps = 2
batch_size = 4
[detect]
k = 2
window = 1.0
"""


def _run_all_commands(root: Path, config: Path) -> dict[str, bytes]:
    def run(*argv):
        assert cli_main([*argv, "--config", str(config)]) == 0, argv

    run("gen", "--out", str(root / "normal"))
    run("gen", "--crash", "sudden_stop", "--count", "1", "--out", str(root / "crash"))
    run("train-base", "--data", str(root / "normal"), "--out", str(root / "base"))
    run("train-control", "--base", str(root / "base" / "base.mapf"), "--data", str(root / "normal"), "--out", str(root / "control"))
    episode = root / "normal" / "episode_0000.txt"
    run("sample", "--ckpt", str(root / "control" / "control.mapf"), "--episode", str(episode), "--n", "3", "--png", "--out", str(root / "sample"))
    run(
        "detect",
        "--ckpt",
        str(root / "base" / "base.mapf"),
        "--extractor",
        str(root / "base" / "extractor.mapf"),
        "--episode",
        str(root / "crash" / "episode_0000.txt"),
        "--calibrate",
        str(root / "normal"),
        "--quantile",
        "0.5",
        "--out",
        str(root / "detect"),
    )
    run("eval", "--ckpt", str(root / "base" / "base.mapf"), "--data", str(root / "normal"), "--windows", "4", "--out", str(root / "eval"))
    run("gradcheck", "--seeds", "1", "--out", str(root / "gradcheck"))
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            data = path.read_bytes()
            if path.suffix == ".log":
                # the last column of a training log is wall-clock seconds
                data = b"\n".join(b" ".join(line.split(b" ")[:-1]) for line in data.splitlines())
            out[path.relative_to(root).as_posix()] = data
    return out


def test_criterion_10_determinism(report, tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(TINY_RUN)
    first = _run_all_commands(tmp_path / "a", config)
    second = _run_all_commands(tmp_path / "b", config)
    differing = sorted(k for k in first if first[k] != second.get(k))
    commands = {k.split("/")[0] for k in first}
    ok = first.keys() == second.keys() and not differing and len(commands) == 8
    report(10, "determinism", ok, f"{len(first)} artifacts from {len(commands)} output dirs, {len(differing)} differ")
    assert ok
