"""Command-line entry point: ``crashdiff <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from ..crash_detector import (
    calibrate_threshold,
    detect,
    detection_report,
)
from ..mapfusion import sample_windows
from ..rsm_codec import SegmentMap, export_image, write_map
from ..scenario_gen import episode_background, read_episode, render_episode, to_dataset
from . import pipeline, studies
from .config import INTERVALS, RunConfig

logger = logging.getLogger("crashdiff")


class CommandError(RuntimeError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args, base: RunConfig | None = None) -> RunConfig:
    config = base if base is not None else (RunConfig.load(args.config) if args.config else RunConfig())
    return pipeline.with_overrides(
        config,
        seed=args.seed,
        interval=args.interval,
        k=args.k,
        lam=args.lam,
        quantile=args.quantile,
        gamma=getattr(args, "gamma", None),
        ablate_se=args.ablate_se,
    )


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    config = _run_config(args)
    crash = args.crash or config.scenario.crash
    episodes = pipeline.generate_episodes(config, crash=crash, count=args.count)
    paths = pipeline.write_episodes(_out_dir(args), episodes)
    print(f"wrote {len(paths)} episodes to {args.out}")


def _training_episodes(args, config):
    if args.data:
        return pipeline.read_episodes(args.data)
    return pipeline.generate_episodes(config, crash="none")


def cmd_train_base(args) -> None:
    config = _run_config(args)
    torch.manual_seed(config.seed)
    episodes = _training_episodes(args, config)
    out = _out_dir(args)
    model, log = pipeline.fit_base(config, episodes)
    pipeline.save_denoiser(out / "base.mapf", model, config, config.train.steps)
    (out / "train_base.log").write_text(log.to_text())
    if config.extractor.kind == "patch":
        extractor, xlog = pipeline.fit_extractor(config, episodes)
        pipeline.save_extractor(out / "extractor.mapf", extractor, config, config.extractor.steps)
        (out / "train_extractor.log").write_text(xlog.to_text())
    print(f"final loss {log.rows[-1][1]:.6f}; checkpoint {out / 'base.mapf'}")


def cmd_train_control(args) -> None:
    if not args.base:
        raise CommandError("train-control needs --base CHECKPOINT")
    model, config, step = pipeline.load_denoiser(args.base)
    config = _run_config(args, config)
    episodes = _training_episodes(args, config)
    out = _out_dir(args)
    model, log = pipeline.fit_control(config, model, episodes)
    pipeline.save_denoiser(out / "control.mapf", model, config, step + config.train.control_steps)
    (out / "train_control.log").write_text(log.to_text())
    print(f"final loss {log.rows[-1][1]:.6f}; checkpoint {out / 'control.mapf'}")


def _load_model(args):
    if not args.ckpt:
        raise CommandError(f"{args.command} needs --ckpt CHECKPOINT")
    model, config, _ = pipeline.load_denoiser(args.ckpt)
    return model, _run_config(args, config)


def cmd_sample(args) -> None:
    model, config = _load_model(args)
    if not args.episode:
        raise CommandError("sample needs --episode FILE")
    episode = read_episode(args.episode)
    dims = config.dims()
    maps = render_episode(episode, dims)
    f = config.model.f
    n = args.n if args.n is not None else f
    if not f <= n < len(maps):
        raise CommandError(f"frame {n} has no full context (need {f} <= n < {len(maps)})")
    context = np.stack([m.chw() for m in maps[n - f : n]])[None]
    bg = episode_background(episode, dims).chw()[None] if model.control is not None else None
    k = config.detect.k
    samples = sample_windows(model, config.train_config().schedule(), context, bg, k, [config.seed])[0]
    out = _out_dir(args)
    for j, s in enumerate(samples):
        m = SegmentMap.from_chw(s, maps[n].time)
        write_map(out / f"sample_{j}.rsm", m)
        if args.png:
            export_image(out / f"sample_{j}.png", m)
    write_map(out / "truth.rsm", maps[n])
    print(f"wrote {k} samples for frame {n} to {args.out}")


def _calibrated_gamma(args, model, extractor, config) -> float:
    if args.calibrate:
        values = []
        for i, ep in enumerate(pipeline.read_episodes(args.calibrate)):
            if ep.label is not None:
                continue
            maps = render_episode(ep, config.dims())
            bg = episode_background(ep, config.dims()) if model.control is not None else None
            series = detect(maps, model, config.train_config().schedule(), extractor, config.detector_config(), seed=pipeline.derive_seed(config.seed, 7, i), background=bg)
            values.extend(series.index.tolist())
        return calibrate_threshold(values, config.detect.quantile)
    return config.detect.gamma


def cmd_detect(args) -> None:
    model, config = _load_model(args)
    if not args.episode:
        raise CommandError("detect needs --episode FILE")
    extractor = pipeline.load_extractor(args.extractor or "unet", model)
    episode = read_episode(args.episode)
    gamma = _calibrated_gamma(args, model, extractor, config)
    maps = render_episode(episode, config.dims())
    bg = episode_background(episode, config.dims()) if model.control is not None else None
    dc = config.detector_config()
    frames = pipeline.evaluation_frames(episode, dc.f, config.detect.window)
    series = detect(maps, model, config.train_config().schedule(), extractor, dc, seed=config.seed, background=bg, frames=frames)
    series = series.with_gamma(gamma)
    out = _out_dir(args)
    series.write(out / "index.txt")
    report = detection_report(series, episode.label_frame)
    (out / "report.txt").write_text(f"gamma: {float(gamma)!r}\n" + report.to_text())
    print(report.to_text().strip().replace("\n", "; "))


def cmd_eval(args) -> None:
    model, config = _load_model(args)
    if not args.data:
        raise CommandError("eval needs --data DIR with episode files")
    episodes = pipeline.read_episodes(args.data)
    q = studies.generation_quality(model, config, episodes, windows=args.windows)
    diff = q.count_diffs
    lines = [
        f"windows: {q.windows}",
        f"samples: {q.samples}",
        f"mse: {q.mse:.6f}",
        f"mae: {q.mae:.6f}",
        f"count_diff_zero_fraction: {q.count_exact:.4f}",
        "count_diff_histogram:",
    ]
    for value in range(int(diff.min()), int(diff.max()) + 1):
        lines.append(f"  {value:+d} {int(np.sum(diff == value))}")
    out = _out_dir(args)
    (out / "generation.txt").write_text("\n".join(lines) + "\n")
    print(f"mse {q.mse:.6f} mae {q.mae:.6f} count-exact {q.count_exact:.3f}")


def cmd_gradcheck(args) -> None:
    from .gradcheck import run_suite

    seeds = args.seeds
    results = run_suite(seeds=seeds)
    out = _out_dir(args)
    lines = [f"{name} {'pass' if err < 1e-4 else 'FAIL'} {err:.3e}" for name, err in results]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    failed = [name for name, err in results if not err < 1e-4]
    if failed:
        raise CommandError(f"gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "gen": cmd_gen,
    "train-base": cmd_train_base,
    "train-control": cmd_train_control,
    "sample": cmd_sample,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _interval(text: str) -> float:
    value = float(text)
    if not any(abs(value - v) < 1e-9 for v in INTERVALS):
        raise argparse.ArgumentTypeError(f"interval must be one of {', '.join(map(str, INTERVALS))}")
    return value


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=_seed, help="global seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--interval", type=_interval, help="sampling interval in seconds")
    common.add_argument("--k", type=int, help="samples per window")
    common.add_argument("--lambda", dest="lam", type=int, help="top-deviation count")
    common.add_argument("--quantile", type=float, help="threshold calibration quantile")
    common.add_argument("--ablate-se", choices=("on", "off"), help="'on' disables the sequence embedding")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crashdiff", description="Diffusion-based crash detection on road segment maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen", parents=[common], help="generate episode files")
    p.add_argument("--crash", choices=("none", "sudden_stop", "lane_change_collision"))
    p.add_argument("--count", type=int)
    for name in ("train-base", "train-control"):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} phase")
        p.add_argument("--data", help="directory of episode files (default: generate from config)")
        if name == "train-control":
            p.add_argument("--base", help="base checkpoint")
    p = sub.add_parser("sample", parents=[common], help="sample next-frame maps for one window")
    p.add_argument("--ckpt")
    p.add_argument("--episode")
    p.add_argument("--n", type=int, help="target frame index (default f)")
    p.add_argument("--png", action="store_true", help="also write PNG previews")
    p = sub.add_parser("detect", parents=[common], help="Crash Index series for one episode")
    p.add_argument("--ckpt")
    p.add_argument("--extractor", help="extractor checkpoint, or 'unet' for mid-block features")
    p.add_argument("--episode")
    p.add_argument("--gamma", type=float, help="threshold override")
    p.add_argument("--calibrate", help="directory of non-crash episodes for quantile calibration")
    p = sub.add_parser("eval", parents=[common], help="generation metrics on held-out episodes")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--windows", type=int, default=20)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # fixed reduction order keeps artifacts byte-identical
    try:
        COMMANDS[args.command](args)
    except (CommandError, ValueError, OSError, RuntimeError) as err:
        msg = str(err).splitlines()[0] if str(err) else type(err).__name__
        print(f"crashdiff {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0

