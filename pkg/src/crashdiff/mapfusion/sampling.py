"""Ancestral sampling of next-frame maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .. import tensor_engine as te
from ..rsm_codec import BackgroundMap, MapSequence, SegmentMap
from .networks import DenoiserModel
from .schedule import NoiseSchedule, from_model_range, noise_from_velocity, reverse_step


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleSet:
    maps: list[SegmentMap]
    seed: int

    @property
    def k(self) -> int:
        return len(self.maps)

    def stack(self) -> np.ndarray:
        return np.stack([m.chw() for m in self.maps])


def chain_generator(seed: int, chain: int) -> torch.Generator:
    """Independent noise stream for one chain, derived from (seed, chain)."""
    state = np.random.SeedSequence([int(seed), int(chain)]).generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0] >> np.uint64(1)))


def predict_noise(model: DenoiserModel, sched: NoiseSchedule, rt, t, tokens=None, background=None) -> torch.Tensor:
    out = noise_from_velocity(model(rt, t, tokens, background), rt, t, sched)
    return te.check_finite(out, "predicted noise")


def _check_model(model: DenoiserModel) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise SamplingError(f"parameter {name} is not finite")


@torch.no_grad()
def sample_chains(
    model: DenoiserModel,
    sched: NoiseSchedule,
    context: torch.Tensor,
    background: torch.Tensor | None,
    seeds: list[tuple[int, int]],
) -> torch.Tensor:
    """Run one reverse chain per entry of ``seeds`` ((seed, chain) pairs).

    ``context`` is B x f x C x H x W with one row per chain (rows may repeat);
    returns B x C x H x W maps in [0, 1].
    """
    _check_model(model)
    model.eval()
    c = model.config
    shape = (c.channels, c.height, c.width)
    gens = [chain_generator(s, k) for s, k in seeds]
    x = torch.stack([torch.randn(shape, generator=g) for g in gens])
    tokens = model.embed(context)
    for t in range(sched.T, 0, -1):
        eps_hat = predict_noise(model, sched, x, t, tokens, background)
        if t > 1:
            z = torch.stack([torch.randn(shape, generator=g) for g in gens])
        else:
            z = None
        x = reverse_step(x, t, eps_hat, sched, z)
    return from_model_range(x.clamp(-1.0, 1.0))


def sample(
    model: DenoiserModel,
    sched: NoiseSchedule,
    context: MapSequence,
    background: BackgroundMap | None = None,
    k: int = 5,
    seed: int = 0,
    time: float = 0.0,
) -> SampleSet:
    """``k`` independent next-frame maps for one context window."""
    if k < 1:
        raise SamplingError("k must be >= 1")
    ctx = torch.from_numpy(context.stack())[None].expand(k, -1, -1, -1, -1)
    bg = None
    if model.control is not None:
        if background is None:
            raise SamplingError("model has a control branch; a background map is required")
        bg = torch.from_numpy(background.chw())[None].expand(k, -1, -1, -1)
    maps = sample_chains(model, sched, ctx, bg, [(seed, i) for i in range(k)])
    return SampleSet([SegmentMap.from_chw(m.numpy(), time) for m in maps], seed)


def sample_windows(
    model: DenoiserModel,
    sched: NoiseSchedule,
    contexts: np.ndarray,
    backgrounds: np.ndarray | None,
    k: int,
    seeds: list[int],
    chunk: int = 64,
) -> np.ndarray:
    """Sample sets for many windows at once: contexts W x f x C x H x W,
    one seed per window. Returns W x k x C x H x W.

    Chains run in fixed-size chunks; identical inputs give identical output.
    """
    w = len(contexts)
    rows = [(i, j) for i in range(w) for j in range(k)]
    out = []
    for start in range(0, len(rows), chunk):
        part = rows[start : start + chunk]
        ctx = torch.from_numpy(np.stack([contexts[i] for i, _ in part]))
        bg = None
        if model.control is not None:
            if backgrounds is None:
                raise SamplingError("model has a control branch; backgrounds are required")
            bg = torch.from_numpy(np.stack([backgrounds[i] for i, _ in part]))
        out.append(sample_chains(model, sched, ctx, bg, [(seeds[i], j) for i, j in part]).numpy())
    maps = np.concatenate(out)
    return maps.reshape((w, k) + maps.shape[1:])
