"""Noise schedule and the closed-form forward / single reverse step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step t = 0..T; index 0 is the clean map (alpha_bar = 1)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"step {t} outside 1..{self.T}")

    def gather(self, table: str, t, like: torch.Tensor) -> torch.Tensor:
        """Table values at steps ``t`` shaped to broadcast against ``like``."""
        values = getattr(self, table)[np.asarray(t, dtype=np.int64)]
        out = torch.as_tensor(values, dtype=like.dtype)
        return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ScheduleError("every beta must lie in (0, 1)")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar)


REFERENCE_T = 1000
REFERENCE_BETAS = (1e-4, 0.02)
MAX_BETA = 0.999


def default_beta_range(T: int) -> tuple[float, float]:
    """The 1e-4..0.02 range of a 1000-step schedule rescaled to ``T`` steps.

    Keeping the sum of betas fixed keeps alpha_bar_T near zero, so reverse
    chains may start from pure unit noise at any T.
    """
    scale = REFERENCE_T / T
    lo, hi = (min(b * scale, MAX_BETA) for b in REFERENCE_BETAS)
    return lo, hi


def build_schedule(T: int = 200, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear betas over T steps; an omitted endpoint takes the rescaled default."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    lo, hi = default_beta_range(T)
    beta_start = lo if beta_start is None else beta_start
    beta_end = hi if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def to_model_range(x):
    """[0, 1] pixels -> [-1, 1]."""
    return 2.0 * x - 1.0


def from_model_range(x):
    return (x + 1.0) / 2.0


def forward_sample(r0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Corrupt model-range maps ``r0`` to step ``t`` with the given noise.

    ``t`` is a scalar or one step per batch element.
    """
    sched.check_step(t)
    if eps.shape != r0.shape:
        raise ScheduleError(f"noise shape {tuple(eps.shape)} != map shape {tuple(r0.shape)}")
    signal = sched.gather("alpha_bar", t, r0).sqrt()
    noise = (1.0 - sched.gather("alpha_bar", t, r0)).sqrt()
    return signal * r0 + noise * eps


def forward_step(r_prev: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One Markov corruption step from t-1 to t."""
    sched.check_step(t)
    return sched.gather("alpha", t, r_prev).sqrt() * r_prev + sched.gather("beta", t, r_prev).sqrt() * eps


def noise_from_velocity(v_hat: torch.Tensor, rt: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Noise estimate from a velocity output v = sqrt(ab) eps - sqrt(1 - ab) r0.

    Exact for the true velocity. The sqrt(1 - ab) r_t term passes global
    offsets of r_t straight through, which a group-normalized network cannot
    do on its own; without it long sampling chains drift to all-black or
    all-white maps.
    """
    alpha_bar = sched.gather("alpha_bar", t, rt)
    return alpha_bar.sqrt() * v_hat + (1.0 - alpha_bar).sqrt() * rt


def reverse_step(rt: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule, z: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral step: posterior mean from the predicted noise plus sigma_t z,
    with sigma_t^2 = beta_t. Pass ``z=None`` (or zeros) at t = 1."""
    sched.check_step(t)
    alpha = sched.gather("alpha", t, rt)
    beta = sched.gather("beta", t, rt)
    alpha_bar = sched.gather("alpha_bar", t, rt)
    mean = (rt - beta / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt()
    if z is None:
        return mean
    return mean + beta.sqrt() * z
