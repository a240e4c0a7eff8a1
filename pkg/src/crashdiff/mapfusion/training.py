"""Two-phase training: base denoiser, then the background control branch."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .. import tensor_engine as te
from ..scenario_gen import Window
from .networks import DenoiserConfig, DenoiserModel, EmbeddingDecoder
from .schedule import NoiseSchedule, build_schedule, forward_sample, noise_from_velocity, to_model_range

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 5e-5
    T: int = 200
    beta_start: float | None = None  # None -> default_beta_range(T)
    beta_end: float | None = None
    seed: int = 0
    log_every: int = 50

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class TrainLog:
    """Rows of (step, loss, lr, seconds)."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, step, loss, lr, seconds):
        self.rows.append((step, float(loss), float(lr), float(seconds)))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_text(self) -> str:
        return "".join(f"{s} {l:.6f} {lr:.3g} {sec:.3f}\n" for s, l, lr, sec in self.rows)


@dataclass
class Batch:
    context: torch.Tensor  # B x f x C x H x W, [0, 1]
    target: torch.Tensor  # B x C x H x W, [0, 1]
    background: torch.Tensor  # B x C x H x W


def stack_windows(windows: list[Window]) -> Batch:
    return Batch(
        torch.from_numpy(np.stack([w.context.stack() for w in windows])),
        torch.from_numpy(np.stack([w.target.chw() for w in windows])),
        torch.from_numpy(np.stack([w.background.chw() for w in windows])),
    )


def diffusion_loss(
    model: DenoiserModel,
    batch: Batch,
    t,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    use_background: bool = False,
) -> torch.Tensor:
    """Mean squared error between the injected and predicted noise."""
    x0 = to_model_range(batch.target)
    xt = forward_sample(x0, t, eps, sched)
    tokens = model.embed(batch.context)
    v_hat = model(xt, t, tokens, batch.background if use_background else None)
    return te.mse_loss(noise_from_velocity(v_hat, xt, t, sched), eps)


class _Sampler:
    """Seeded draws of (window indices, steps, noise) per training step."""

    def __init__(self, n: int, config: TrainConfig, shape: tuple[int, ...]):
        self.n, self.config, self.shape = n, config, shape
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)

    def draw(self):
        b = self.config.batch_size
        idx = self.rng.integers(0, self.n, b)
        t = self.rng.integers(1, self.config.T + 1, b)
        eps = torch.randn((b,) + self.shape, generator=self.gen)
        return idx, t, eps


def _fit(model, params, windows, config, use_background, on_step=None) -> TrainLog:
    if not windows:
        raise TrainingError("empty training dataset")
    sched = config.schedule()
    c = model.config
    sampler = _Sampler(len(windows), config, (c.channels, c.height, c.width))
    state = te.OptimizerState(lr=config.lr)
    log = TrainLog()
    start = time.perf_counter()
    running = []
    for step in range(1, config.steps + 1):
        idx, t, eps = sampler.draw()
        batch = stack_windows([windows[i] for i in idx])
        te.zero_grad(params)
        loss = diffusion_loss(model, batch, t, eps, sched, use_background)
        te.check_finite(loss, "training loss")
        te.backward(loss)
        if on_step is not None:
            on_step(step, model)
        te.adam_step(params, state)
        running.append(loss.item())
        if step % config.log_every == 0 or step == config.steps:
            mean = float(np.mean(running))
            log.append(step, mean, state.lr, time.perf_counter() - start)
            logger.info("step %d loss %.5f", step, mean)
            running = []
    return log


def train_base(
    windows: list[Window],
    model_config: DenoiserConfig,
    config: TrainConfig,
    model: DenoiserModel | None = None,
    on_step=None,
) -> tuple[DenoiserModel, TrainLog]:
    """Phase one: U-Net and sequence embedder on non-crash windows."""
    model = model or DenoiserModel(model_config, seed=config.seed)
    params = [p for p in model.unet.parameters()]
    if model.uses_sequence:
        params += list(model.embedder.parameters())
    else:
        for p in model.embedder.parameters():
            p.requires_grad_(False)
    log = _fit(model, params, windows, config, use_background=False, on_step=on_step)
    return model, log


def train_control(
    windows: list[Window],
    model: DenoiserModel,
    config: TrainConfig,
    on_step=None,
) -> tuple[DenoiserModel, TrainLog]:
    """Phase two: freeze the base model and train a fresh control branch."""
    if any(w.background is None for w in windows):
        raise TrainingError("every window needs a background map for control training")
    model.freeze_base()
    if model.control is None:
        model.attach_control()
    params = list(model.control.parameters())
    log = _fit(model, params, windows, config, use_background=True, on_step=on_step)
    return model, log


def train_embedding_decoder(
    windows: list[Window],
    model: DenoiserModel,
    steps: int = 500,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[EmbeddingDecoder, TrainLog]:
    """Post-hoc decoder from frozen sequence tokens to the target frame."""
    if not model.uses_sequence:
        raise TrainingError("model was trained without sequence embedding")
    if not windows:
        raise TrainingError("empty training dataset")
    gen = torch.Generator().manual_seed(seed)
    decoder = EmbeddingDecoder(gen, model.config)
    params = list(decoder.parameters())
    rng = np.random.default_rng(seed)
    state = te.OptimizerState(lr=lr)
    log = TrainLog()
    start = time.perf_counter()
    for step in range(1, steps + 1):
        batch = stack_windows([windows[i] for i in rng.integers(0, len(windows), batch_size)])
        with torch.no_grad():
            tokens = model.embedder(batch.context)
        te.zero_grad(params)
        loss = te.mse_loss(decoder(tokens), batch.target)
        te.backward(loss)
        te.adam_step(params, state)
        if step % 50 == 0 or step == steps:
            log.append(step, loss.item(), lr, time.perf_counter() - start)
    return decoder, log


@torch.no_grad()
def decode_embedding(decoder: EmbeddingDecoder, tokens: torch.Tensor) -> torch.Tensor:
    return decoder(tokens)
