"""Map feature extractors.

The default extractor is a small patch-attention encoder whose head keeps a
few features per patch, trained to reconstruct non-crash maps through a
per-patch linear decoder. The linear decoder ties feature distances to
pixel distances, so a local change in the map moves the features locally
instead of being mixed into a global summary. The alternative reads pooled mid-block activations of a
trained denoiser.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import tensor_engine as te
from ..mapfusion.networks import Linear, _param, grid_position_encoding
from ..mapfusion.training import TrainLog
from ..rsm_codec import SegmentMap

logger = logging.getLogger(__name__)

MIN_TRAINING_MAPS = 100


class ExtractorError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    channels: int = 1
    height: int = 64
    width: int = 64
    patch: int = 8
    dim: int = 64
    blocks: int = 2
    heads: int = 4
    features: int = 64  # output length C, split evenly over the patches
    seed: int = 0

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ExtractorError(f"{self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ExtractorError("dim must be divisible by heads")
        tokens = self.grid[0] * self.grid[1]
        if self.features < tokens or self.features % tokens:
            raise ExtractorError(f"features {self.features} must be a positive multiple of the {tokens} patches")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def per_patch(self) -> int:
        return self.features // (self.grid[0] * self.grid[1])


def _layer_norm(x, weight, bias):
    return torch.nn.functional.layer_norm(x, x.shape[-1:], weight, bias)


class _Block(nn.Module):
    def __init__(self, gen, dim, heads):
        super().__init__()
        self.heads = heads
        self.n1w, self.n1b = te.Parameter(torch.ones(dim)), te.Parameter(torch.zeros(dim))
        self.n2w, self.n2b = te.Parameter(torch.ones(dim)), te.Parameter(torch.zeros(dim))
        self.wq, self.wk, self.wv, self.wo = (_param(gen, dim, dim) for _ in range(4))
        self.fc1 = Linear(gen, dim, 2 * dim)
        self.fc2 = Linear(gen, 2 * dim, dim)

    def forward(self, x):
        h = _layer_norm(x, self.n1w, self.n1b)
        x = x + te.cross_attention(h, h, self.wq, self.wk, self.wv, self.wo, self.heads)
        h = _layer_norm(x, self.n2w, self.n2b)
        return x + self.fc2(te.silu(self.fc1(h)))


class FeatureExtractor(nn.Module):
    """Patch embedding, self-attention blocks and a per-patch pooling head,
    flattened in raster order to a C-vector."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator().manual_seed(int(config.seed))
        p, d = config.patch, config.dim
        self.embed = _param(gen, d, config.channels, p, p)
        self.embed_bias = te.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(_Block(gen, d, config.heads) for _ in range(config.blocks))
        self.head = Linear(gen, d, config.per_patch)
        self.register_buffer("pos", grid_position_encoding(*config.grid, d), persistent=False)

    @property
    def dim(self) -> int:
        return self.config.features

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        """B x C x H x W maps in [0, 1] -> B x dim features."""
        c = self.config
        if maps.shape[1:] != (c.channels, c.height, c.width):
            raise ExtractorError(f"map shape {tuple(maps.shape[1:])} != extractor {(c.channels, c.height, c.width)}")
        x = te.conv2d(maps, self.embed, self.embed_bias, stride=c.patch)
        x = x.flatten(2).transpose(1, 2) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.head(x).flatten(1)


class _Decoder(nn.Module):
    """Per-patch features -> patch pixels by one shared linear map; only used
    during training."""

    def __init__(self, gen, config: ExtractorConfig):
        super().__init__()
        self.config = config
        self.out = Linear(gen, config.per_patch, config.patch**2 * config.channels)

    def forward(self, z):
        c = self.config
        gh, gw = c.grid
        x = self.out(z.reshape(z.shape[0], gh * gw, c.per_patch))
        x = x.reshape(-1, gh, gw, c.channels, c.patch, c.patch).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(-1, c.channels, c.height, c.width)


def _as_batch(maps) -> torch.Tensor:
    if isinstance(maps, SegmentMap):
        return torch.from_numpy(maps.chw())[None]
    if isinstance(maps, (list, tuple)) and maps and isinstance(maps[0], SegmentMap):
        return torch.from_numpy(np.stack([m.chw() for m in maps]))
    arr = np.asarray(maps, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr))


def reconstruction_error(extractor: FeatureExtractor, decoder: _Decoder, maps) -> float:
    with torch.no_grad():
        x = _as_batch(maps)
        return float(te.mse_loss(decoder(extractor(x)), x))


def train_feature_extractor(
    maps,
    config: ExtractorConfig = ExtractorConfig(),
    steps: int = 1500,
    batch_size: int = 16,
    lr: float = 1e-3,
    return_decoder: bool = False,
):
    """Fit the encoder plus a throwaway decoder by reconstruction on non-crash maps.

    Returns (extractor, log), or (extractor, log, decoder) when asked.
    """
    data = _as_batch(maps)
    if len(data) < MIN_TRAINING_MAPS:
        raise ExtractorError(f"need at least {MIN_TRAINING_MAPS} maps, got {len(data)}")
    extractor = FeatureExtractor(config)
    gen = torch.Generator().manual_seed(int(config.seed) + 1)
    decoder = _Decoder(gen, config)
    params = list(extractor.parameters()) + list(decoder.parameters())
    rng = np.random.default_rng(config.seed)
    state = te.OptimizerState(lr=lr)
    log = TrainLog()
    start = time.perf_counter()
    running = []
    for step in range(1, steps + 1):
        batch = data[rng.integers(0, len(data), batch_size)]
        te.zero_grad(params)
        loss = te.mse_loss(decoder(extractor(batch)), batch)
        te.check_finite(loss, "extractor loss")
        te.backward(loss)
        te.adam_step(params, state)
        running.append(loss.item())
        if step % 100 == 0 or step == steps:
            log.append(step, float(np.mean(running)), lr, time.perf_counter() - start)
            logger.info("extractor step %d loss %.5f", step, log.rows[-1][1])
            running = []
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    if return_decoder:
        return extractor, log, decoder
    return extractor, log


class MidBlockExtractor:
    """Pooled mid-block activations of a trained denoiser at a small step."""

    def __init__(self, model, step: int = 1):
        self.model = model
        self.step = step

    @property
    def dim(self) -> int:
        return self.model.config.widths[-1]

    def __call__(self, maps: torch.Tensor) -> torch.Tensor:
        x = 2.0 * maps - 1.0
        h = self.model.unet(x, torch.full((len(x),), self.step, dtype=torch.int64), None, return_mid=True)
        return h.mean(dim=(2, 3))


@torch.no_grad()
def extract_features(extractor, maps, chunk: int = 256) -> np.ndarray:
    """Feature vector(s): length C for one map, N x C for a batch."""
    single = isinstance(maps, SegmentMap) or (isinstance(maps, np.ndarray) and maps.ndim == 3)
    x = _as_batch(maps)
    if isinstance(extractor, nn.Module):
        extractor.eval()
    out = torch.cat([extractor(x[i : i + chunk]) for i in range(0, len(x), chunk)])
    te.check_finite(out, "features")
    out = out.numpy().astype(np.float32)
    return out[0] if single else out
