"""Denoising U-Net, ConvLSTM sequence embedder, control branch and the
embedding decoder used to inspect what the sequence tokens carry."""

from __future__ import annotations

import copy
import functools
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import tensor_engine as te


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    height: int = 64
    width: int = 64
    f: int = 5
    base_width: int = 32
    depth: int = 2
    heads: int = 4
    token_dim: int = 64
    embed_hidden: int = 16
    use_sequence_embedding: bool = True
    groups: int = 8
    # width (in token cells) of the distance prior on cross-attention logits; 0 disables it
    attention_locality: float = 1.0

    def validate(self) -> None:
        if self.f < 1:
            raise ConfigMismatch("f must be >= 1")
        scale = 2**self.depth
        if self.depth < 1 or self.height % scale or self.width % scale:
            raise ConfigMismatch(f"{self.height}x{self.width} not divisible by 2^{self.depth}")
        if self.attention_locality < 0:
            raise ConfigMismatch("attention_locality must be >= 0")
        if self.token_dim % self.heads:
            raise ConfigMismatch("token_dim must be divisible by heads")
        for w in self.widths:
            if w % self.groups or w % self.heads:
                raise ConfigMismatch(f"width {w} incompatible with groups={self.groups} / heads={self.heads}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * min(2**i, 4) for i in range(self.depth + 1))

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.height // 2**self.depth, self.width // 2**self.depth

    @property
    def token_count(self) -> int:
        h, w = self.token_grid
        return h * w


# --------------------------------------------------------------------------- parameter helpers


def _param(gen: torch.Generator, *shape: int, fan_in: int | None = None, zero: bool = False) -> te.Parameter:
    if zero:
        return te.Parameter(torch.zeros(shape))
    fan_in = fan_in or int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return te.Parameter((torch.rand(shape, generator=gen) * 2 - 1) * bound)


class Conv(nn.Module):
    def __init__(self, gen, cin, cout, k=3, stride=1, zero=False):
        super().__init__()
        self.weight = _param(gen, cout, cin, k, k, zero=zero)
        self.bias = te.Parameter(torch.zeros(cout))
        self.stride, self.padding = stride, k // 2

    def forward(self, x):
        return te.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(nn.Module):
    def __init__(self, gen, din, dout, zero=False):
        super().__init__()
        self.weight = _param(gen, dout, din, zero=zero)
        self.bias = te.Parameter(torch.zeros(dout))

    def forward(self, x):
        return te.linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, groups, channels):
        super().__init__()
        self.groups = groups
        self.weight = te.Parameter(torch.ones(channels))
        self.bias = te.Parameter(torch.zeros(channels))

    def forward(self, x):
        return te.group_norm(x, self.groups, self.weight, self.bias)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=1).to(te.DTYPE)


@functools.lru_cache(maxsize=32)
def locality_bias(h: int, w: int, token_grid: tuple[int, int], width: float) -> torch.Tensor | None:
    """(h*w) x (gh*gw) logit bias -d^2 / (2 width^2), with d the distance
    between a query cell and a token cell measured in token cells."""
    if width <= 0:
        return None
    gh, gw = token_grid

    def centres(n, m):
        rows = (torch.arange(n, dtype=torch.float64) + 0.5) / n * gh
        cols = (torch.arange(m, dtype=torch.float64) + 0.5) / m * gw
        rr, cc = torch.meshgrid(rows, cols, indexing="ij")
        return torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=1)

    d2 = torch.cdist(centres(h, w), centres(gh, gw)) ** 2
    return (-d2 / (2.0 * width * width)).to(te.DTYPE)


def grid_position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed (h*w) x dim encoding of normalized cell-centre coordinates, so
    grids of different resolution share one coordinate frame."""
    quarter = dim // 4
    freqs = torch.pi * 2.0 ** torch.arange(quarter, dtype=torch.float64)
    rows = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    cols = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    parts = []
    for coord in (rr.reshape(-1), cc.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [ang.sin(), ang.cos()]
    enc = torch.cat(parts, dim=1)
    if enc.shape[1] < dim:
        enc = torch.cat([enc, torch.zeros(enc.shape[0], dim - enc.shape[1], dtype=enc.dtype)], dim=1)
    return enc.to(te.DTYPE)


# --------------------------------------------------------------------------- blocks


class TimeEmbedding(nn.Module):
    def __init__(self, gen, base, dim):
        super().__init__()
        self.base = base
        self.fc1 = Linear(gen, base, dim)
        self.fc2 = Linear(gen, dim, dim)

    def forward(self, t):
        return self.fc2(te.silu(self.fc1(sinusoidal_embedding(t, self.base).to(self.fc1.weight.dtype))))


class ResBlock(nn.Module):
    def __init__(self, gen, cin, cout, tdim, groups):
        super().__init__()
        self.norm1 = GroupNorm(groups, cin)
        self.conv1 = Conv(gen, cin, cout)
        self.temb = Linear(gen, tdim, cout)
        self.norm2 = GroupNorm(groups, cout)
        self.conv2 = Conv(gen, cout, cout)
        self.skip = Conv(gen, cin, cout, k=1) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(te.silu(self.norm1(x)))
        h = h + self.temb(te.silu(temb))[:, :, None, None]
        h = self.conv2(te.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttentionBlock(nn.Module):
    """Map features attend to the sequence tokens; residual update."""

    def __init__(self, gen, channels, token_dim, heads, groups, locality: float = 0.0):
        super().__init__()
        self.heads = heads
        self.locality = locality
        self.norm = GroupNorm(groups, channels)
        self.wq = _param(gen, channels, channels)
        self.wk = _param(gen, channels, token_dim)
        self.wv = _param(gen, channels, token_dim)
        self.wo = _param(gen, channels, channels)
        self.bo = te.Parameter(torch.zeros(channels))
        self.channels, self.token_dim = channels, token_dim

    def forward(self, x, tokens, token_grid):
        b, c, h, w = x.shape
        q = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = q + grid_position_encoding(h, w, c).to(q.dtype)[None]
        k = tokens + grid_position_encoding(*token_grid, self.token_dim).to(tokens.dtype)[None]
        bias = locality_bias(h, w, token_grid, self.locality)
        out = te.cross_attention(q, k, self.wq, self.wk, self.wv, self.wo, self.heads, self.bo, bias=bias)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Upsample(nn.Module):
    def __init__(self, gen, cin, cout):
        super().__init__()
        self.conv = Conv(gen, cin, cout)

    def forward(self, x):
        return self.conv(te.upsample2x_nearest(x))


# --------------------------------------------------------------------------- sequence embedding


class SequentialEmbedder(nn.Module):
    """Two-layer ConvLSTM at half resolution over the context frames; the
    final hidden state is pooled to the token grid and projected."""

    def __init__(self, gen, config: DenoiserConfig, zero: bool = False):
        super().__init__()
        c, hid = config.channels, config.embed_hidden
        self.config = config
        self.stem = Conv(gen, c, hid, stride=2, zero=zero)
        self.cell1 = _param(gen, 4 * hid, 2 * hid, 3, 3, zero=zero)
        self.bias1 = te.Parameter(torch.zeros(4 * hid))
        self.cell2 = _param(gen, 4 * hid, 2 * hid, 3, 3, zero=zero)
        self.bias2 = te.Parameter(torch.zeros(4 * hid))
        self.pool = nn.ModuleList(Conv(gen, hid, hid, stride=2, zero=zero) for _ in range(config.depth - 1))
        self.proj = Linear(gen, hid, config.token_dim, zero=zero)

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        """``context`` is B x f x C x H x W in [0, 1]; returns B x N x token_dim."""
        b, f = context.shape[:2]
        if f != self.config.f:
            raise ConfigMismatch(f"context has {f} frames, model expects {self.config.f}")
        hid = self.config.embed_hidden
        h1 = c1 = h2 = c2 = None
        for step in range(f):
            x = self.stem(context[:, step])
            if h1 is None:
                h1 = c1 = h2 = c2 = torch.zeros(b, hid, *x.shape[-2:], dtype=x.dtype)
            h1, c1 = te.convlstm_step(x, h1, c1, self.cell1, self.bias1)
            h2, c2 = te.convlstm_step(h1, h2, c2, self.cell2, self.bias2)
        g = h2
        for conv in self.pool:
            g = te.silu(conv(g))
        tokens = g.flatten(2).transpose(1, 2)
        return self.proj(tokens)


class EmbeddingDecoder(nn.Module):
    """Reconstructs the next frame from sequence tokens alone."""

    def __init__(self, gen, config: DenoiserConfig, width: int = 32):
        super().__init__()
        self.config = config
        self.inp = Conv(gen, config.token_dim, width)
        self.ups = nn.ModuleList(Upsample(gen, width, width) for _ in range(config.depth))
        self.out = Conv(gen, width, config.channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.token_dim:
            raise ConfigMismatch(f"token dim {tokens.shape[-1]} != {self.config.token_dim}")
        b = tokens.shape[0]
        gh, gw = self.config.token_grid
        x = tokens.transpose(1, 2).reshape(b, -1, gh, gw)
        x = te.silu(self.inp(x))
        for up in self.ups:
            x = te.silu(up(x))
        return te.sigmoid(self.out(x))


# --------------------------------------------------------------------------- U-Net


class Encoder(nn.Module):
    """Input stem, down path and mid block; shared layout of the U-Net and
    its control copy."""

    def __init__(self, gen, config: DenoiserConfig, tdim: int):
        super().__init__()
        w, g = config.widths, config.groups
        self.conv_in = Conv(gen, config.channels, w[0])
        self.res = nn.ModuleList(ResBlock(gen, w[i], w[i], tdim, g) for i in range(config.depth))
        self.attn = nn.ModuleDict(
            {str(i): CrossAttentionBlock(gen, w[i], config.token_dim, config.heads, g, config.attention_locality) for i in range(1, config.depth)}
        )
        self.down = nn.ModuleList(Conv(gen, w[i], w[i + 1], stride=2) for i in range(config.depth))
        self.mid1 = ResBlock(gen, w[-1], w[-1], tdim, g)
        self.mid_attn = CrossAttentionBlock(gen, w[-1], config.token_dim, config.heads, g, config.attention_locality)
        self.mid2 = ResBlock(gen, w[-1], w[-1], tdim, g)
        self.token_grid = config.token_grid

    def forward(self, x, temb, tokens, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = []
        for i, res in enumerate(self.res):
            h = res(h, temb)
            if tokens is not None and str(i) in self.attn:
                h = self.attn[str(i)](h, tokens, self.token_grid)
            skips.append(h)
            h = self.down[i](h)
        h = self.mid1(h, temb)
        if tokens is not None:
            h = self.mid_attn(h, tokens, self.token_grid)
        h = self.mid2(h, temb)
        return h, skips


class UNet(nn.Module):
    def __init__(self, gen, config: DenoiserConfig):
        super().__init__()
        w, g = config.widths, config.groups
        self.config = config
        tdim = 4 * w[0]
        self.time = TimeEmbedding(gen, w[0], tdim)
        self.encoder = Encoder(gen, config, tdim)
        self.up = nn.ModuleList(Upsample(gen, w[i + 1], w[i]) for i in range(config.depth))
        self.res_up = nn.ModuleList(ResBlock(gen, 2 * w[i], w[i], tdim, g) for i in range(config.depth))
        self.attn_up = nn.ModuleDict(
            {str(i): CrossAttentionBlock(gen, w[i], config.token_dim, config.heads, g, config.attention_locality) for i in range(1, config.depth)}
        )
        self.norm_out = GroupNorm(g, w[0])
        self.conv_out = Conv(gen, w[0], config.channels)

    def forward(self, x, t, tokens=None, control=None, return_mid=False):
        """``control`` is an optional (mid residual, skip residuals) pair."""
        temb = self.time(t)
        h, skips = self.encoder(x, temb, tokens)
        if control is not None:
            mid_res, skip_res = control
            h = h + mid_res
            skips = [s + r for s, r in zip(skips, skip_res)]
        if return_mid:
            return h
        for i in reversed(range(self.config.depth)):
            h = self.up[i](h)
            h = self.res_up[i](torch.cat([h, skips[i]], dim=1), temb)
            if tokens is not None and str(i) in self.attn_up:
                h = self.attn_up[str(i)](h, tokens, self.config.token_grid)
        return self.conv_out(te.silu(self.norm_out(h)))


class ControlBranch(nn.Module):
    """Trainable copy of the U-Net encoder conditioned on the background map.

    Every output passes through a zero-initialized 1x1 convolution, so a
    fresh branch contributes exact zeros.
    """

    def __init__(self, gen, unet: UNet):
        super().__init__()
        config = unet.config
        w = config.widths
        self.encoder = copy.deepcopy(unet.encoder)
        for p in self.encoder.parameters():
            p.requires_grad_(True)
        self.adapter = nn.ModuleList([Conv(gen, config.channels, 16), Conv(gen, 16, 16)])
        self.hint = Conv(gen, 16, w[0], zero=True)
        self.zero_skips = nn.ModuleList(Conv(gen, w[i], w[i], k=1, zero=True) for i in range(config.depth))
        self.zero_mid = Conv(gen, w[-1], w[-1], k=1, zero=True)

    def forward(self, x, temb, tokens, background):
        b = background
        for conv in self.adapter:
            b = te.silu(conv(b))
        h, skips = self.encoder(x, temb, tokens, hint=self.hint(b))
        return self.zero_mid(h), [z(s) for z, s in zip(self.zero_skips, skips)]


class DenoiserModel(nn.Module):
    """Noise predictor: U-Net + sequence embedder (+ optional control branch)."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        self.unet = UNet(gen, config)
        self.embedder = SequentialEmbedder(gen, config)
        self.control: ControlBranch | None = None
        self._control_seed = int(seed) + 1

    @property
    def uses_sequence(self) -> bool:
        return self.config.use_sequence_embedding

    def attach_control(self) -> ControlBranch:
        """Attach a fresh control branch inheriting the current encoder weights."""
        gen = torch.Generator().manual_seed(self._control_seed)
        self.control = ControlBranch(gen, self.unet)
        return self.control

    def freeze_base(self) -> None:
        for p in list(self.unet.parameters()) + list(self.embedder.parameters()):
            p.requires_grad_(False)

    def base_parameters(self):
        return list(self.unet.named_parameters(prefix="unet")) + list(self.embedder.named_parameters(prefix="embedder"))

    def embed(self, context: torch.Tensor) -> torch.Tensor | None:
        if not self.uses_sequence:
            return None
        return self.embedder(context)

    def forward(self, xt, t, tokens=None, background=None, return_mid=False):
        c = self.config
        if xt.shape[1:] != (c.channels, c.height, c.width):
            raise ConfigMismatch(f"map shape {tuple(xt.shape[1:])} != model {(c.channels, c.height, c.width)}")
        t = torch.as_tensor(np.broadcast_to(np.asarray(t), (xt.shape[0],)).copy(), dtype=torch.int64)
        control = None
        if self.control is not None:
            if background is None:
                raise ConfigMismatch("model has a control branch but no background was given")
            temb = self.unet.time(t)
            control = self.control(xt, temb, tokens, background)
        elif background is not None:
            raise ConfigMismatch("background given but no control branch is attached")
        return self.unet(xt, t, tokens, control, return_mid=return_mid)
