"""Numeric kernels for the denoiser and feature extractor.

Tensors are ``torch.Tensor`` values in NCHW layout; reverse-mode gradients
come from torch's dynamically recorded tape. The layer kernels that carry
model structure (ConvLSTM cell, multi-head attention) are composed here from
elementary ops, and the optimizer is a plain bias-corrected Adam so its
state is inspectable. ``finite_difference_check`` is the independent oracle
used by the gradient suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor
Parameter = torch.nn.Parameter

DTYPE = torch.float32
SHADOW_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------- elementary layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N x Cin x H x W input with Cout x Cin x kh x kw kernels."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    return F.linear(x, weight, bias)


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if x.shape[1] % groups:
        raise ShapeError(f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def upsample2x_nearest(x: Tensor) -> Tensor:
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def downsample2x(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 3x3 convolution; halves H and W."""
    return conv2d(x, weight, bias, stride=2, padding=1)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


# --------------------------------------------------------------------------- structured kernels


def convlstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, weight: Tensor, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One ConvLSTM cell update.

    ``weight`` maps concat(x, h_prev) to the four gate pre-activations stacked
    in the order input, forget, output, candidate.
    """
    if x.shape[-2:] != h_prev.shape[-2:] or h_prev.shape != c_prev.shape:
        raise ShapeError(f"convlstm spatial mismatch {tuple(x.shape)} / {tuple(h_prev.shape)} / {tuple(c_prev.shape)}")
    hidden = h_prev.shape[1]
    if weight.shape[0] != 4 * hidden:
        raise ShapeError(f"gate kernel has {weight.shape[0]} outputs, need {4 * hidden}")
    pad = weight.shape[-1] // 2
    gates = conv2d(torch.cat([x, h_prev], dim=1), weight, bias, padding=pad)
    i, f, o, g = gates.chunk(4, dim=1)
    i, f, o, g = sigmoid(i), sigmoid(f), sigmoid(o), tanh(g)
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, need_weights: bool = False, bias: Tensor | None = None
) -> tuple[Tensor, Tensor | None]:
    """Scaled dot-product attention over B x N x D inputs.

    ``bias`` is an optional constant added to the logits, broadcastable to
    B x heads x Nq x Nk. Returns the concatenated head outputs (B x Nq x D)
    and, when ``need_weights`` is set, the weights (B x heads x Nq x Nk).
    Without weights the fused kernel is used; both paths compute the same
    function.
    """
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"{k.shape[1]} keys but {v.shape[1]} values")
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise ShapeError(f"dim {q.shape[-1]} not divisible by {heads} heads")
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    qh = q.reshape(b, nq, heads, dh).transpose(1, 2)
    kh = k.reshape(b, nk, heads, dh).transpose(1, 2)
    vh = v.reshape(b, nk, heads, v.shape[-1] // heads).transpose(1, 2)
    if need_weights:
        logits = (qh / math.sqrt(dh)) @ kh.transpose(-1, -2)
        if bias is not None:
            logits = logits + bias.to(logits.dtype)
        weights = torch.softmax(logits, dim=-1)
        out = weights @ vh
    else:
        weights = None
        mask = None if bias is None else bias.to(qh.dtype).expand(b, heads, nq, nk)
        out = F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask)
    return out.transpose(1, 2).reshape(b, nq, v.shape[-1]), weights


def cross_attention(
    queries: Tensor,
    context: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    bo: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Multi-head attention of ``queries`` (B x Nq x Dq) over ``context`` tokens (B x Nk x Dc)."""
    out, _ = attention(linear(queries, wq), linear(context, wk), linear(context, wv), heads, bias=bias)
    return linear(out, wo, bo)


# --------------------------------------------------------------------------- differentiation


def backward(loss: Tensor) -> None:
    """Accumulate reverse-mode gradients of a scalar into every trainable leaf."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[int, Tensor] = field(default_factory=dict)
    second: dict[int, Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """Bias-corrected Adam; frozen or gradient-free parameters are left untouched."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for index, p in enumerate(params):
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        m = state.first.get(index)
        if m is None:
            m = state.first[index] = torch.zeros_like(p)
            state.second[index] = torch.zeros_like(p)
        v = state.second[index]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    floor: float = 1e-3,
    max_entries: int | None = 64,
    generator: torch.Generator | None = None,
) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps the inputs to a scalar. Inputs are promoted to float64; at
    most ``max_entries`` randomly chosen coordinates per input are probed.
    The relative error uses ``max(|analytic|, |numeric|, floor)`` as the
    denominator so near-zero gradients are compared absolutely.
    """
    leaves = [x.detach().to(SHADOW_DTYPE).clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ShapeError("finite_difference_check needs a scalar function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.view(-1)
            n = flat.numel()
            if max_entries is None or n <= max_entries:
                probe = range(n)
            else:
                probe = torch.randperm(n, generator=generator)[:max_entries].tolist()
            for idx in probe:
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = fn(*leaves).item()
                flat[idx] = orig - step
                down = fn(*leaves).item()
                flat[idx] = orig
                numeric = (up - down) / (2 * step)
                a = grad.reshape(-1)[idx].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
