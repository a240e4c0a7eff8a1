"""Finite-difference gradient suite over every differentiable kernel and the
two training losses."""

from __future__ import annotations

import numpy as np
import torch
from torch.func import functional_call

from .. import tensor_engine as te
from ..mapfusion.networks import DenoiserConfig, DenoiserModel
from ..mapfusion.schedule import build_schedule, forward_sample, noise_from_velocity

TOLERANCE = 1e-4


def _rand(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _weighted(out, gen_weights):
    # a random linear functional exercises every output element
    return (out * gen_weights).sum()


def _kernel_cases(gen: torch.Generator):
    """(name, fn, inputs) triples; fn maps inputs to a scalar."""
    cases = []

    x = _rand(gen, 2, 3, 6, 6)
    w = _rand(gen, 4, 3, 3, 3)
    b = _rand(gen, 4)
    r = _rand(gen, 2, 4, 6, 6)
    cases.append(("conv2d", lambda x, w, b: _weighted(te.conv2d(x, w, b, padding=1), r), [x, w, b]))

    r2 = _rand(gen, 2, 4, 3, 3)
    cases.append(("downsample2x", lambda x, w, b: _weighted(te.downsample2x(x, w, b), r2), [x, w, b]))

    xl, wl, bl, rl = _rand(gen, 5, 7), _rand(gen, 3, 7), _rand(gen, 3), _rand(gen, 5, 3)
    cases.append(("linear", lambda x, w, b: _weighted(te.linear(x, w, b), rl), [xl, wl, bl]))

    xg, gw, gb, rg = _rand(gen, 2, 4, 3, 3), _rand(gen, 4), _rand(gen, 4), _rand(gen, 2, 4, 3, 3)
    cases.append(("group_norm", lambda x, w, b: _weighted(te.group_norm(x, 2, w, b), rg), [xg, gw, gb]))

    xa, ra = _rand(gen, 3, 4), _rand(gen, 3, 4)
    for name, fn in (("silu", te.silu), ("sigmoid", te.sigmoid), ("tanh", te.tanh)):
        cases.append((name, lambda x, fn=fn: _weighted(fn(x), ra), [xa]))

    xu, ru = _rand(gen, 1, 2, 3, 3), _rand(gen, 1, 2, 6, 6)
    cases.append(("upsample2x_nearest", lambda x: _weighted(te.upsample2x_nearest(x), ru), [xu]))

    ma, mb = _rand(gen, 4, 5), _rand(gen, 4, 5)
    cases.append(("mse_loss", lambda a, b: te.mse_loss(a, b), [ma, mb]))

    hid = 3
    cx, ch, cc = _rand(gen, 2, 2, 4, 4), _rand(gen, 2, hid, 4, 4), _rand(gen, 2, hid, 4, 4)
    cw, cb = 0.5 * _rand(gen, 4 * hid, 2 + hid, 3, 3), _rand(gen, 4 * hid)
    rh, rc = _rand(gen, 2, hid, 4, 4), _rand(gen, 2, hid, 4, 4)

    def lstm(x, h, c, w, b):
        h2, c2 = te.convlstm_step(x, h, c, w, b)
        return _weighted(h2, rh) + _weighted(c2, rc)

    cases.append(("convlstm_step", lstm, [cx, ch, cc, cw, cb]))

    q, k, v = _rand(gen, 2, 5, 8), _rand(gen, 2, 4, 8), _rand(gen, 2, 4, 8)
    rq = _rand(gen, 2, 5, 8)
    cases.append(("attention", lambda q, k, v: _weighted(te.attention(q, k, v, 2, need_weights=True)[0], rq), [q, k, v]))
    cases.append(("attention_fused", lambda q, k, v: _weighted(te.attention(q, k, v, 2)[0], rq), [q, k, v]))

    cq, cctx = _rand(gen, 2, 5, 8), _rand(gen, 2, 4, 6)
    wq, wk, wv, wo = _rand(gen, 8, 8), _rand(gen, 8, 6), _rand(gen, 8, 6), _rand(gen, 8, 8)
    cases.append(
        (
            "cross_attention",
            lambda a, c, wq, wk, wv, wo: _weighted(te.cross_attention(a, c, wq, wk, wv, wo, 2), rq),
            [cq, cctx, wq, wk, wv, wo],
        )
    )
    bias = _rand(gen, 5, 4)
    cases.append(
        (
            "cross_attention_bias",
            lambda a, c, wq, wk, wv, wo: _weighted(te.cross_attention(a, c, wq, wk, wv, wo, 2, bias=bias), rq),
            [cq, cctx, wq, wk, wv, wo],
        )
    )

    cxin, ck, ckb = _rand(gen, 2, 2, 5, 5), _rand(gen, 4, 2, 3, 3), _rand(gen, 4)
    ctarget = _rand(gen, 2, 4, 5, 5)
    cases.append(
        (
            "conv_norm_mse",
            lambda x, w, b: te.mse_loss(te.group_norm(te.conv2d(x, w, b, padding=1), 2), ctarget),
            [cxin, ck, ckb],
        )
    )
    return cases


TINY = DenoiserConfig(height=16, width=16, f=2, base_width=8, depth=2, heads=2, token_dim=8, embed_hidden=4, groups=4)


def _loss_cases(seed: int):
    """End-to-end denoising losses without and with the control branch,
    differentiated w.r.t. a few parameter tensors."""
    gen = torch.Generator().manual_seed(seed)
    model = DenoiserModel(TINY, seed=seed)
    model.attach_control()
    # give the zero projections non-zero values so their gradients are exercised
    with torch.no_grad():
        for p in model.control.parameters():
            if not p.any():
                p.normal_(0.0, 0.05, generator=gen)
        for p in model.embedder.parameters():
            if not p.any():
                p.normal_(0.0, 0.05, generator=gen)
    model = model.double()
    sched = build_schedule(10)
    c = TINY
    ctx = torch.rand((2, c.f, 1, c.height, c.width), generator=gen, dtype=torch.float64)
    x0 = 2 * torch.rand((2, 1, c.height, c.width), generator=gen, dtype=torch.float64) - 1
    bg = torch.rand((2, 1, c.height, c.width), generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    t = np.array([3, 7])
    xt = forward_sample(x0, t, eps, sched)
    params = dict(model.named_parameters())

    def base_loss(names):
        def run(*tensors):
            override = dict(zip(names, tensors))
            emb = {k[len("embedder.") :]: v for k, v in override.items() if k.startswith("embedder.")}
            unet = {k[len("unet.") :]: v for k, v in override.items() if k.startswith("unet.")}
            tokens = functional_call(model.embedder, emb, (ctx,))
            v_hat = functional_call(model.unet, unet, (xt, torch.as_tensor(t), tokens))
            return te.mse_loss(noise_from_velocity(v_hat, xt, t, sched), eps)

        return run

    def control_loss(names):
        def run(*tensors):
            v_hat = functional_call(model, dict(zip(names, tensors)), (xt, t, model.embedder(ctx), bg))
            return te.mse_loss(noise_from_velocity(v_hat, xt, t, sched), eps)

        return run

    base_names = ["unet.encoder.conv_in.weight", "unet.encoder.mid_attn.wq", "unet.res_up.0.conv2.weight", "embedder.cell1"]
    ctrl_names = ["control.zero_mid.weight", "control.hint.weight", "control.encoder.res.0.conv1.weight"]
    return [
        ("loss_base", base_loss(base_names), [params[n].detach() for n in base_names]),
        ("loss_control", control_loss(ctrl_names), [params[n].detach() for n in ctrl_names]),
    ]


def run_suite(seeds: int = 20, max_entries: int = 12, include_losses: bool = True) -> list[tuple[str, float]]:
    """Worst relative error per kernel across ``seeds`` random draws."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        gen = torch.Generator().manual_seed(seed)
        probe = torch.Generator().manual_seed(10_000 + seed)
        for name, fn, inputs in _kernel_cases(gen):
            err = te.finite_difference_check(fn, inputs, step=1e-5, max_entries=max_entries, generator=probe)
            worst[name] = max(worst.get(name, 0.0), err)
    if include_losses:
        for seed in range(seeds):
            probe = torch.Generator().manual_seed(20_000 + seed)
            for name, fn, inputs in _loss_cases(seed):
                err = te.finite_difference_check(fn, inputs, step=1e-5, max_entries=4, generator=probe)
                worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())
