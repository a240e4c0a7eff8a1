"""Slow, independent reference implementations used by the tests."""

from __future__ import annotations

import math
from collections import deque

import numpy as np
from shapely.geometry import Point, Polygon


def bfs_components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """8-connected components in row-major discovery order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    label = -np.ones((h, w), dtype=int)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and label[r, c] < 0:
                comp = []
                label[r, c] = len(comps)
                queue = deque([(r, c)])
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and label[yy, xx] < 0:
                                label[yy, xx] = len(comps)
                                queue.append((yy, xx))
                comps.append(comp)
    return comps


def _rect_polygon(x, y, length, width, heading) -> Polygon:
    c, s = math.cos(heading), math.sin(heading)
    pts = []
    for a, b in ((0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)):
        dx, dy = a * length, b * width
        pts.append((x + dx * c - dy * s, y + dx * s + dy * c))
    return Polygon(pts)


def brute_footprint(record, extent, dims) -> np.ndarray:
    """Every pixel centre tested against the rectangle placed at the snapped centre pixel."""
    sx = (extent.x_max - extent.x_min) / (dims.width - 1)
    sy = (extent.y_max - extent.y_min) / (dims.height - 1)
    col_f = (record.x - extent.x_min) / (extent.x_max - extent.x_min) * (dims.width - 1)
    row_f = (extent.y_max - record.y) / (extent.y_max - extent.y_min) * (dims.height - 1)
    r0, c0 = math.floor(row_f + 0.5), math.floor(col_f + 0.5)
    poly = _rect_polygon(0.0, 0.0, record.length, record.width, record.heading)
    out = np.zeros((dims.height, dims.width), dtype=bool)
    for r in range(dims.height):
        for c in range(dims.width):
            p = Point((c - c0) * sx, (r0 - r) * sy)
            out[r, c] = poly.distance(p) <= 1e-9
    return out


def rectangle_footprint(record, extent, dims) -> np.ndarray:
    """Vectorized point-in-rectangle test of every pixel centre, same
    placement convention as ``brute_footprint``."""
    sx = (extent.x_max - extent.x_min) / (dims.width - 1)
    sy = (extent.y_max - extent.y_min) / (dims.height - 1)
    col_f = (record.x - extent.x_min) / (extent.x_max - extent.x_min) * (dims.width - 1)
    row_f = (extent.y_max - record.y) / (extent.y_max - extent.y_min) * (dims.height - 1)
    r0, c0 = math.floor(row_f + 0.5), math.floor(col_f + 0.5)
    rows, cols = np.mgrid[0 : dims.height, 0 : dims.width]
    dx, dy = (cols - c0) * sx, (r0 - rows) * sy
    c, s = math.cos(record.heading), math.sin(record.heading)
    u, v = dx * c + dy * s, -dx * s + dy * c
    tol = 1e-9
    return (np.abs(u) <= record.length / 2 + tol) & (np.abs(v) <= record.width / 2 + tol)


def random_layout(rng, n, dims, extent, make_record):
    """Up to ``n`` vehicles fully inside the map whose footprints stay at
    least 2 px apart. ``make_record(x, y, length, width, heading)``."""
    from crashdiff.rsm_codec import footprint_mask

    placed = []
    for _ in range(200):
        if len(placed) == n:
            break
        length = rng.uniform(3.5, 12.0)
        width = rng.uniform(1.6, 2.6)
        heading = rng.uniform(-0.3, 0.3)
        r = make_record(rng.uniform(8, extent.x_max - 8), rng.uniform(1.6, extent.y_max - 1.6), length, width, heading)
        mask = footprint_mask(r, extent, dims)
        rows, cols = np.nonzero(mask)
        if rows.size == 0 or rows.min() < 1 or cols.min() < 1 or rows.max() > dims.height - 2 or cols.max() > dims.width - 2:
            continue
        if np.ptp(rows) < 1 or np.ptp(cols) < 1:
            continue
        grown = np.zeros_like(mask)
        for dr in range(-2, 3):
            for dc in range(-2, 3):
                grown |= np.roll(np.roll(mask, dr, 0), dc, 1)
        if any((grown & m).any() for _, m in placed):
            continue
        placed.append((r, mask))
    return placed


def records_overlap(a, b) -> bool:
    """Positive-area intersection of two vehicle rectangles."""
    pa = _rect_polygon(a.x, a.y, a.length, a.width, a.heading)
    pb = _rect_polygon(b.x, b.y, b.length, b.width, b.heading)
    return pa.intersection(pb).area > 1e-9


def frame_overlaps(records) -> bool:
    return any(records_overlap(records[i], records[j]) for i in range(len(records)) for j in range(i + 1, len(records)))


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * stride + u, c * stride + v] * w[o, ci, u, v]
                    out[i, o, r, c] = acc
    return out


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-Python Adam on one scalar for a list of per-step gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta


def scalar_ddpm_chain(x_T, betas, eps_fn, zs):
    """Ancestral chain for one scalar: eps_fn(x, t) predicts noise, zs[t] is the injected noise."""
    alpha_bar = 1.0
    abar = [1.0]
    for b in betas:
        alpha_bar *= 1.0 - b
        abar.append(alpha_bar)
    x = x_T
    T = len(betas)
    for t in range(T, 0, -1):
        beta = betas[t - 1]
        alpha = 1.0 - beta
        mean = (x - beta / math.sqrt(1.0 - abar[t]) * eps_fn(x, t)) / math.sqrt(alpha)
        x = mean + (math.sqrt(beta) * zs[t] if t > 1 else 0.0)
    return x
