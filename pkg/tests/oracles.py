"""Slow, independent reference implementations used as test oracles.

Everything here is plain numpy/scipy with explicit loops where practical, so
it shares no code with the package under test.
"""
import itertools
import math

import numpy as np
from scipy.interpolate import RBFInterpolator


def tv_double_loop(p):
    c, h, w = p.shape
    total = 0.0
    for k in range(c):
        for i in range(h):
            for j in range(w):
                dv = p[k, i, j] - p[k, i + 1, j] if i + 1 < h else 0.0
                dh = p[k, i, j] - p[k, i, j + 1] if j + 1 < w else 0.0
                total += math.sqrt(dv * dv + dh * dh)
    return total


def nps_loop(p, colors):
    c, h, w = p.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            total += min(math.dist(p[:, i, j], col) for col in colors)
    return total


def bilinear_border(img, x, y):
    """Sample ``img`` (C, H, W) at continuous pixel coords, edge replicated.

    Pixel ``(i, j)`` has its centre at ``x = j``, ``y = i``.
    """
    c, h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * img[:, y0, x0] + fx * (1 - fy) * img[:, y0, x1]
            + (1 - fx) * fy * img[:, y1, x0] + fx * fy * img[:, y1, x1])


def tps_reference(p, offsets):
    """Thin plate spline warp built from scipy's RBF interpolator."""
    g = offsets.shape[0]
    c, h, w = p.shape
    t = np.linspace(-1, 1, g)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    src = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dst = src + 2.0 * offsets.reshape(-1, 2)
    back = RBFInterpolator(dst, src, kernel="thin_plate_spline", degree=1)
    out = np.empty_like(p)
    for i in range(h):
        for j in range(w):
            q = np.array([[(2 * j + 1) / w - 1, (2 * i + 1) / h - 1]])
            sx, sy = back(q)[0]
            out[:, i, j] = bilinear_border(p, ((sx + 1) * w - 1) / 2, ((sy + 1) * h - 1) / 2)
    return np.clip(out, 0, 1)


def conv2d_reflect(p, sigma):
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(g, g)
    k2 /= k2.sum()
    c, h, w = p.shape
    out = np.zeros_like(p)
    for ch in range(c):
        padded = np.pad(p[ch], r, mode="reflect")
        for i in range(h):
            for j in range(w):
                out[ch, i, j] = np.sum(padded[i:i + 2 * r + 1, j:j + 2 * r + 1] * k2)
    return out


def simplex_grid(k, step):
    n = int(round(1 / step))
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        a = np.arange(n + 1) / n
        return np.stack([a, 1 - a], axis=1)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    i, j = i[keep], j[keep]
    return np.stack([i / n, j / n, (n - i - j) / n], axis=1)


def brute_project(v, grid):
    d = np.sum(grid ** 2, axis=1) - 2 * grid @ v
    return grid[np.argmin(d)]


def adam_reference(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    x = np.array(x, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


def iou_xyxy(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms_exhaustive(boxes, scores, thresh):
    """The unique kept set: each kept box has no higher kept overlap and each
    dropped box has one.  Found by checking every subset."""
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    rank = {i: r for r, i in enumerate(order)}
    hits = []
    for mask in itertools.product([0, 1], repeat=n):
        kept = {i for i in range(n) if mask[i]}
        ok = True
        for i in range(n):
            higher = [j for j in kept if rank[j] < rank[i]
                      and iou_xyxy(boxes[i], boxes[j]) > thresh]
            if (i in kept) == bool(higher):
                ok = False
                break
        if ok:
            hits.append(kept)
    assert len(hits) == 1
    return hits[0]


def kcenter_radius(points, centers):
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
    return d.min(axis=1).max()


def optimal_kcenter_radius(points, k):
    return min(kcenter_radius(points, points[list(s)])
               for s in itertools.combinations(range(len(points)), k))
