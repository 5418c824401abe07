"""Scalar-loop reference implementations of every loss.

Deliberately naive: plain Python floats, explicit pixel loops, no shared code
with :mod:`dgfusion.losskit.losses`. Used by tests and ``losskit oracle``.
All functions take a single image (H x W nested lists or arrays).
"""
from __future__ import annotations

import math
from fractions import Fraction

VOID = 255


def _grid(a):
    return [[float(v) for v in row] for row in a]


def log_residuals(pred, gt, valid, d_min, d_max):
    """{(i, j): r} over lidar pixels."""
    out = {}
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            if valid[i][j]:
                g = min(max(float(gt[i][j]), d_min), d_max)
                out[(i, j)] = abs(math.log(float(pred[i][j])) - math.log(g))
    return out


def kept_pixels(residuals: dict, tau: float) -> list:
    """Sort by (residual, row-major position); keep ceil(tau * n)."""
    n = len(residuals)
    tau_exact = Fraction(str(tau))
    k = -((-tau_exact.numerator * n) // tau_exact.denominator)
    ranked = sorted(residuals.items(), key=lambda kv: (kv[1], kv[0]))
    return sorted(p for p, _ in ranked[:k])


def log_l1(pred, gt, valid, tau, d_min, d_max) -> float:
    r = log_residuals(pred, gt, valid, d_min, d_max)
    kept = kept_pixels(r, tau)
    total = 0.0
    for p in kept:
        total += r[p]
    return total / len(kept)


def edge_smooth(pred, rgb) -> float:
    h, w = len(pred), len(pred[0])
    inten = [[sum(float(rgb[c][i][j]) for c in range(len(rgb))) / len(rgb) for j in range(w)]
             for i in range(h)]
    total = 0.0
    for i in range(h):
        for j in range(w):
            if j + 1 < w:
                total += abs(pred[i][j + 1] - pred[i][j]) * math.exp(-abs(inten[i][j + 1] - inten[i][j]))
            if i + 1 < h:
                total += abs(pred[i + 1][j] - pred[i][j]) * math.exp(-abs(inten[i + 1][j] - inten[i][j]))
    return total / (h * w)


def boundary_weights(cls, inst, k, use_instances=True):
    """(w_x, w_y) as nested lists, straight from the definitions."""
    h, w = len(cls), len(cls[0])

    def label(i, j):
        c = int(cls[i][j])
        n = int(inst[i][j]) if use_instances else 0
        if c == VOID or (use_instances and n == 0):
            return None
        return (c, n)

    r = k // 2
    result = []
    for di, dj in ((0, 1), (1, 0)):
        rows, cols = h - di, w - dj
        b = [[1] * cols for _ in range(rows)]
        v = [[0] * cols for _ in range(rows)]
        for i in range(rows):
            for j in range(cols):
                s, t = label(i, j), label(i + di, j + dj)
                if s != t:
                    b[i][j] = 0
                if s is not None and t is not None:
                    v[i][j] = 1
        wmap = [[0.0] * cols for _ in range(rows)]
        for i in range(rows):
            for j in range(cols):
                bd = 1
                for a in range(i - r, i + r + 1):
                    for c in range(j - r, j + r + 1):
                        if 0 <= a < rows and 0 <= c < cols and b[a][c] == 0:
                            bd = 0
                wmap[i][j] = float(bd * v[i][j])
        result.append(wmap)
    return result[0], result[1]


def panoptic_smooth(pred, cls, inst, k) -> float:
    wx, wy = boundary_weights(cls, inst, k)
    h, w = len(pred), len(pred[0])
    total = 0.0
    for i in range(h):
        for j in range(w):
            if j + 1 < w:
                total += wx[i][j] * abs(pred[i][j + 1] - pred[i][j])
            if i + 1 < h:
                total += wy[i][j] * abs(pred[i + 1][j] - pred[i][j])
    return total / (h * w)


def cross_entropy_seg(logits, labels) -> float:
    """logits C x H x W, labels H x W (255 = void)."""
    c = len(logits)
    h, w = len(labels), len(labels[0])
    total, n = 0.0, 0
    for i in range(h):
        for j in range(w):
            y = int(labels[i][j])
            if y == VOID:
                continue
            zs = [float(logits[q][i][j]) for q in range(c)]
            m = max(zs)
            lse = m + math.log(sum(math.exp(z - m) for z in zs))
            total += lse - zs[y]
            n += 1
    return total / n


def cross_entropy_cond(logits, label: int) -> float:
    zs = [float(z) for z in logits]
    m = max(zs)
    return m + math.log(sum(math.exp(z - m) for z in zs)) - zs[label]
