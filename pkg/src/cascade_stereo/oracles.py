"""Brute-force scalar-loop references.

These are deliberately naive and share no code with the vectorised paths
they are used to check.
"""

from __future__ import annotations

import math

import numpy as np


def cost_volume_concat_loops(left, right, max_disparity, offset=0):
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    h, w, c = left.shape
    w_right = right.shape[1]
    out = np.zeros((max_disparity + 1, h, w, 2 * c))
    for d in range(max_disparity + 1):
        for y in range(h):
            for x in range(w):
                for k in range(c):
                    out[d, y, x, k] = left[y, x, k]
                xr = x + offset - d
                if 0 <= xr < w_right:
                    for k in range(c):
                        out[d, y, x, c + k] = right[y, xr, k]
    return out


def cost_volume_dot_loops(left, right, max_disparity, offset=0):
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    h, w, c = left.shape
    w_right = right.shape[1]
    out = np.zeros((max_disparity + 1, h, w, 1))
    for d in range(max_disparity + 1):
        for y in range(h):
            for x in range(w):
                xr = x + offset - d
                if 0 <= xr < w_right:
                    s = 0.0
                    for k in range(c):
                        s += left[y, x, k] * right[y, xr, k]
                    out[d, y, x, 0] = -s
    return out


def argmin_loops(cost):
    cost = np.asarray(cost)
    h, w, levels = cost.shape
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            best, best_d = math.inf, 0
            for d in range(levels):
                if cost[y, x, d] < best:
                    best, best_d = cost[y, x, d], d
            out[y, x] = best_d
    return out


def conv2d_loops(x, kernel, bias, stride=1, pad=1):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for oy in range(oh):
        for ox in range(ow):
            for o in range(cout):
                s = float(bias[o]) if bias is not None else 0.0
                for i in range(kh):
                    for j in range(kw):
                        y, xx = oy * stride + i - pad, ox * stride + j - pad
                        if 0 <= y < h and 0 <= xx < w:
                            for c in range(cin):
                                s += x[y, xx, c] * kernel[i, j, c, o]
                out[oy, ox, o] = s
    return out


def metrics_loops(pred, gt, mask):
    """Returns (>2, >3, >5, epe, d1) or None for an empty mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n = bad2 = bad3 = bad5 = d1 = 0
    total = 0.0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            if not mask[y, x]:
                continue
            e = abs(pred[y, x] - gt[y, x])
            n += 1
            total += e
            bad2 += e > 2
            bad3 += e > 3
            bad5 += e > 5
            d1 += (e > 3) and (e > 0.05 * abs(gt[y, x]))
    if n == 0:
        return None
    return bad2 / n, bad3 / n, bad5 / n, total / n, d1 / n
