"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np


def conv_reference(x, weights, biases):
    """Same-size 2-D cross-correlation with zero padding, written as loops."""
    h, w, cin = x.shape
    cout, _, kh, kw = weights.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, cout))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                acc = float(biases[o])
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            yy, xx = i + u - ph, j + v - pw
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += float(weights[o, c, u, v]) * float(x[yy, xx, c])
                out[i, j, o] = acc
    return out


def pool_reference(x):
    """2x2 stride-1 max pool, zero padding past the bottom/right edge.

    The winning cell is the first maximum in reading order.
    """
    h, w, c = x.shape
    out = np.zeros_like(x)
    arg = np.zeros(x.shape, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            for k in range(c):
                cells = []
                for dy in (0, 1):
                    for dx in (0, 1):
                        yy, xx = i + dy, j + dx
                        cells.append(x[yy, xx, k] if yy < h and xx < w else 0.0)
                best = 0
                for idx in range(1, 4):
                    if cells[idx] > cells[best]:
                        best = idx
                out[i, j, k] = cells[best]
                arg[i, j, k] = best
    return out, arg


def threshold_reference(response):
    peak = max(max(row) for row in response.tolist())
    if peak <= 0:
        return []
    hits = []
    for y, row in enumerate(response.tolist()):
        for x, v in enumerate(row):
            if v >= peak / 2:
                hits.append((x, y))
    return hits


def box_iou_reference(a, b, size=4):
    """IoU of axis-aligned squares ``[x - s/2, x + s/2) x [y - s/2, y + s/2)``."""
    half = size / 2
    ax0, ay0, ax1, ay1 = a[0] - half, a[1] - half, a[0] + half, a[1] + half
    bx0, by0, bx1, by1 = b[0] - half, b[1] - half, b[0] + half, b[1] + half
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = size * size * 2 - inter
    return inter / union


def nms_reference(dets, iou_threshold=0.5, size=4):
    """Quadratic greedy NMS over ``(x, y, score)`` triples."""
    order = sorted(dets, key=lambda d: (-d[2], d[1], d[0]))
    kept = []
    for d in order:
        if all(box_iou_reference(d, k, size) <= iou_threshold for k in kept):
            kept.append(d)
    return kept
