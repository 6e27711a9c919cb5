"""Independent reference computations used to cross-check the kernels.

Nothing here shares code with the polygon clipper or the assignment
solver: IoU is estimated by point sampling and assignment by enumeration.
"""
import itertools
import math

import numpy as np


def _inside(points, box):
    cx, cy, w, h, theta = (float(v) for v in box)
    c, s = math.cos(theta), math.sin(theta)
    dx = points[:, 0] - cx
    dy = points[:, 1] - cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * w) & (np.abs(v) <= 0.5 * h)


def _extent(box):
    cx, cy, w, h, theta = (float(v) for v in box)
    r = 0.5 * math.hypot(w, h)
    return cx - r, cx + r, cy - r, cy + r


def monte_carlo_iou(a, b, samples=1_000_000, seed=0):
    """IoU of two rotated boxes by stratified sampling of their joint bounding square.

    One jittered point per cell of a sqrt(samples) x sqrt(samples) grid.
    """
    rng = np.random.default_rng(seed)
    side = max(1, int(round(math.sqrt(samples))))
    ea, eb = _extent(a), _extent(b)
    x0, x1 = min(ea[0], eb[0]), max(ea[1], eb[1])
    y0, y1 = min(ea[2], eb[2]), max(ea[3], eb[3])
    gx = (np.arange(side)[None, :] + rng.random((side, side))) / side
    gy = (np.arange(side)[:, None] + rng.random((side, side))) / side
    pts = np.stack([x0 + gx.ravel() * (x1 - x0), y0 + gy.ravel() * (y1 - y0)], axis=-1)
    ina = _inside(pts, a)
    inb = _inside(pts, b)
    union = np.count_nonzero(ina | inb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ina & inb) / union


def brute_force_assignment(cost):
    """Minimum total cost over every injective gt -> query map, by enumeration.

    Returns ``(total, rows)`` where ``rows[j]`` is the query matched to gt j.
    The winning total is re-summed in gt order so it is comparable exactly.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, g = cost.shape
    if g == 0:
        return 0.0, ()
    perms = np.array(list(itertools.permutations(range(n), g)), dtype=np.int64)
    totals = cost[perms, np.arange(g)].sum(axis=1)
    rows = tuple(int(r) for r in perms[int(np.argmin(totals))])
    return float(sum(cost[r, c] for c, r in enumerate(rows))), rows
