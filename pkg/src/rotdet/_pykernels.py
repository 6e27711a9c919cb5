"""Pure-Python reference kernels.

These mirror ``_kernels.pyx`` operation for operation so both backends
produce the same floating-point results for IoU and assignment. The
RoIAlign fallback is vectorized with numpy instead of looped.
"""
import math

import numpy as np

HALF_PI = 0.5 * math.pi


def normalize_angle(theta):
    """Wrap an angle into [-pi/2, pi/2); in-range angles are returned unchanged."""
    if -HALF_PI <= theta < HALF_PI:
        return theta
    t = math.fmod(theta + HALF_PI, math.pi)
    if t < 0.0:
        t += math.pi
    t -= HALF_PI
    # fmod can land exactly on pi/2 after the shift back
    if t >= HALF_PI:
        t -= math.pi
    return t


def box_corners(cx, cy, w, h, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    hw = 0.5 * w
    hh = 0.5 * h
    out = []
    for u, v in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
        out.append((cx + u * c - v * s, cy + u * s + v * c))
    return out


def polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW ``clip``.

    Crossing points are placed with the parametric form built from signed
    edge distances, so the division only happens on a strict sign change.
    """
    out = list(subject)
    m = len(clip)
    for k in range(m):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % m]
        ex = bx - ax
        ey = by - ay
        inp = out
        out = []
        n = len(inp)
        px, py = inp[n - 1]
        dp = ex * (py - ay) - ey * (px - ax)
        for i in range(n):
            qx, qy = inp[i]
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0 and dq > 0.0:
                    t = dp / (dp - dq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif dp >= 0.0:
                if dp > 0.0:
                    t = dp / (dp - dq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, dp = qx, qy, dq
    return out


def intersection_area(p, q):
    # canonical argument order makes the result exactly symmetric
    if tuple(p) > tuple(q):
        p, q = q, p
    if polygon_area(p) <= 0.0 or polygon_area(q) <= 0.0:
        return 0.0
    area = polygon_area(clip_polygon(p, q))
    return area if area > 0.0 else 0.0


def box_iou(a, b):
    a = tuple(float(v) for v in a)
    b = tuple(float(v) for v in b)
    if a == b:
        return 1.0
    if a > b:
        a, b = b, a
    inter = intersection_area(box_corners(*a), box_corners(*b))
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    if iou > 1.0:
        return 1.0
    return iou


def pairwise_iou(boxes_a, boxes_b):
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    out = np.empty((boxes_a.shape[0], boxes_b.shape[0]))
    for i in range(boxes_a.shape[0]):
        for j in range(boxes_b.shape[0]):
            out[i, j] = box_iou(boxes_a[i], boxes_b[j])
    return out


def linear_assignment(cost):
    """Min-cost assignment of every column to a distinct row.

    ``cost`` is [rows, cols] with rows >= cols. Returns, for each column,
    the chosen row. Shortest augmenting paths with potentials; scans
    run in ascending row order with strict comparisons, so ties resolve
    toward the lowest row index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return np.zeros(0, dtype=np.int64)
    c = cost.tolist()
    inf = math.inf
    # 1-indexed: columns play the role of "workers", rows of "jobs"
    u = [0.0] * (n_cols + 1)
    v = [0.0] * (n_rows + 1)
    owner = [0] * (n_rows + 1)
    way = [0] * (n_rows + 1)
    for col in range(1, n_cols + 1):
        owner[0] = col
        j0 = 0
        minv = [inf] * (n_rows + 1)
        used = [False] * (n_rows + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta = inf
            j1 = 0
            ui0 = u[i0]
            for j in range(1, n_rows + 1):
                if not used[j]:
                    cur = c[j - 1][i0 - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n_rows + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    result = np.empty(n_cols, dtype=np.int64)
    for j in range(1, n_rows + 1):
        if owner[j] != 0:
            result[owner[j] - 1] = j - 1
    return result


def _sample_points(box, out_size, sampling):
    cx, cy, w, h, theta = (float(x) for x in box)
    c = math.cos(theta)
    s = math.sin(theta)
    frac = (np.arange(sampling) + 0.5) / sampling
    grid = (np.arange(out_size)[:, None] + frac[None, :]).reshape(-1)
    u = -0.5 * w + grid * (w / out_size)
    v = -0.5 * h + grid * (h / out_size)
    uu = u[None, :]
    vv = v[:, None]
    # pixel (r, c) has its center at (c + 0.5, r + 0.5)
    x = cx + uu * c - vv * s - 0.5
    y = cy + uu * s + vv * c - 0.5
    return x, y


def _bilinear_taps(x, y, height, width):
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            taps.append((np.where(ok, yy, 0), np.where(ok, xx, 0), np.where(ok, wy * wx, 0.0)))
    return taps


def roi_align_rotated(features, boxes, out_size, sampling=1):
    features = np.asarray(features, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    n_ch, height, width = features.shape
    out = np.zeros((boxes.shape[0], n_ch, out_size, out_size))
    for n in range(boxes.shape[0]):
        x, y = _sample_points(boxes[n], out_size, sampling)
        acc = np.zeros((n_ch,) + x.shape)
        for yy, xx, wt in _bilinear_taps(x, y, height, width):
            acc += features[:, yy, xx] * wt
        acc = acc.reshape(n_ch, out_size, sampling, out_size, sampling)
        out[n] = acc.mean(axis=(2, 4))
    return out


def roi_align_rotated_backward(grad_out, boxes, feature_shape, sampling=1):
    """Adjoint of :func:`roi_align_rotated` with respect to the features."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    n_ch, height, width = feature_shape
    out_size = grad_out.shape[-1]
    grad = np.zeros(feature_shape)
    scale = 1.0 / (sampling * sampling)
    for n in range(boxes.shape[0]):
        x, y = _sample_points(boxes[n], out_size, sampling)
        g = np.repeat(np.repeat(grad_out[n], sampling, axis=1), sampling, axis=2) * scale
        for yy, xx, wt in _bilinear_taps(x, y, height, width):
            flat = (yy * width + xx).reshape(-1)
            contrib = (g * wt[None]).reshape(n_ch, -1)
            for ch in range(n_ch):
                grad[ch] += np.bincount(flat, weights=contrib[ch], minlength=height * width).reshape(height, width)
    return grad
