# cython: language_level=3
"""Compiled kernels: rotated-box IoU, linear assignment, rotated RoIAlign.

Arithmetic is kept in the same order as ``_pykernels`` so IoU values and
assignments agree bit for bit between backends.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF MAXV = 24


cdef inline void _corners(double cx, double cy, double w, double h, double theta,
                          double* xs, double* ys) noexcept nogil:
    cdef double c = cos(theta)
    cdef double s = sin(theta)
    cdef double hw = 0.5 * w
    cdef double hh = 0.5 * h
    cdef double us[4]
    cdef double vs[4]
    cdef int k
    us[0] = -hw; vs[0] = -hh
    us[1] = hw; vs[1] = -hh
    us[2] = hw; vs[2] = hh
    us[3] = -hw; vs[3] = hh
    for k in range(4):
        xs[k] = cx + us[k] * c - vs[k] * s
        ys[k] = cy + us[k] * s + vs[k] * c


cdef inline double _area(int n, double* xs, double* ys) noexcept nogil:
    cdef double acc = 0.0
    cdef int k, k1
    if n < 3:
        return 0.0
    for k in range(n):
        k1 = (k + 1) % n
        acc += xs[k] * ys[k1] - xs[k1] * ys[k]
    return 0.5 * acc


cdef int _clip(int n, double* sx, double* sy, int m, double* cxs, double* cys,
               double* ox, double* oy) noexcept nogil:
    cdef double bufx[MAXV]
    cdef double bufy[MAXV]
    cdef double ax, ay, bx, by, ex, ey, px, py, qx, qy, dp, dq, t
    cdef int k, i, nin, nout
    nout = n
    for i in range(n):
        ox[i] = sx[i]
        oy[i] = sy[i]
    for k in range(m):
        if nout == 0:
            break
        ax = cxs[k]
        ay = cys[k]
        bx = cxs[(k + 1) % m]
        by = cys[(k + 1) % m]
        ex = bx - ax
        ey = by - ay
        nin = nout
        for i in range(nin):
            bufx[i] = ox[i]
            bufy[i] = oy[i]
        nout = 0
        px = bufx[nin - 1]
        py = bufy[nin - 1]
        dp = ex * (py - ay) - ey * (px - ax)
        for i in range(nin):
            qx = bufx[i]
            qy = bufy[i]
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0 and dq > 0.0:
                    t = dp / (dp - dq)
                    ox[nout] = px + t * (qx - px)
                    oy[nout] = py + t * (qy - py)
                    nout += 1
                ox[nout] = qx
                oy[nout] = qy
                nout += 1
            elif dp >= 0.0:
                if dp > 0.0:
                    t = dp / (dp - dq)
                    ox[nout] = px + t * (qx - px)
                    oy[nout] = py + t * (qy - py)
                    nout += 1
            px = qx
            py = qy
            dp = dq
    return nout


cdef inline bint _lex_greater(int n, double* a, double* b) noexcept nogil:
    cdef int k
    for k in range(n):
        if a[k] > b[k]:
            return True
        if a[k] < b[k]:
            return False
    return False


cdef double _box_iou(double* a, double* b) noexcept nogil:
    cdef double* tmp
    cdef double pa[8]
    cdef double pb[8]
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef double ox[MAXV]
    cdef double oy[MAXV]
    cdef double inter, union, iou
    cdef int k, n
    cdef bint same = True
    for k in range(5):
        if a[k] != b[k]:
            same = False
    if same:
        return 1.0
    if _lex_greater(5, a, b):
        tmp = a
        a = b
        b = tmp
    _corners(a[0], a[1], a[2], a[3], a[4], ax, ay)
    _corners(b[0], b[1], b[2], b[3], b[4], bx, by)
    for k in range(4):
        pa[2 * k] = ax[k]
        pa[2 * k + 1] = ay[k]
        pb[2 * k] = bx[k]
        pb[2 * k + 1] = by[k]
    if _lex_greater(8, pa, pb):
        if _area(4, bx, by) <= 0.0 or _area(4, ax, ay) <= 0.0:
            inter = 0.0
        else:
            n = _clip(4, bx, by, 4, ax, ay, ox, oy)
            inter = _area(n, ox, oy)
    else:
        if _area(4, ax, ay) <= 0.0 or _area(4, bx, by) <= 0.0:
            inter = 0.0
        else:
            n = _clip(4, ax, ay, 4, bx, by, ox, oy)
            inter = _area(n, ox, oy)
    if not inter > 0.0:
        inter = 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    if iou > 1.0:
        return 1.0
    return iou


def box_iou(a, b):
    cdef double av[5]
    cdef double bv[5]
    cdef int k
    for k in range(5):
        av[k] = float(a[k])
        bv[k] = float(b[k])
    return _box_iou(av, bv)


def pairwise_iou(boxes_a, boxes_b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] A = np.ascontiguousarray(
        np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] B = np.ascontiguousarray(
        np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t na = A.shape[0]
    cdef Py_ssize_t nb = B.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] out = np.empty((na, nb))
    cdef double* pa = <double*> A.data
    cdef double* pb = <double*> B.data
    cdef double* po = <double*> out.data
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(na):
            for j in range(nb):
                po[i * nb + j] = _box_iou(pa + 5 * i, pb + 5 * j)
    return out


def linear_assignment(cost):
    """Min-cost assignment of every column to a distinct row (rows >= cols)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] C = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n_rows = C.shape[0]
    cdef Py_ssize_t n_cols = C.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] result = np.empty(n_cols, dtype=np.int64)
    if n_cols == 0:
        return result
    cdef double* c = <double*> C.data
    cdef double* u = <double*> malloc((n_cols + 1) * sizeof(double))
    cdef double* v = <double*> malloc((n_rows + 1) * sizeof(double))
    cdef double* minv = <double*> malloc((n_rows + 1) * sizeof(double))
    cdef Py_ssize_t* owner = <Py_ssize_t*> malloc((n_rows + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* way = <Py_ssize_t*> malloc((n_rows + 1) * sizeof(Py_ssize_t))
    cdef char* used = <char*> malloc((n_rows + 1) * sizeof(char))
    cdef Py_ssize_t col, j, j0, j1, i0
    cdef double delta, cur, ui0
    try:
        with nogil:
            for j in range(n_cols + 1):
                u[j] = 0.0
            for j in range(n_rows + 1):
                v[j] = 0.0
                owner[j] = 0
                way[j] = 0
            for col in range(1, n_cols + 1):
                owner[0] = col
                j0 = 0
                for j in range(n_rows + 1):
                    minv[j] = INFINITY
                    used[j] = 0
                while True:
                    used[j0] = 1
                    i0 = owner[j0]
                    delta = INFINITY
                    j1 = 0
                    ui0 = u[i0]
                    for j in range(1, n_rows + 1):
                        if not used[j]:
                            cur = c[(j - 1) * n_cols + (i0 - 1)] - ui0 - v[j]
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
            for j in range(1, n_rows + 1):
                if owner[j] != 0:
                    result[owner[j] - 1] = j - 1
    finally:
        free(u)
        free(v)
        free(minv)
        free(owner)
        free(way)
        free(used)
    return result


cdef inline double _bilinear(double* f, Py_ssize_t height, Py_ssize_t width,
                             double x, double y) noexcept nogil:
    cdef double x0f = floor(x)
    cdef double y0f = floor(y)
    cdef double fx = x - x0f
    cdef double fy = y - y0f
    cdef Py_ssize_t x0 = <Py_ssize_t> x0f
    cdef Py_ssize_t y0 = <Py_ssize_t> y0f
    cdef double acc = 0.0
    if y0 >= 0 and y0 < height:
        if x0 >= 0 and x0 < width:
            acc += f[y0 * width + x0] * ((1.0 - fy) * (1.0 - fx))
        if x0 + 1 >= 0 and x0 + 1 < width:
            acc += f[y0 * width + x0 + 1] * ((1.0 - fy) * fx)
    if y0 + 1 >= 0 and y0 + 1 < height:
        if x0 >= 0 and x0 < width:
            acc += f[(y0 + 1) * width + x0] * (fy * (1.0 - fx))
        if x0 + 1 >= 0 and x0 + 1 < width:
            acc += f[(y0 + 1) * width + x0 + 1] * (fy * fx)
    return acc


cdef inline void _scatter(double* g, Py_ssize_t height, Py_ssize_t width,
                          double x, double y, double val) noexcept nogil:
    cdef double x0f = floor(x)
    cdef double y0f = floor(y)
    cdef double fx = x - x0f
    cdef double fy = y - y0f
    cdef Py_ssize_t x0 = <Py_ssize_t> x0f
    cdef Py_ssize_t y0 = <Py_ssize_t> y0f
    if y0 >= 0 and y0 < height:
        if x0 >= 0 and x0 < width:
            g[y0 * width + x0] += val * ((1.0 - fy) * (1.0 - fx))
        if x0 + 1 >= 0 and x0 + 1 < width:
            g[y0 * width + x0 + 1] += val * ((1.0 - fy) * fx)
    if y0 + 1 >= 0 and y0 + 1 < height:
        if x0 >= 0 and x0 < width:
            g[(y0 + 1) * width + x0] += val * (fy * (1.0 - fx))
        if x0 + 1 >= 0 and x0 + 1 < width:
            g[(y0 + 1) * width + x0 + 1] += val * (fy * fx)


def roi_align_rotated(features, boxes, int out_size, int sampling=1):
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] F = np.ascontiguousarray(features, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] B = np.ascontiguousarray(
        np.asarray(boxes, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t n_ch = F.shape[0]
    cdef Py_ssize_t height = F.shape[1]
    cdef Py_ssize_t width = F.shape[2]
    cdef Py_ssize_t nb = B.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=4, mode="c"] out = np.zeros((nb, n_ch, out_size, out_size))
    cdef double* pf = <double*> F.data
    cdef double* pb = <double*> B.data
    cdef double* po = <double*> out.data
    cdef Py_ssize_t n, ch, iy, ix, sy, sx
    cdef double cx, cy, w, h, c, s, u, v, x, y, acc
    cdef double inv = 1.0 / (sampling * sampling)
    with nogil:
        for n in range(nb):
            cx = pb[5 * n]
            cy = pb[5 * n + 1]
            w = pb[5 * n + 2]
            h = pb[5 * n + 3]
            c = cos(pb[5 * n + 4])
            s = sin(pb[5 * n + 4])
            for iy in range(out_size):
                for ix in range(out_size):
                    for ch in range(n_ch):
                        acc = 0.0
                        for sy in range(sampling):
                            v = -0.5 * h + (iy + (sy + 0.5) / sampling) * (h / out_size)
                            for sx in range(sampling):
                                u = -0.5 * w + (ix + (sx + 0.5) / sampling) * (w / out_size)
                                x = cx + u * c - v * s - 0.5
                                y = cy + u * s + v * c - 0.5
                                acc += _bilinear(pf + ch * height * width, height, width, x, y)
                        po[((n * n_ch + ch) * out_size + iy) * out_size + ix] = acc * inv
    return out


def roi_align_rotated_backward(grad_out, boxes, feature_shape, int sampling=1):
    cdef cnp.ndarray[cnp.float64_t, ndim=4, mode="c"] G = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] B = np.ascontiguousarray(
        np.asarray(boxes, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t n_ch = feature_shape[0]
    cdef Py_ssize_t height = feature_shape[1]
    cdef Py_ssize_t width = feature_shape[2]
    cdef Py_ssize_t nb = B.shape[0]
    cdef int out_size = G.shape[3]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] grad = np.zeros((n_ch, height, width))
    cdef double* pg = <double*> G.data
    cdef double* pb = <double*> B.data
    cdef double* pr = <double*> grad.data
    cdef Py_ssize_t n, ch, iy, ix, sy, sx
    cdef double cx, cy, w, h, c, s, u, v, x, y, val
    cdef double inv = 1.0 / (sampling * sampling)
    with nogil:
        for n in range(nb):
            cx = pb[5 * n]
            cy = pb[5 * n + 1]
            w = pb[5 * n + 2]
            h = pb[5 * n + 3]
            c = cos(pb[5 * n + 4])
            s = sin(pb[5 * n + 4])
            for iy in range(out_size):
                for ix in range(out_size):
                    for ch in range(n_ch):
                        val = pg[((n * n_ch + ch) * out_size + iy) * out_size + ix] * inv
                        for sy in range(sampling):
                            v = -0.5 * h + (iy + (sy + 0.5) / sampling) * (h / out_size)
                            for sx in range(sampling):
                                u = -0.5 * w + (ix + (sx + 0.5) / sampling) * (w / out_size)
                                x = cx + u * c - v * s - 0.5
                                y = cy + u * s + v * c - 0.5
                                _scatter(pr + ch * height * width, height, width, x, y, val)
    return grad
