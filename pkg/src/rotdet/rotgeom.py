"""Rotated-rectangle geometry and rotated RoIAlign pooling.

Boxes are ``(cx, cy, w, h, theta)`` with theta in radians, measured from
the x-axis to the w-edge and stored wrapped into [-pi/2, pi/2). Array
forms use shape [..., 5] in the same order.
"""
from dataclasses import dataclass

import numpy as np

from . import _backend, _pykernels
from ._pykernels import normalize_angle
from .errors import ConfigError, DimensionError

MIN_SIDE = 1e-9

__all__ = [
    "RotatedBox",
    "ConvexPolygon",
    "normalize_angle",
    "normalize_angles",
    "box_to_corners",
    "convex_intersection_area",
    "rotated_iou",
    "pairwise_iou",
    "rotated_roi_align",
    "rotated_roi_align_batch",
    "rotated_roi_align_backward",
]


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h", "theta"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"box field {name} is not finite: {v}")
            object.__setattr__(self, name, v)
        if self.w < MIN_SIDE or self.h < MIN_SIDE:
            raise ValueError(f"degenerate box sides w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (5,):
            raise DimensionError(f"box vector must have 5 entries, got shape {arr.shape}")
        return cls(*arr.tolist())

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h, self.theta])

    def to_list(self):
        return [self.cx, self.cy, self.w, self.h, self.theta]

    @property
    def area(self):
        return self.w * self.h


def normalize_angles(theta):
    """Vectorized :func:`normalize_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    t = np.mod(theta + 0.5 * np.pi, np.pi) - 0.5 * np.pi
    t = np.where(t >= 0.5 * np.pi, t - np.pi, t)
    return np.where((theta >= -0.5 * np.pi) & (theta < 0.5 * np.pi), theta, t)


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: tuple  # ((x, y), ...) counter-clockwise

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple((float(x), float(y)) for x, y in self.vertices))

    @property
    def area(self):
        return abs(_pykernels.polygon_area(list(self.vertices)))

    def centroid_of_vertices(self):
        return np.mean(np.asarray(self.vertices), axis=0)


def _as_box_array(b):
    if isinstance(b, RotatedBox):
        return b.as_array()
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape != (5,):
        raise DimensionError(f"box vector must have 5 entries, got shape {arr.shape}")
    return arr


def box_to_corners(box):
    """The four corners of ``box``, counter-clockwise."""
    b = _as_box_array(box)
    return ConvexPolygon(tuple(_pykernels.box_corners(*b.tolist())))


def convex_intersection_area(p, q):
    """Area of the intersection of two convex CCW polygons."""
    pv = list(p.vertices if isinstance(p, ConvexPolygon) else p)
    qv = list(q.vertices if isinstance(q, ConvexPolygon) else q)
    if len(pv) < 3 or len(qv) < 3:
        return 0.0
    return _pykernels.intersection_area(
        [tuple(map(float, v)) for v in pv], [tuple(map(float, v)) for v in qv]
    )


def rotated_iou(a, b, backend=None):
    """Intersection over union of two rotated boxes; exactly symmetric."""
    k = _backend.get(backend)
    return float(k.box_iou(_as_box_array(a), _as_box_array(b)))


def pairwise_iou(boxes_a, boxes_b, backend=None):
    """IoU matrix [len(a), len(b)] between two box arrays [.., 5]."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    return _backend.get(backend).pairwise_iou(a, b)


def _check_pool_args(features, out_size, sampling):
    if int(out_size) < 1:
        raise ConfigError(f"output size must be >= 1, got {out_size}")
    if int(sampling) < 1:
        raise ConfigError(f"sampling must be >= 1, got {sampling}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise DimensionError(f"features must be [C, H, W], got shape {features.shape}")
    return features


def rotated_roi_align_batch(features, boxes, out_size, sampling=1, backend=None):
    """Pool [N, C, K, K] from ``features`` [C, H, W] for each box in ``boxes`` [N, 5].

    The K x K cells tile the box in its own frame (u along w, v along h);
    each cell averages ``sampling``^2 bilinear samples at sub-cell centers.
    Samples falling outside the map read zero.
    """
    features = _check_pool_args(features, out_size, sampling)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    return _backend.get(backend).roi_align_rotated(features, boxes, int(out_size), int(sampling))


def rotated_roi_align(features, box, out_size, sampling=1, backend=None):
    """Single-box form of :func:`rotated_roi_align_batch`, shape [C, K, K]."""
    return rotated_roi_align_batch(features, _as_box_array(box)[None], out_size, sampling, backend)[0]


def rotated_roi_align_backward(grad_out, boxes, feature_shape, sampling=1, backend=None):
    """Gradient of ``sum(grad_out * pooled)`` with respect to the feature map."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 3:
        grad_out = grad_out[None]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    return _backend.get(backend).roi_align_rotated_backward(grad_out, boxes, tuple(feature_shape), int(sampling))
