"""Stage-wise bipartite matching between query predictions and ground truth.

Cost of matching prediction i to ground truth j::

    C[i, j] = l_cls * (-p_i[y_j]) + l_box * L1(norm(b_i), norm(bgt_j)) + l_iou * (1 - IoU(b_i, bgt_j))

where ``norm`` divides centers and sizes by the image extent and the
wrapped angle difference by pi/2.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _backend, rotgeom
from .errors import DimensionError, InfeasibleError, NumericError
from .tensorcore import softmax

HALF_PI = 0.5 * np.pi


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    box: float = 5.0
    iou: float = 5.0

    def __post_init__(self):
        for name in ("cls", "box", "iou"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"cost weight {name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def scaled(self, factor):
        return CostWeights(self.cls * factor, self.box * factor, self.iou * factor)


@dataclass
class GroundTruthSet:
    labels: np.ndarray  # [G] int
    boxes: np.ndarray  # [G, 5]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        if self.labels.shape[0] != self.boxes.shape[0]:
            raise DimensionError(f"{self.labels.shape[0]} labels but {self.boxes.shape[0]} boxes")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class Predictions:
    """One stage's outputs: class logits [N, K_cls + 1] and boxes [N, 5]."""

    class_scores: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        if self.class_scores.ndim != 2 or self.class_scores.shape[0] != self.boxes.shape[0]:
            raise DimensionError(
                f"scores {self.class_scores.shape} and boxes {self.boxes.shape} disagree on N"
            )

    def __len__(self):
        return self.boxes.shape[0]

    def probabilities(self):
        return softmax(self.class_scores, axis=-1)


@dataclass
class Assignment:
    pairs: list  # [(query, gt)], sorted by gt
    total_cost: float
    pair_costs: list = field(default_factory=list)

    def query_for_gt(self):
        out = np.full(len(self.pairs), -1, dtype=np.int64)
        for i, j in self.pairs:
            out[j] = i
        return out

    def to_triples(self):
        return [[int(i), int(j), float(c)] for (i, j), c in zip(self.pairs, self.pair_costs)]


def _probs(preds):
    if hasattr(preds, "probabilities"):
        return preds.probabilities()
    return softmax(preds.class_scores, axis=-1)


def cls_cost(p, y):
    """Negative probability of class ``y``; background (last entry) is not a valid target."""
    p = np.asarray(p, dtype=np.float64)
    y = int(y)
    if not 0 <= y < p.shape[-1] - 1:
        raise IndexError(f"class index {y} outside [0, {p.shape[-1] - 1})")
    return -float(p[y])


def wrap_angle_diff(d):
    """Wrap angle differences into (-pi/2, pi/2]."""
    d = np.asarray(d, dtype=np.float64)
    return d - np.pi * np.ceil((d - HALF_PI) / np.pi)


def _normalized(boxes, extent):
    w_img, h_img = extent
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    return np.stack([b[:, 0] / w_img, b[:, 1] / h_img, b[:, 2] / w_img, b[:, 3] / h_img], axis=-1)


def box_cost(b, b_gt, extent=(1.0, 1.0)):
    b = rotgeom._as_box_array(b)
    g = rotgeom._as_box_array(b_gt)
    return float(pairwise_box_cost(b[None], g[None], extent)[0, 0])


def pairwise_box_cost(boxes, gt_boxes, extent=(1.0, 1.0)):
    """[N, G] normalized L1 box cost."""
    a = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5)
    lin = np.abs(_normalized(a, extent)[:, None, :] - _normalized(g, extent)[None, :, :]).sum(-1)
    ang = np.abs(wrap_angle_diff(a[:, None, 4] - g[None, :, 4])) / HALF_PI
    return lin + ang


def iou_cost(b, b_gt, backend=None):
    return 1.0 - rotgeom.rotated_iou(b, b_gt, backend)


def cost_terms(preds, gts, extent=(1.0, 1.0), backend=None):
    """Unweighted (cls, box, iou) cost matrices, each [N, G]."""
    n_cls = preds.class_scores.shape[1] - 1
    if len(gts) and (gts.labels.min() < 0 or gts.labels.max() >= n_cls):
        raise IndexError(f"ground-truth labels must lie in [0, {n_cls})")
    probs = _probs(preds)
    c_cls = -probs[:, gts.labels]
    c_box = pairwise_box_cost(preds.boxes, gts.boxes, extent)
    c_iou = 1.0 - rotgeom.pairwise_iou(preds.boxes, gts.boxes, backend)
    return c_cls, c_box, c_iou


def combine(weights, c_cls, c_box, c_iou):
    return weights.cls * c_cls + weights.box * c_box + weights.iou * c_iou


def cost_matrix(preds, gts, weights=CostWeights(), extent=(1.0, 1.0), backend=None):
    if len(preds) < len(gts):
        raise InfeasibleError(f"{len(preds)} queries cannot cover {len(gts)} ground-truth objects")
    return combine(weights, *cost_terms(preds, gts, extent, backend))


def hungarian(cost, backend=None):
    """Exact minimum-cost assignment of every column (gt) to a distinct row (query)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, g = cost.shape
    if n < g:
        raise InfeasibleError(f"{n} queries cannot cover {g} ground-truth objects")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix has non-finite entries")
    rows = _backend.get(backend).linear_assignment(cost)
    pairs = [(int(rows[j]), j) for j in range(g)]
    pair_costs = [float(cost[i, j]) for i, j in pairs]
    return Assignment(pairs=pairs, total_cost=float(sum(pair_costs)), pair_costs=pair_costs)


def stage_wise_match(trajectory, gts, weights=CostWeights(), extent=(1.0, 1.0), backend=None):
    """Independent Hungarian matching at every stage."""
    return [hungarian(cost_matrix(p, gts, weights, extent, backend), backend) for p in trajectory]


@dataclass(frozen=True)
class LossTerms:
    total: float
    cls: float
    box: float
    iou: float


def smooth_l1(x, beta=1.0):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def detection_loss(preds, gts, assignment, weights=CostWeights(), extent=(1.0, 1.0), backend=None):
    """Weighted set-prediction loss for one stage.

    Classification is cross-entropy averaged over all N queries, with
    unmatched queries targeting background. Box (Smooth-L1, beta=1, on the
    same normalized 5-vector as the box cost) and IoU (1 - IoU) terms are
    summed over matched pairs and divided by max(|G|, 1).
    """
    n = len(preds)
    bg = preds.class_scores.shape[1] - 1
    targets = np.full(n, bg, dtype=np.int64)
    for i, j in assignment.pairs:
        targets[i] = gts.labels[j]
    logits = preds.class_scores
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    l_cls = float(-log_probs[np.arange(n), targets].mean())

    denom = max(len(gts), 1)
    l_box = 0.0
    l_iou = 0.0
    for i, j in assignment.pairs:
        a = preds.boxes[i]
        g = gts.boxes[j]
        diff = np.append(
            _normalized(a, extent)[0] - _normalized(g, extent)[0],
            wrap_angle_diff(a[4] - g[4]) / HALF_PI,
        )
        l_box += float(smooth_l1(diff).sum())
        l_iou += 1.0 - rotgeom.rotated_iou(a, g, backend)
    l_box /= denom
    l_iou /= denom
    total = weights.cls * l_cls + weights.box * l_box + weights.iou * l_iou
    return LossTerms(total=total, cls=l_cls, box=l_box, iou=l_iou)
