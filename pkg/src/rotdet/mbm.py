"""Momentum bipartite matching.

Each cost term keeps an exponential moving average across decoding
stages. The smoothing factor is per query: for the class term it grows
with the KL divergence between the query's current and previous class
distributions, for the box and IoU terms with one minus the IoU between
its current and previous boxes. A query whose prediction jumped therefore
leans on its history; a stable query follows its current cost.
"""
from dataclasses import dataclass, replace

import numpy as np

from . import rotgeom
from .errors import ConfigError, StateError, UsageError
from .matching import CostWeights, combine, cost_terms, hungarian

KL_EPS = 1e-12
_ETA_MAX = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class MbmConfig:
    alpha: float = 0.8
    weights: CostWeights = CostWeights()
    fixed_eta: float = None
    # use the previous stage's fresh per-term costs instead of the running averages
    recompute_prev: bool = False

    def __post_init__(self):
        if self.fixed_eta is not None:
            if not 0.0 <= float(self.fixed_eta) < 1.0:
                raise ConfigError(f"fixed_eta must lie in [0, 1), got {self.fixed_eta}")
        elif not float(self.alpha) > 0.0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class MomentumMatchState:
    acc_cls: np.ndarray  # [N, G]
    acc_box: np.ndarray
    acc_iou: np.ndarray
    prev_scores: np.ndarray = None  # [N, K_cls + 1] probabilities
    prev_boxes: np.ndarray = None  # [N, 5]
    prev_terms: tuple = None  # fresh (cls, box, iou) costs of the previous stage
    stage: int = 0

    @classmethod
    def initial(cls, num_queries, num_gts):
        z = np.zeros((num_queries, num_gts))
        return cls(acc_cls=z, acc_box=z.copy(), acc_iou=z.copy())

    @property
    def shape(self):
        return self.acc_cls.shape


def kl_divergence(p, q):
    """KL(p || q) per row, after clamping both to KL_EPS and renormalizing."""
    p = np.maximum(np.asarray(p, dtype=np.float64), KL_EPS)
    q = np.maximum(np.asarray(q, dtype=np.float64), KL_EPS)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    return np.maximum((p * (np.log(p) - np.log(q))).sum(axis=-1), 0.0)


def eta_from_kl(kl, alpha):
    if not float(alpha) > 0.0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    return np.minimum(-np.expm1(-alpha * np.asarray(kl, dtype=np.float64)), _ETA_MAX)


def eta_cls(p_s, p_prev, alpha):
    """Class smoothing factor 1 - exp(-alpha * KL(p_s || p_prev)), in [0, 1)."""
    return float(eta_from_kl(kl_divergence(p_s, p_prev), alpha))


def eta_loc(b_s, b_prev, backend=None):
    """Localization smoothing factor 1 - IoU(b_s, b_prev), in [0, 1]."""
    return 1.0 - rotgeom.rotated_iou(b_s, b_prev, backend)


def row_etas(probs, boxes, state, cfg, backend=None):
    """Per-query (eta_cls, eta_loc) vectors for the stage following ``state``."""
    n = probs.shape[0]
    if cfg.fixed_eta is not None:
        e = np.full(n, float(cfg.fixed_eta))
        return e, e.copy()
    if state.stage == 0:
        # no earlier prediction to compare against
        return np.zeros(n), np.zeros(n)
    e_cls = eta_from_kl(kl_divergence(probs, state.prev_scores), cfg.alpha)
    ious = np.array([rotgeom.rotated_iou(boxes[i], state.prev_boxes[i], backend) for i in range(n)])
    return e_cls, 1.0 - ious


def momentum_cost_update(state, preds, gts, cfg=MbmConfig(), extent=(1.0, 1.0), backend=None):
    """Fold one stage's costs into the running averages.

    Returns ``(combined_cost [N, G], new_state)``; ``state`` is not modified.
    """
    terms = cost_terms(preds, gts, extent, backend)
    if terms[0].shape != state.shape:
        raise StateError(f"stage cost shape {terms[0].shape} != state shape {state.shape}")
    probs = preds.probabilities()
    e_cls, e_loc = row_etas(probs, preds.boxes, state, cfg, backend)
    if cfg.recompute_prev and state.prev_terms is not None:
        hist = state.prev_terms
    else:
        hist = (state.acc_cls, state.acc_box, state.acc_iou)
    e_cls = e_cls[:, None]
    e_loc = e_loc[:, None]
    acc_cls = e_cls * hist[0] + (1.0 - e_cls) * terms[0]
    acc_box = e_loc * hist[1] + (1.0 - e_loc) * terms[1]
    acc_iou = e_loc * hist[2] + (1.0 - e_loc) * terms[2]
    new_state = replace(
        state,
        acc_cls=acc_cls,
        acc_box=acc_box,
        acc_iou=acc_iou,
        prev_scores=probs,
        prev_boxes=np.array(preds.boxes, dtype=np.float64),
        prev_terms=terms,
        stage=state.stage + 1,
    )
    return combine(cfg.weights, acc_cls, acc_box, acc_iou), new_state


def momentum_match(trajectory, gts, cfg=MbmConfig(), extent=(1.0, 1.0), backend=None):
    """Hungarian matching on the momentum cost at every stage.

    Returns ``(assignments, combined_costs)``, one entry per stage.
    """
    if not trajectory:
        return [], []
    state = MomentumMatchState.initial(len(trajectory[0]), len(gts))
    assignments, costs = [], []
    for preds in trajectory:
        cost, state = momentum_cost_update(state, preds, gts, cfg, extent, backend)
        assignments.append(hungarian(cost, backend))
        costs.append(cost)
    return assignments, costs


def identity_shift_rate(assignments):
    """Fraction of (stage transition, gt) pairs whose matched query changes."""
    if len(assignments) < 2:
        raise UsageError("identity shift needs at least two stages")
    per_stage = [a.query_for_gt() for a in assignments]
    g = per_stage[0].shape[0]
    if any(q.shape[0] != g for q in per_stage):
        raise UsageError("assignments cover different numbers of ground-truth objects")
    if g == 0:
        return 0.0
    changes = sum(int(np.count_nonzero(a != b)) for a, b in zip(per_stage[:-1], per_stage[1:]))
    return changes / ((len(per_stage) - 1) * g)
