import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotdet.errors import DimensionError, InfeasibleError, NumericError
from rotdet.matching import (
    CostWeights,
    GroundTruthSet,
    Predictions,
    box_cost,
    cls_cost,
    cost_matrix,
    detection_loss,
    hungarian,
    iou_cost,
    smooth_l1,
    stage_wise_match,
    wrap_angle_diff,
)
from rotdet.oracles import brute_force_assignment
from rotdet.rotgeom import rotated_iou


def onehot_logits(labels, n_cls, scale=1000.0):
    out = np.zeros((len(labels), n_cls + 1))
    out[np.arange(len(labels)), labels] = scale
    return out


def test_cls_cost_examples():
    assert cls_cost([0.2, 0.5, 0.3], 1) == -0.5
    assert cls_cost([1.0, 0.0], 0) == -1.0
    with pytest.raises(IndexError):
        cls_cost([0.2, 0.5, 0.3], 2)  # background is not a target
    with pytest.raises(IndexError):
        cls_cost([0.2, 0.5, 0.3], -1)


def test_box_cost_examples():
    assert box_cost((1, 2, 3, 4, 0.1), (1, 2, 3, 4, 0.1)) == 0.0
    assert box_cost((10, 0, 4, 4, 0), (0, 0, 4, 4, 0), extent=(20, 10)) == pytest.approx(0.5)
    assert box_cost((0, 0, 1, 1, 0.25), (0, 0, 1, 1, -0.25)) == pytest.approx(0.5 / (math.pi / 2))
    # nearly opposite ends of the angle range are close after wrapping
    assert box_cost((0, 0, 1, 1, 1.5), (0, 0, 1, 1, -1.5)) == pytest.approx((math.pi - 3) / (math.pi / 2))


def test_wrap_angle_range_and_continuity():
    d = np.linspace(-7, 7, 20001)
    w = wrap_angle_diff(d)
    assert np.all((w > -math.pi / 2) & (w <= math.pi / 2 + 1e-15))
    np.testing.assert_allclose(np.cos(2 * w), np.cos(2 * d), atol=1e-12)
    assert wrap_angle_diff(math.pi / 2) == pytest.approx(math.pi / 2)
    assert wrap_angle_diff(-math.pi / 2) == pytest.approx(math.pi / 2)
    # |wrap| is continuous: no jumps bigger than the grid spacing
    assert np.max(np.abs(np.diff(np.abs(w)))) <= (d[1] - d[0]) * (1 + 1e-9)


def test_iou_cost_example():
    assert iou_cost((0, 0, 1, 1, 0), (0.5, 0, 1, 1, 0)) == pytest.approx(2 / 3)


def test_cost_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(cls=-1)
    with pytest.raises(ValueError):
        CostWeights(box=float("nan"))
    assert CostWeights().scaled(2.0) == CostWeights(4, 10, 10)


def test_cost_matrix_no_gts():
    preds = Predictions(np.zeros((3, 4)), np.tile([1, 1, 1, 1, 0.0], (3, 1)))
    gts = GroundTruthSet(np.zeros(0, dtype=int), np.zeros((0, 5)))
    assert cost_matrix(preds, gts).shape == (3, 0)
    a = hungarian(cost_matrix(preds, gts))
    assert a.pairs == [] and a.total_cost == 0.0


def test_cost_matrix_perfect_prediction():
    boxes = np.array([[5, 5, 4, 2, 0.3], [20, 8, 3, 3, -1.0]])
    labels = np.array([1, 0])
    C = cost_matrix(Predictions(onehot_logits(labels, 3), boxes), GroundTruthSet(labels, boxes), extent=(32, 32))
    np.testing.assert_allclose(np.diag(C), -2.0, atol=1e-12)
    assert np.all(C[~np.eye(2, dtype=bool)] > -2.0)


def test_cost_matrix_term_oracle(rng):
    n, g, k = 5, 3, 4
    w = CostWeights(1.5, 3.0, 0.5)
    logits = rng.normal(size=(n, k + 1))
    boxes = np.c_[rng.uniform(0, 30, (n, 2)), rng.uniform(2, 10, (n, 2)), rng.uniform(-1.5, 1.5, n)]
    gboxes = np.c_[rng.uniform(0, 30, (g, 2)), rng.uniform(2, 10, (g, 2)), rng.uniform(-1.5, 1.5, g)]
    labels = rng.integers(0, k, g)
    preds = Predictions(logits, boxes)
    C = cost_matrix(preds, GroundTruthSet(labels, gboxes), w, extent=(30, 40))
    for i in range(n):
        p = np.exp(logits[i]) / np.exp(logits[i]).sum()
        for j in range(g):
            expect = (
                w.cls * cls_cost(p, labels[j])
                + w.box * box_cost(boxes[i], gboxes[j], (30, 40))
                + w.iou * iou_cost(boxes[i], gboxes[j])
            )
            assert C[i, j] == pytest.approx(expect, abs=1e-12)


def test_cost_matrix_errors():
    preds = Predictions(np.zeros((1, 3)), np.array([[1, 1, 1, 1, 0.0]]))
    with pytest.raises(InfeasibleError):
        cost_matrix(preds, GroundTruthSet([0, 1], np.tile([1, 1, 1, 1, 0.0], (2, 1))))
    with pytest.raises(IndexError):
        cost_matrix(preds, GroundTruthSet([2], np.array([[1, 1, 1, 1, 0.0]])))
    with pytest.raises(DimensionError):
        GroundTruthSet([0, 1], np.zeros((1, 5)))
    with pytest.raises(DimensionError):
        Predictions(np.zeros((2, 3)), np.zeros((3, 5)))


# ---------------------------------------------------------------- assignment


def test_hungarian_examples(backend):
    a = hungarian(np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]), backend)
    assert a.pairs == [(1, 0), (0, 1), (2, 2)] and a.total_cost == 5.0
    a = hungarian(np.array([[1.0], [0.5], [2.0]]), backend)
    assert a.pairs == [(1, 0)]
    assert a.to_triples() == [[1, 0, 0.5]]
    assert list(a.query_for_gt()) == [1]


def test_hungarian_ties_are_deterministic(backend):
    a = hungarian(np.zeros((4, 3)), backend)
    assert a.pairs == [(0, 0), (1, 1), (2, 2)]


@pytest.mark.parametrize("seed", range(5))
def test_hungarian_matches_brute_force(seed, backend):
    rng = np.random.default_rng(seed)
    for _ in range(40):
        n = int(rng.integers(1, 8))
        g = int(rng.integers(0, n + 1))
        cost = rng.uniform(-1, 1, (n, g))
        if rng.random() < 0.3:
            cost = np.round(cost * 3)  # many ties
        best, _ = brute_force_assignment(cost)
        a = hungarian(cost, backend)
        assert a.total_cost == best
        assert len({i for i, _ in a.pairs}) == g


def test_hungarian_errors(backend):
    with pytest.raises(NumericError):
        hungarian(np.array([[np.nan, 1.0], [0.0, 1.0]]), backend)
    with pytest.raises(NumericError):
        hungarian(np.array([[np.inf], [0.0]]), backend)
    with pytest.raises(InfeasibleError):
        hungarian(np.zeros((1, 2)), backend)
    with pytest.raises(DimensionError):
        hungarian(np.zeros(3), backend)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(-5, 5))
def test_hungarian_column_shift_invariance(seed, n, shift):
    rng = np.random.default_rng(seed)
    g = int(rng.integers(1, n + 1))
    cost = rng.uniform(0, 1, (n, g))
    j = int(rng.integers(0, g))
    shifted = cost.copy()
    shifted[:, j] += shift
    a = hungarian(cost)
    b = hungarian(shifted)
    # the optimum may move only between tied solutions
    assert sum(cost[i, jj] for i, jj in b.pairs) == pytest.approx(a.total_cost, abs=1e-9)
    assert b.total_cost == pytest.approx(a.total_cost + shift, abs=1e-9)


def test_hungarian_weight_scaling(rng):
    preds = Predictions(rng.normal(size=(6, 4)), np.c_[rng.uniform(0, 20, (6, 2)), rng.uniform(2, 6, (6, 2)), np.zeros(6)])
    gts = GroundTruthSet([0, 2, 1], np.c_[rng.uniform(0, 20, (3, 2)), rng.uniform(2, 6, (3, 2)), np.zeros(3)])
    a = hungarian(cost_matrix(preds, gts, CostWeights()))
    b = hungarian(cost_matrix(preds, gts, CostWeights().scaled(3.0)))
    assert a.pairs == b.pairs


def test_stage_wise_flip():
    gts = GroundTruthSet([0], np.array([[10, 10, 4, 4, 0.0]]))
    near = [10.2, 10, 4, 4, 0.0]
    far = [13, 10, 4, 4, 0.0]
    logits = onehot_logits([0, 0], 1, scale=2.0)
    trajectory = [Predictions(logits, np.array([near, far])), Predictions(logits, np.array([far, near]))]
    out = stage_wise_match(trajectory, gts)
    assert [a.pairs for a in out] == [[(0, 0)], [(1, 0)]]


# ---------------------------------------------------------------- loss


def test_smooth_l1():
    np.testing.assert_allclose(smooth_l1(np.array([0.0, 0.5, -1.0, 3.0])), [0.0, 0.125, 0.5, 2.5])


def test_detection_loss_uniform_logits():
    box = np.array([[5, 5, 2, 2, 0.0], [9, 9, 2, 2, 0.0]])
    preds = Predictions(np.zeros((2, 3)), box)
    gts = GroundTruthSet([1], box[:1])
    loss = detection_loss(preds, gts, hungarian(np.array([[0.0], [1.0]])))
    assert loss.cls == pytest.approx(math.log(3))
    assert loss.box == 0.0 and loss.iou == 0.0
    assert loss.total == pytest.approx(2 * math.log(3))


def test_detection_loss_oracle(rng):
    w = CostWeights()
    logits = rng.normal(size=(4, 3))
    boxes = np.c_[rng.uniform(5, 15, (4, 2)), rng.uniform(2, 6, (4, 2)), rng.uniform(-1.5, 1.5, 4)]
    gboxes = np.c_[rng.uniform(5, 15, (2, 2)), rng.uniform(2, 6, (2, 2)), rng.uniform(-1.5, 1.5, 2)]
    gts = GroundTruthSet([1, 0], gboxes)
    a = hungarian(np.array([[9.0, 9], [0, 9], [9, 9], [9, 0]]))  # gt0 -> q1, gt1 -> q3
    loss = detection_loss(Predictions(logits, boxes), gts, a, w, extent=(20, 20))
    targets = [2, 1, 2, 0]
    ce = np.mean([math.log(np.exp(logits[i]).sum()) - logits[i, targets[i]] for i in range(4)])
    box_l, iou_l = 0.0, 0.0
    for i, j in [(1, 0), (3, 1)]:
        diff = list((boxes[i, :4] - gboxes[j, :4]) / 20) + [wrap_angle_diff(boxes[i, 4] - gboxes[j, 4]) / (math.pi / 2)]
        box_l += sum(0.5 * x * x if abs(x) < 1 else abs(x) - 0.5 for x in diff)
        iou_l += 1 - rotated_iou(boxes[i], gboxes[j])
    assert loss.cls == pytest.approx(ce, abs=1e-12)
    assert loss.box == pytest.approx(box_l / 2, abs=1e-12)
    assert loss.iou == pytest.approx(iou_l / 2, abs=1e-12)
    assert loss.total == pytest.approx(2 * ce + 5 * box_l / 2 + 5 * iou_l / 2, abs=1e-12)


def test_detection_loss_no_gts():
    preds = Predictions(np.zeros((2, 3)), np.tile([1, 1, 1, 1, 0.0], (2, 1)))
    gts = GroundTruthSet(np.zeros(0, int), np.zeros((0, 5)))
    loss = detection_loss(preds, gts, hungarian(np.zeros((2, 0))))
    assert loss.box == 0.0 and loss.iou == 0.0 and loss.cls == pytest.approx(math.log(3))
