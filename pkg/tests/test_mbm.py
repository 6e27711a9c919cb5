import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotdet.errors import ConfigError, StateError, UsageError
from rotdet.harness import ScenarioConfig, generate_trajectory
from rotdet.matching import Assignment, CostWeights, GroundTruthSet, Predictions, combine, cost_matrix, cost_terms, stage_wise_match
from rotdet.mbm import (
    MbmConfig,
    MomentumMatchState,
    eta_cls,
    eta_from_kl,
    eta_loc,
    identity_shift_rate,
    kl_divergence,
    momentum_cost_update,
    momentum_match,
)


def assignment(queries):
    return Assignment(pairs=[(q, j) for j, q in enumerate(queries)], total_cost=0.0)


def scenario(seed, **kw):
    return generate_trajectory(ScenarioConfig(seed=seed, **kw))


# ---------------------------------------------------------------- smoothing factors


def test_eta_cls_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert eta_cls(p, p, 0.8) == 0.0
    # KL([1, 0] || [0.5, 0.5]) = ln 2 once zeros are clamped
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-9)
    assert eta_cls([1.0, 0.0], [0.5, 0.5], 1.0) == pytest.approx(0.5, abs=1e-9)
    assert eta_cls([1.0, 0.0], [0.5, 0.5], 0.8) == pytest.approx(1 - 2 ** -0.8, abs=1e-9)


def test_eta_cls_direct_kl_oracle(rng):
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        kl = sum(p[i] * math.log(p[i] / q[i]) for i in range(6))
        assert eta_cls(p, q, 0.8) == pytest.approx(1 - math.exp(-0.8 * kl), abs=1e-12)


def test_eta_cls_extreme_stays_below_one():
    e = eta_cls([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 50.0)
    assert 0.0 < e < 1.0


def test_eta_rejects_nonpositive_alpha():
    with pytest.raises(ConfigError):
        eta_from_kl(0.1, 0.0)
    with pytest.raises(ConfigError):
        MbmConfig(alpha=-1.0)
    with pytest.raises(ConfigError):
        MbmConfig(fixed_eta=1.0)
    MbmConfig(alpha=0.0, fixed_eta=0.0)  # fixed factors do not use alpha


def test_eta_loc_examples():
    assert eta_loc((0, 0, 1, 1, 0), (0, 0, 1, 1, 0)) == 0.0
    assert eta_loc((0, 0, 1, 1, 0), (5, 5, 1, 1, 0)) == 1.0
    assert eta_loc((0, 0, 1, 1, 0), (0.5, 0, 1, 1, 0)) == pytest.approx(2 / 3)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 10), st.floats(1e-4, 10), st.floats(1e-6, 5))
def test_eta_monotone_in_alpha(a1, a2, kl):
    lo, hi = sorted((a1, a2))
    assert eta_from_kl(kl, lo) <= eta_from_kl(kl, hi)


# ---------------------------------------------------------------- cost update


def _stage_preds(rng, n, k):
    logits = rng.normal(size=(n, k + 1))
    boxes = np.c_[rng.uniform(0, 20, (n, 2)), rng.uniform(3, 8, (n, 2)), rng.uniform(-1.5, 1.5, n)]
    return Predictions(logits, boxes)


def test_first_update_is_stagewise_cost(rng):
    gts, traj = scenario(3)
    cost, state = momentum_cost_update(MomentumMatchState.initial(8, 4), traj[0], gts, MbmConfig(), (64, 64))
    np.testing.assert_array_equal(cost, cost_matrix(traj[0], gts, extent=(64, 64)))
    assert state.stage == 1


def test_update_does_not_mutate_state(rng):
    gts, traj = scenario(4)
    s0 = MomentumMatchState.initial(8, 4)
    _, s1 = momentum_cost_update(s0, traj[0], gts)
    before = s1.acc_box.copy()
    momentum_cost_update(s1, traj[1], gts)
    np.testing.assert_array_equal(s1.acc_box, before)
    assert not np.any(s0.acc_cls)


@pytest.mark.parametrize("eta", [0.2, 0.5, 0.8])
def test_fixed_eta_closed_form(eta):
    gts, traj = scenario(11)
    cfg = MbmConfig(fixed_eta=eta)
    _, costs = momentum_match(traj, gts, cfg, (64, 64))
    fresh = [cost_matrix(p, gts, extent=(64, 64)) for p in traj]
    for s in range(len(traj)):
        expect = (1 - eta) * sum(eta ** (s - t) * fresh[t] for t in range(s + 1))
        np.testing.assert_allclose(costs[s], expect, rtol=0, atol=1e-10)


def test_single_stage_equals_stagewise():
    for seed in range(10):
        gts, traj = scenario(seed, stages=1, noise=_noise(1))
        a, _ = momentum_match(traj, gts)
        assert a[0].pairs == stage_wise_match(traj, gts)[0].pairs


def _noise(stages):
    from rotdet.harness import NoiseSchedule

    base = NoiseSchedule()
    return NoiseSchedule(*(getattr(base, f.name)[:stages] for f in dataclasses.fields(base)))


def test_zero_fixed_eta_reduces_to_stagewise():
    for seed in range(10):
        gts, traj = scenario(seed)
        a, _ = momentum_match(traj, gts, MbmConfig(fixed_eta=0.0))
        assert [x.pairs for x in a] == [x.pairs for x in stage_wise_match(traj, gts)]


def test_oscillation_damped_by_history():
    gts = GroundTruthSet([0], np.array([[10, 10, 4, 4, 0.0]]))
    near = [10.2, 10, 4, 4, 0.0]
    far = [13, 10, 4, 4, 0.0]
    logits = np.tile([2.0, 0.0], (2, 1))
    order = [(near, far), (near, far), (far, near), (near, far)]
    traj = [Predictions(logits, np.array(o)) for o in order]
    sw = stage_wise_match(traj, gts)
    assert [a.pairs[0][0] for a in sw] == [0, 0, 1, 0]
    mb, costs = momentum_match(traj, gts, MbmConfig(fixed_eta=0.8))
    # closed form at the third stage: history weight 0.16 + 0.128 on the near box beats 0.2
    c = [cost_matrix(p, gts)[:, 0] for p in traj]
    third = 0.2 * (c[2] + 0.8 * c[1] + 0.64 * c[0])
    np.testing.assert_allclose(costs[2][:, 0], third, atol=1e-12)
    assert third[0] < third[1]
    assert [a.pairs[0][0] for a in mb] == [0, 0, 0, 0]
    assert identity_shift_rate(sw) == pytest.approx(2 / 3)
    assert identity_shift_rate(mb) == 0.0


def test_adaptive_update_is_convex_combination(rng):
    gts, traj = scenario(21)
    state = MomentumMatchState.initial(8, 4)
    for preds in traj:
        prev = state
        _, state = momentum_cost_update(prev, preds, gts, MbmConfig(), (64, 64))
        fresh = cost_terms(preds, gts, (64, 64))
        for hist, cur, new in zip((prev.acc_cls, prev.acc_box, prev.acc_iou), fresh,
                                  (state.acc_cls, state.acc_box, state.acc_iou)):
            lo = np.minimum(hist, cur) - 1e-12
            hi = np.maximum(hist, cur) + 1e-12
            assert np.all((new >= lo) & (new <= hi))
        assert np.all((state.acc_cls >= -1) & (state.acc_cls <= 0))
        assert np.all((state.acc_iou >= 0) & (state.acc_iou <= 1 + 1e-12))


def test_row_eta_uses_each_query_history(rng):
    gts, traj = scenario(2)
    _, s1 = momentum_cost_update(MomentumMatchState.initial(8, 4), traj[0], gts)
    # query 0 repeats its previous prediction exactly, so its row follows the new cost only
    same = Predictions(traj[0].class_scores.copy(), traj[0].boxes.copy())
    same.class_scores[1:] = traj[1].class_scores[1:]
    same.boxes[1:] = traj[1].boxes[1:]
    _, s2 = momentum_cost_update(s1, same, gts)
    fresh = cost_terms(same, gts)
    np.testing.assert_allclose(s2.acc_cls[0], fresh[0][0], atol=1e-12)
    np.testing.assert_allclose(s2.acc_box[0], fresh[1][0], atol=1e-12)


def test_recompute_prev_uses_previous_fresh_costs():
    gts, traj = scenario(6)
    cfg = MbmConfig(fixed_eta=0.5, recompute_prev=True)
    _, costs = momentum_match(traj, gts, cfg)
    fresh = [cost_matrix(p, gts) for p in traj]
    np.testing.assert_allclose(costs[0], 0.5 * fresh[0], atol=1e-12)
    for s in range(1, len(traj)):
        np.testing.assert_allclose(costs[s], 0.5 * fresh[s - 1] + 0.5 * fresh[s], atol=1e-12)


def test_state_shape_drift():
    gts, traj = scenario(0)
    with pytest.raises(StateError):
        momentum_cost_update(MomentumMatchState.initial(5, 4), traj[0], gts)


def test_weights_respected():
    gts, traj = scenario(8)
    w = CostWeights(1.0, 0.0, 3.0)
    _, costs = momentum_match(traj[:1], gts, MbmConfig(weights=w))
    np.testing.assert_allclose(costs[0], combine(w, *cost_terms(traj[0], gts)), atol=1e-14)


def test_empty_trajectory():
    assert momentum_match([], GroundTruthSet([], np.zeros((0, 5)))) == ([], [])


# ---------------------------------------------------------------- identity shift


def test_identity_shift_examples():
    assert identity_shift_rate([assignment([0, 1]), assignment([0, 1])]) == 0.0
    assert identity_shift_rate([assignment([0, 1]), assignment([1, 0])]) == 1.0
    assert identity_shift_rate([assignment([0, 1]), assignment([0, 1]), assignment([0, 2])]) == 0.25
    assert identity_shift_rate([assignment([]), assignment([])]) == 0.0


def test_identity_shift_errors():
    with pytest.raises(UsageError):
        identity_shift_rate([assignment([0])])
    with pytest.raises(UsageError):
        identity_shift_rate([assignment([0]), assignment([0, 1])])
