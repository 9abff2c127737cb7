import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from georank.losses import (
    DistanceLabels, LossConfig, loss_first_order, loss_second_order, loss_total, pair_count,
    second_order_count,
)


from oracles import central_diff
from oracles import first_order as oracle_first
from oracles import second_order as oracle_second


def labels(d):
    return DistanceLabels.from_distances(d)


FIXTURE_S, FIXTURE_D = [3.0, 2.0, 0.0], [1.0, 5.0, 20.0]


# -- examples ---------------------------------------------------------------

def test_second_order_fixture_value():
    cfg = LossConfig(k1=3)
    assert cfg.top_k2 == 2
    expected = (-math.log(math.e ** 3 / (math.e ** 3 + math.e ** 2 + math.e))
                - math.log(math.e ** 2 / (math.e ** 2 + math.e))) / 2
    loss, _ = loss_second_order(FIXTURE_S, labels(FIXTURE_D), cfg)
    assert loss == pytest.approx(expected, rel=1e-12)
    # the chain evaluates to 0.360434; the commonly quoted 0.3605 is a rounding
    assert loss == pytest.approx(0.3605, abs=1e-4)


def test_uniform_scores_first_order_is_log_k():
    loss, _ = loss_first_order([0.5] * 4, labels([3, 1, 4, 2]), LossConfig(k1=4))
    assert loss == pytest.approx(math.log(4), rel=1e-12)
    assert loss == pytest.approx(1.386294, abs=1e-6)


def test_degenerate_lists():
    loss, g = loss_first_order([2.0], labels([7.0]), LossConfig(k1=1))
    assert loss == 0.0 and g.tolist() == [0.0]
    loss, g = loss_second_order([1.0, -3.0], labels([2.0, 1.0]), LossConfig(k1=2))
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(g, 0.0)
    with pytest.raises(ValueError):
        loss_second_order([1.0], labels([1.0]), LossConfig(k1=1))


def test_total_composition_on_fixture():
    cfg = LossConfig(k1=3, lam=0.7)
    total, grad, l1, l2 = loss_total(FIXTURE_S, labels(FIXTURE_D), cfg)
    assert l1 == pytest.approx(oracle_first(FIXTURE_S, FIXTURE_D, 1), rel=1e-12)
    assert l2 == pytest.approx(oracle_second(FIXTURE_S, FIXTURE_D, 1), rel=1e-12)
    assert total == pytest.approx(0.7 * l1 + 0.3 * l2, rel=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_lambda_boundaries_bit_exact(seed):
    rng = np.random.default_rng(seed)
    s, d = rng.standard_normal(6), rng.uniform(0, 1000, 6)
    lab = labels(d)
    l1, g1 = loss_first_order(s, lab, LossConfig(k1=6))
    l2, g2 = loss_second_order(s, lab, LossConfig(k1=6))
    t1, tg1, *_ = loss_total(s, lab, LossConfig(k1=6, lam=1.0))
    t0, tg0, *_ = loss_total(s, lab, LossConfig(k1=6, lam=0.0))
    assert t1 == l1 and np.array_equal(tg1, g1)
    assert t0 == l2 and np.array_equal(tg0, g2)


def test_config_validation():
    for bad in (-0.1, 1.2, float("nan")):
        with pytest.raises(ValueError):
            LossConfig(k1=5, lam=bad)
    with pytest.raises(ValueError):
        LossConfig(k1=3, top_k1=4)
    with pytest.raises(ValueError):
        LossConfig(k1=3, top_k1=0)
    with pytest.raises(ValueError):
        loss_first_order([1.0, float("inf")], labels([1, 2]), LossConfig(k1=2))
    with pytest.raises(ValueError):
        loss_first_order([1.0, 2.0], labels([1, 2, 3]), LossConfig(k1=3))


def test_distance_labels_structure():
    lab = labels([5.0, 1.0, 5.0, 3.0])
    assert lab.pi.tolist() == [1, 3, 0, 2]
    assert np.all(lab.delta_d <= 0)
    ordered = lab.delta_d[lab.pair_order]
    assert np.all(np.diff(ordered) >= 0)
    assert (lab.pair_i[0], lab.pair_j[0]) == (0, 2)  # nearest vs the first of the tied farthest


# -- properties -------------------------------------------------------------

instances = st.integers(2, 8).flatmap(lambda k: st.tuples(
    st.just(k), st.integers(1, k), st.integers(0, 2 ** 31)))


@given(instances)
def test_matches_direct_formula(inst):
    k1, K1, seed = inst
    rng = np.random.default_rng(seed)
    s, d = rng.normal(0, 2, k1), rng.uniform(0, 500, k1)
    cfg = LossConfig(k1=k1, top_k1=K1)
    assert loss_first_order(s, labels(d), cfg)[0] == pytest.approx(oracle_first(list(s), list(d), K1), rel=1e-9)
    assert loss_second_order(s, labels(d), cfg)[0] == pytest.approx(
        oracle_second(list(s), list(d), K1), rel=1e-9)


@given(instances)
def test_gradients_match_finite_differences(inst):
    k1, K1, seed = inst
    rng = np.random.default_rng(seed)
    s, d = rng.normal(0, 2, k1), rng.uniform(0, 500, k1)
    lab = labels(d)
    for lam in (1.0, 0.0, 0.7):
        cfg = LossConfig(k1=k1, top_k1=K1, lam=lam)
        _, g, *_ = loss_total(s, lab, cfg)
        num = central_diff(lambda x: loss_total(x, lab, cfg)[0], s)
        assert np.allclose(g, num, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("seed", range(100))
def test_gradient_sweep(seed):
    rng = np.random.default_rng(1000 + seed)
    k1 = int(rng.integers(2, 9))
    K1 = int(rng.integers(1, k1 + 1))
    s, d = rng.normal(0, 1, k1), rng.uniform(0, 100, k1)
    lab = labels(d)
    for fn in (loss_first_order, loss_second_order):
        cfg = LossConfig(k1=k1, top_k1=K1)
        g = fn(s, lab, cfg)[1]
        num = central_diff(lambda x: fn(x, lab, cfg)[0], s)
        assert np.allclose(g, num, rtol=1e-4, atol=1e-7)


@given(instances, st.floats(-50, 50))
def test_shift_invariance(inst, c):
    k1, K1, seed = inst
    rng = np.random.default_rng(seed)
    s, d = rng.normal(0, 2, k1), rng.uniform(0, 500, k1)
    lab, cfg = labels(d), LossConfig(k1=k1, top_k1=K1)
    for fn in (loss_first_order, loss_second_order):
        a, b = fn(s, lab, cfg)[0], fn(s + c, lab, cfg)[0]
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


@given(instances)
def test_first_order_gradient_sums_to_zero(inst):
    k1, K1, seed = inst
    rng = np.random.default_rng(seed)
    g = loss_first_order(rng.normal(0, 3, k1), labels(rng.uniform(0, 9, k1)), LossConfig(k1, top_k1=K1))[1]
    assert abs(g.sum()) <= 1e-9


@given(instances, st.floats(1e-3, 1e3))
def test_distance_scaling_is_bit_exact(inst, alpha):
    k1, K1, seed = inst
    rng = np.random.default_rng(seed)
    s, d = rng.normal(0, 2, k1), rng.uniform(1, 500, k1)
    a, b = labels(d), labels(d * alpha)
    if not (np.array_equal(a.pi, b.pi) and np.array_equal(a.pair_order, b.pair_order)):
        return  # rounding produced a new tie; orderings are all the losses see
    cfg = LossConfig(k1=k1, top_k1=K1, lam=0.7)
    assert loss_total(s, a, cfg)[0] == loss_total(s, b, cfg)[0]


def test_pair_count_identity():
    for k1 in range(1, 21):
        assert pair_count(k1) == len(list(itertools.combinations(range(k1), 2)))
        for K1 in range(1, k1 + 1):
            enumerated = sum(1 for i, j in itertools.combinations(range(k1), 2) if i < K1)
            assert second_order_count(k1, K1) == enumerated <= pair_count(k1)
            assert LossConfig(k1=k1, top_k1=K1).top_k2 == enumerated


def assignment_losses(k1, top_k1, seed):
    """Loss of every assignment of a fixed distinct score multiset to the candidates.

    Key ``perm`` means candidate ``perm[r]`` receives the r-th highest score.
    """
    rng = np.random.default_rng(seed)
    values = np.sort(rng.normal(0, 1, k1))[::-1]
    d = rng.permutation(np.arange(1, k1 + 1) * 10.0)
    lab, cfg = labels(d), LossConfig(k1=k1, top_k1=top_k1)
    losses = {}
    for perm in itertools.permutations(range(k1)):
        s = np.empty(k1)
        s[list(perm)] = values
        losses[perm] = loss_first_order(s, lab, cfg)[0]
    return losses, tuple(int(i) for i in np.argsort(d, kind="stable"))


@pytest.mark.parametrize("k1", [2, 3, 4, 5])
def test_permutation_optimality_full_depth(k1):
    losses, anti = assignment_losses(k1, k1, seed=k1)
    best = min(losses.values())
    assert losses[anti] == best
    assert [p for p, v in losses.items() if v <= best + 1e-12] == [anti]


@pytest.mark.parametrize("k1", [2, 3, 4, 5])
def test_permutation_optimality_top1(k1):
    # with K1 = 1 only the nearest candidate's share of the softmax matters, so
    # every assignment giving it the top score ties; those are exactly the minimizers
    losses, anti = assignment_losses(k1, 1, seed=k1)
    best = min(losses.values())
    assert losses[anti] == pytest.approx(best, abs=1e-12)
    minimizers = [p for p, v in losses.items() if v <= best + 1e-12]
    assert all(p[0] == anti[0] for p in minimizers)
    assert len(minimizers) == math.factorial(k1 - 1)
