import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colt5 import tensor as T
from colt5.routing import (
    AllTokensRouting,
    LearnedRouting,
    RecordingRouting,
    Router,
    SoftTopKConfig,
    StaticRouting,
    expanded_count,
    route,
    select_topk,
    soft_topk_normalize,
    solve_dual,
)
from colt5.tensor import ContractError, NumericInputError, Tensor


def sort_oracle(s, k):
    """Top-k by a plain Python sort on (-score, index)."""
    ranked = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return sorted(ranked[:k])


def vec_and_k(max_n=64):
    return st.integers(1, max_n).flatmap(
        lambda n: st.tuples(
            st.lists(st.floats(-20, 20, allow_nan=False), min_size=n, max_size=n),
            st.integers(1, n),
        )
    )


@settings(max_examples=200, deadline=None)
@given(vec_and_k())
def test_soft_topk_sums_to_k(case):
    s, k = case
    a = soft_topk_normalize(Tensor(np.array(s)), k).data
    assert abs(a.sum() - k) <= 1e-3 * k
    assert np.all((a >= 0) & (a <= 1))


@settings(max_examples=100, deadline=None)
@given(vec_and_k(), st.randoms(use_true_random=False))
def test_soft_topk_monotone_and_equivariant(case, rnd):
    s, k = case
    s = np.array(s)
    a = soft_topk_normalize(Tensor(s), k).data
    order = np.argsort(s, kind="stable")
    assert np.all(np.diff(a[order]) >= -1e-12)
    perm = list(range(len(s)))
    rnd.shuffle(perm)
    ap = soft_topk_normalize(Tensor(s[perm]), k).data
    np.testing.assert_allclose(ap, a[perm], atol=1e-9)


def test_k_equals_n_gives_ones():
    a = soft_topk_normalize(Tensor(np.array([3.0, -1.0, 0.5])), 3).data
    np.testing.assert_array_equal(a, [1.0, 1.0, 1.0])


def test_small_epsilon_is_nearly_hard():
    s = np.array([5.0, 0.0, 3.0, -2.0, 4.0, 1.5])
    a = soft_topk_normalize(Tensor(s), 3, SoftTopKConfig(epsilon=1e-3)).data
    assert np.all(a[[0, 2, 4]] > 0.99)
    assert np.all(a[[1, 3, 5]] < 0.01)


def test_equal_scores_give_uniform_weights():
    a = soft_topk_normalize(Tensor(np.full(16, 0.7)), 4).data
    np.testing.assert_allclose(a, 0.25, atol=1e-12)


def test_dual_bracket_holds_near_k_equals_n():
    # a bracket that ignores logit(k/n) misses the root when k is close to n
    s = np.linspace(-1, 1, 64)
    lam = solve_dual(s, 63, SoftTopKConfig())
    total = (1 / (1 + np.exp(-(s - lam)))).sum()
    assert total == pytest.approx(63, abs=1e-9)


def test_soft_topk_gradient_treats_dual_as_constant():
    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=8), requires_grad=True)
    cfg = SoftTopKConfig(epsilon=0.5)
    a = soft_topk_normalize(s, 3, cfg)
    w = rng.normal(size=8)
    T.backward(T.tsum(T.mul(a, Tensor(w))))
    expected = w * a.data * (1 - a.data) / cfg.epsilon
    np.testing.assert_allclose(s.grad, expected, rtol=1e-12)


def test_soft_topk_rejects_bad_inputs():
    with pytest.raises(ContractError):
        soft_topk_normalize(Tensor(np.zeros(3)), 4)
    with pytest.raises(ContractError):
        soft_topk_normalize(Tensor(np.zeros(3)), 0)
    with pytest.raises(NumericInputError):
        soft_topk_normalize(Tensor(np.array([0.0, np.inf, 1.0])), 1)


def test_padding_positions_get_zero_weight():
    s = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    valid = np.array([True, True, True, False])
    a = soft_topk_normalize(s, 2, valid=valid).data
    assert a[3] == 0.0
    assert a[:3].sum() == pytest.approx(2.0, abs=1e-9)
    assert list(select_topk(s, 2, valid=valid)) == [1, 2]


@pytest.mark.parametrize("k,expected", [(1, 1), (4, 5), (8, 9), (12, 14), (32, 36), (60, 64), (64, 64)])
def test_expanded_count_rounds_half_up_and_caps(k, expected):
    assert expanded_count(k, 64, SoftTopKConfig()) == expected


@settings(max_examples=200, deadline=None)
@given(vec_and_k(), st.booleans())
def test_select_topk_matches_sort_oracle(case, training):
    s, k = case
    # coarse values force ties
    s = [round(x) for x in s]
    k_sel = min(len(s), math.floor(k * 9 / 8 + 0.5)) if training else k
    assert list(select_topk(np.array(s, dtype=float), k, training)) == sort_oracle(s, k_sel)


def test_select_topk_ties_go_to_lower_index():
    assert list(select_topk(np.zeros(6), 2)) == [0, 1]


def test_route_masks_unselected_weights():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(10, 4)))
    router = Router(Tensor(rng.normal(size=4)))
    d = route(x, router, 3)
    assert len(d.selected) == 3
    off = np.setdiff1d(np.arange(10), d.selected)
    assert np.all(d.weights.data[off] == 0)
    np.testing.assert_allclose(d.weights.data[d.selected], d.soft[d.selected])
    assert len(route(x, router, 3, training=True).selected) == 3  # round(27/8) = 3


def test_static_routing_takes_first_token_of_each_block():
    d = StaticRouting()(Tensor(np.zeros((512, 4))), None, 32, training=True)
    np.testing.assert_array_equal(d.selected, np.arange(0, 512, 16))
    assert d.weights.data.sum() == 32
    assert not d.weights.requires_grad


def test_all_tokens_routing():
    d = AllTokensRouting()(Tensor(np.zeros((5, 2))), None, 2, training=False)
    np.testing.assert_array_equal(d.selected, np.arange(5))
    np.testing.assert_array_equal(d.weights.data, np.ones(5))


def test_frozen_routing_replays_selection_and_dual():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(12, 4)))
    router = Router(Tensor(rng.normal(size=4), requires_grad=True))
    rec = RecordingRouting(LearnedRouting())
    d0 = rec(x, router, 4, True, key="a")
    frozen = rec.freeze()
    d1 = frozen(x, router, 4, True, key="a")
    np.testing.assert_array_equal(d0.selected, d1.selected)
    np.testing.assert_allclose(d0.weights.data, d1.weights.data, atol=1e-12)
    # moving the inputs does not move the selection
    x2 = Tensor(x.data + rng.normal(size=x.shape))
    np.testing.assert_array_equal(frozen(x2, router, 4, True, key="a").selected, d0.selected)
