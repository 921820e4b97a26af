import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cycconf import cycmatch as cm


def matrices(max_rows=8, max_cols=8, lo=-50, hi=50):
    shape = st.tuples(st.integers(1, max_rows), st.integers(1, max_cols))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=st.floats(lo, hi)))


def embedding_pair(min_rows=1):
    def build(dims):
        n0, n1, d = dims
        el = st.floats(-3, 3)
        return st.tuples(arrays(np.float64, (n0, d), elements=el), arrays(np.float64, (n1, d), elements=el))
    return st.tuples(st.integers(min_rows, 6), st.integers(min_rows, 6), st.integers(2, 8)).flatmap(build)


# ---------------------------------------------------------------------------- distances

def test_sq_dist_examples():
    assert cm.pairwise_sq_dist([[1, 2]], [[1, 2]]).tolist() == [[0.0]]
    assert cm.pairwise_sq_dist([[1, 0]], [[0, 1]]).tolist() == [[2.0]]


def test_sq_dist_matches_loop_oracle(rng):
    U, V = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            ref[i, j] = sum((U[i, d] - V[j, d]) ** 2 for d in range(2))
    np.testing.assert_allclose(cm.pairwise_sq_dist(U, V), ref, atol=1e-12, rtol=0)


def test_sq_dist_dimension_mismatch():
    with pytest.raises(cm.ContractError):
        cm.pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))


def test_sq_dist_zero_iff_equal_rows():
    U = np.array([[0.0, 1.0], [2.0, 2.0]])
    S = cm.pairwise_sq_dist(U, np.array([[2.0, 2.0], [0.0, 1.0 + 1e-9]]))
    assert S[1, 0] == 0.0 and S[0, 1] > 0.0


# ---------------------------------------------------------------------------- forward weights

def test_forward_weight_examples():
    np.testing.assert_allclose(cm.forward_match_weights([[0, 0, 0]]), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(cm.forward_match_weights([[0, math.log(3)]]), [[0.25, 0.75]], atol=1e-15)
    np.testing.assert_allclose(cm.forward_match_weights([[5, 5 + math.log(3)]]), [[0.25, 0.75]], atol=1e-15)


def test_forward_weights_empty_target():
    with pytest.raises(cm.EmptyTargetError):
        cm.forward_match_weights(np.zeros((2, 0)))


def test_forward_weights_huge_distances_stay_finite():
    A = cm.forward_match_weights([[1e4, 2e4, 0.0]])
    assert np.isfinite(A).all() and A[0, 1] == 1.0


@given(matrices())
@settings(max_examples=200, deadline=None)
def test_rows_are_stochastic(S):
    for mode in (cm.CONFUSION, cm.CONSISTENCY):
        A = cm.forward_match_weights(S, 1.0, mode)
        assert np.abs(A.sum(axis=1) - 1).max() < 1e-9
        assert (A >= 0).all() and (A <= 1).all()


@given(matrices(), st.floats(-100, 100))
@settings(max_examples=200, deadline=None)
def test_row_shift_invariance(S, c):
    A = cm.forward_match_weights(S)
    B = cm.forward_match_weights(S + c)
    assert np.abs(A - B).max() < 1e-12


def test_sign_semantics(rng):
    for _ in range(200):
        row = rng.permutation(np.linspace(0, 5, int(rng.integers(2, 8))))[None]
        assert np.argmax(cm.forward_match_weights(row, 1.0, cm.CONFUSION)) == np.argmax(row)
        assert np.argmax(cm.forward_match_weights(row, 1.0, cm.CONSISTENCY)) == np.argmin(row)


# ---------------------------------------------------------------------------- soft targets / backward logits

def test_soft_target_examples():
    V = np.array([[0.0, 0.0], [2.0, 2.0]])
    np.testing.assert_array_equal(cm.soft_targets([[0.0, 1.0]], V), [[2.0, 2.0]])
    np.testing.assert_array_equal(cm.soft_targets([[0.5, 0.5]], V), [[1.0, 1.0]])


def test_soft_targets_match_summation_oracle(rng):
    alpha = cm.forward_match_weights(rng.normal(size=(2, 3)))
    V = rng.normal(size=(3, 4))
    ref = [[sum(alpha[i, j] * V[j, d] for j in range(3)) for d in range(4)] for i in range(2)]
    np.testing.assert_allclose(cm.soft_targets(alpha, V), ref, atol=1e-12, rtol=0)


def test_soft_targets_shape_mismatch():
    with pytest.raises(cm.ContractError):
        cm.soft_targets(np.ones((2, 3)) / 3, np.zeros((2, 4)))


@given(embedding_pair())
@settings(max_examples=100, deadline=None)
def test_soft_targets_in_convex_hull_box(pair):
    U, V = pair
    vh = cm.soft_targets(cm.forward_match_weights(cm.pairwise_sq_dist(U, V)), V)
    assert (vh >= V.min(axis=0) - 1e-12).all() and (vh <= V.max(axis=0) + 1e-12).all()


def test_backward_logit_examples(rng):
    assert cm.backward_logits([[1.0, 2.0]], [[1.0, 2.0]]).tolist() == [[0.0]]
    out = cm.backward_logits([[0, 0], [1, 0]], [[1, 0], [0, 0]])
    np.testing.assert_array_equal(out, [[1, 0], [0, 1]])
    U, Vh = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    B, S = cm.backward_logits(U, Vh), cm.pairwise_sq_dist(U, Vh)
    for k in range(3):
        for i in range(3):
            assert B[k, i] == S[k, i]
    with pytest.raises(cm.ContractError):
        cm.backward_logits(np.zeros((2, 3)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------- losses

def test_single_pair_loss_is_zero():
    U, V = np.array([[0.3, -1.0]]), np.array([[2.0, 5.0]])
    assert cm.cycle_confusion_loss(U, V).loss == 0.0
    assert cm.cycle_consistency_loss(U, V).loss == 0.0


@pytest.mark.parametrize("shape", [((0, 3), (2, 3)), ((2, 3), (0, 3)), ((0, 3), (0, 3))])
def test_empty_side_is_skipped(shape):
    res = cm.cycle_confusion_loss(np.zeros(shape[0]), np.zeros(shape[1]))
    assert res.skipped and res.loss == 0.0
    assert res.grads_u.shape == shape[0] and not res.grads_u.any()
    assert res.grads_v.shape == shape[1] and not res.grads_v.any()


def test_non_finite_input_rejected():
    with pytest.raises((cm.ContractError, cm.NumericError)):
        cm.cycle_confusion_loss(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))


def _sign_flipped_reference(U, V):
    """Consistency loss rebuilt from the confusion steps with every distance negated."""
    A = cm.forward_match_weights(-cm.pairwise_sq_dist(U, V))
    L = -cm.backward_logits(U, cm.soft_targets(A, V))
    m = L.max(axis=0)
    lse = m + np.log(np.exp(L - m).sum(axis=0))
    return float(np.mean(lse - np.diag(L)))


def test_consistency_equals_sign_flipped_pipeline(rng):
    for _ in range(20):
        U, V = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        assert abs(cm.cycle_consistency_loss(U, V).loss - _sign_flipped_reference(U, V)) < 1e-12


def test_consistency_forward_prefers_self():
    U = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    A = cm.cycle_consistency_loss(U, U).alpha
    assert (np.argmax(A, axis=1) == np.arange(3)).all()


@given(embedding_pair(), st.sampled_from([cm.CONFUSION, cm.CONSISTENCY]))
@settings(max_examples=100, deadline=None)
def test_translation_and_permutation_invariance(pair, mode):
    U, V = pair
    base = cm.cycle_loss(U, V, mode)
    shift = np.linspace(-2, 2, U.shape[1])
    assert abs(cm.cycle_loss(U + shift, V + shift, mode).loss - base.loss) < 1e-9
    assert abs(cm.cycle_loss(U, V[::-1], mode).loss - base.loss) < 1e-9
    perm = np.roll(np.arange(len(U)), 1)
    rolled = cm.cycle_loss(U[perm], V, mode)
    np.testing.assert_allclose(rolled.per_instance, base.per_instance[perm], atol=1e-9)
    assert abs(rolled.loss - base.loss) < 1e-9


@given(embedding_pair())
@settings(max_examples=100, deadline=None)
def test_loss_nonnegative_and_finite(pair):
    for mode in (cm.CONFUSION, cm.CONSISTENCY):
        res = cm.cycle_loss(*pair, mode)
        assert res.loss >= -1e-12 and np.isfinite(res.grads_u).all() and np.isfinite(res.grads_v).all()


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        g[idx] = (up - f()) / (2 * h)
        x[idx] = old
    return g


@pytest.mark.parametrize("temperature,symmetric", [(1.0, True), (0.5, False), (2.0, True)])
def test_gradients_with_knobs(rng, temperature, symmetric):
    for mode in (cm.CONFUSION, cm.CONSISTENCY):
        U, V = rng.normal(size=(4, 3)) * 0.5, rng.normal(size=(3, 3)) * 0.5
        res = cm.cycle_loss(U, V, mode, temperature, symmetric)
        f = lambda: cm.cycle_loss(U, V, mode, temperature, symmetric).loss  # noqa: E731
        np.testing.assert_allclose(res.grads_u, _fd(f, U), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(res.grads_v, _fd(f, V), rtol=1e-4, atol=1e-8)


def test_symmetric_adds_swapped_direction(rng):
    U, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    both = cm.cycle_confusion_loss(U, V, symmetric=True).loss
    assert abs(both - cm.cycle_confusion_loss(U, V).loss - cm.cycle_confusion_loss(V, U).loss) < 1e-12


# ---------------------------------------------------------------------------- entropy

def test_entropy_examples():
    assert abs(cm.matching_entropy(np.full((1, 4), 0.25)) - math.log(4)) < 1e-12
    assert cm.matching_entropy([[0.0, 1.0, 0.0]]) == 0.0
    with pytest.raises(cm.ContractError):
        cm.matching_entropy([[1.5, -0.5]])


def test_entropy_ordering_is_not_universal():
    row = np.array([[0.0, 0.1, 10.0]])
    hc = cm.matching_entropy(cm.forward_match_weights(row, 1.0, cm.CONFUSION))
    hk = cm.matching_entropy(cm.forward_match_weights(row, 1.0, cm.CONSISTENCY))
    assert hc < hk


# ---------------------------------------------------------------------------- torch bridge

@pytest.mark.parametrize("mode", [cm.CONFUSION, cm.CONSISTENCY])
def test_torch_bridge_gradients(rng, mode):
    U = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    V = torch.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    loss, res = cm.torch_cycle_loss(U, V, mode)
    (2.0 * loss).backward()
    assert abs(loss.item() - res.loss) < 1e-12
    np.testing.assert_allclose(U.grad.numpy(), 2 * res.grads_u, atol=1e-12)
    np.testing.assert_allclose(V.grad.numpy(), 2 * res.grads_v, atol=1e-12)


def test_torch_bridge_matches_autograd_reference(rng):
    U = torch.tensor(rng.normal(size=(4, 3)), requires_grad=True)
    V = torch.tensor(rng.normal(size=(3, 3)), requires_grad=True)
    loss, _ = cm.torch_cycle_loss(U, V, cm.CONFUSION)
    loss.backward()
    gu, gv = U.grad.clone(), V.grad.clone()
    U.grad = V.grad = None
    A = torch.softmax(torch.cdist(U, V) ** 2, dim=1)
    L = torch.cdist(U, A @ V) ** 2
    ref = torch.nn.functional.cross_entropy(L.T, torch.arange(4))
    ref.backward()
    assert abs(loss.item() - ref.item()) < 1e-10
    torch.testing.assert_close(gu, U.grad, atol=1e-8, rtol=1e-6)
    torch.testing.assert_close(gv, V.grad, atol=1e-8, rtol=1e-6)


def test_torch_bridge_skipped_keeps_graph():
    U = torch.zeros((0, 4), requires_grad=True)
    V = torch.ones((3, 4), requires_grad=True)
    loss, res = cm.torch_cycle_loss(U, V)
    loss.backward()
    assert res.skipped and loss.item() == 0.0 and not V.grad.any()
