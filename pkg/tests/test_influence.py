import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from influfl.errors import UsageError
from influfl.influence import (
    class_loss_matrix,
    client_loss_vector,
    influence_matrix,
    influence_vector,
    influence_weights,
    loo_class_vector,
    loo_repr,
)
from influfl.model import Batch, Layout, ModelParams, forward, loss_ce

GAMMAS = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0]


def brute_force_loo(stack, i):
    stack = np.asarray(stack, dtype=np.float64)
    return (stack.sum(axis=0) - stack[i]) / (len(stack) - 1)


# -- leave-one-out means ----------------------------------------------------------


def test_loo_repr_two_clients_is_the_other_exactly():
    a, b = np.array([0.1, -3.7, 2.2]), np.array([5.0, 1e-9, -7.3])
    assert np.array_equal(loo_repr([a, b], 1), a)
    assert np.array_equal(loo_repr([a, b], 0), b)


def test_loo_repr_identical_inputs_are_returned_unchanged():
    theta = np.array([0.1, 0.7, -1.3])
    for i in range(4):
        assert np.array_equal(loo_repr([theta] * 4, i), theta)


def test_loo_repr_scalar_mean():
    assert loo_repr([[2.0], [4.0], [6.0]], 0) == pytest.approx([5.0])


def test_loo_requires_two_clients():
    with pytest.raises(UsageError):
        loo_repr([np.zeros(3)], 0)
    with pytest.raises(UsageError):
        loo_class_vector([(np.zeros((2, 3)), np.zeros(2))], 0, 0)


def test_loo_repr_matches_algebraic_removal(rng):
    for _ in range(50):
        m = rng.integers(2, 8)
        stack = rng.normal(size=(m, 17))
        for i in range(m):
            np.testing.assert_allclose(loo_repr(stack, i), brute_force_loo(stack, i), rtol=0, atol=1e-12)


def test_loo_class_vector_examples():
    cls = [(np.array([[1.0]]), np.zeros(1)), (np.array([[3.0]]), np.zeros(1)), (np.array([[5.0]]), np.zeros(1))]
    row, bias = loo_class_vector(cls, 2, 0)
    assert row == pytest.approx([2.0]) and bias == pytest.approx(0.0)
    row, bias = loo_class_vector(cls[:2], 1, 0)
    assert np.array_equal(row, [1.0])
    same = (np.array([[1.5, 2.0], [0.3, -0.4]]), np.array([0.2, 0.9]))
    row, bias = loo_class_vector([same] * 3, 1, 1)
    assert np.array_equal(row, same[0][1]) and bias == same[1][1]


def test_loo_class_vector_carries_bias(rng):
    cls = [(rng.normal(size=(3, 4)), rng.normal(size=3)) for _ in range(4)]
    row, bias = loo_class_vector(cls, 1, 2)
    np.testing.assert_allclose(row, brute_force_loo([w[2] for w, _ in cls], 1), atol=1e-12)
    assert bias == pytest.approx(brute_force_loo([b[2] for _, b in cls], 1), abs=1e-12)


# -- loss vectors / matrices --------------------------------------------------------

SCALAR = Layout(1, (1,), 2)  # flat = [w_h, b_h, W_cls(2), b_cls(2)]


def scalar_model(w, b, cls_w, cls_b):
    return ModelParams(SCALAR, np.array([w, b, *cls_w, *cls_b], dtype=float))


def ce_by_hand(h_values, labels, cls_w, cls_b):
    total = 0.0
    for h, y in zip(h_values, labels):
        z = [cls_w[k] * h + cls_b[k] for k in range(2)]
        total += math.log(math.exp(z[0]) + math.exp(z[1])) - z[y]
    return total / len(labels)


def test_client_loss_vector_round_one_all_equal(rng):
    p = ModelParams(Layout(3, (4,), 3), rng.normal(size=Layout(3, (4,), 3).size))
    probe = Batch(rng.normal(size=(5, 3)), rng.integers(0, 3, 5))
    losses = client_loss_vector(1, [p] * 4, probe)
    assert len(set(losses.tolist())) == 1


def test_client_loss_vector_two_clients_uses_the_other(rng):
    layout = Layout(3, (4,), 3)
    p0, p1 = (ModelParams(layout, rng.normal(size=layout.size)) for _ in range(2))
    probe = Batch(rng.normal(size=(5, 3)), rng.integers(0, 3, 5))
    losses = client_loss_vector(0, [p0, p1], probe)
    assert losses[0] == loss_ce(forward(p0.with_theta(p1.theta), probe)[0], probe.labels)
    assert losses[1] == loss_ce(forward(p0, probe)[0], probe.labels)


def test_client_loss_vector_scalar_oracle():
    clients = [
        scalar_model(1.0, 0.0, [1.0, -1.0], [0.0, 0.0]),
        scalar_model(-0.5, 0.2, [0.3, 0.1], [0.5, -0.5]),
        scalar_model(2.0, -1.0, [2.0, 0.0], [0.0, 1.0]),
    ]
    xs, ys = [0.5, -1.0, 2.0], [0, 1, 0]
    probe = Batch(np.array(xs)[:, None], ys)
    got = client_loss_vector(1, clients, probe)
    thetas = [(1.0, 0.0), (-0.5, 0.2), (2.0, -1.0)]
    expected = []
    for i in range(3):
        rest = [t for j, t in enumerate(thetas) if j != i]
        w = sum(t[0] for t in rest) / 2
        b = sum(t[1] for t in rest) / 2
        hs = [math.tanh(w * x + b) for x in xs]
        expected.append(ce_by_hand(hs, ys, [0.3, 0.1], [0.5, -0.5]))
    np.testing.assert_allclose(got, expected, rtol=1e-13)


def brute_force_class_matrix(m, params, probe):
    """Rebuild every swapped model and run a full forward pass."""
    n = len(params)
    c_count = params[m].layout.num_classes
    out = np.empty((n, c_count))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for c in range(c_count):
            w = params[m].classifier_weight.copy()
            b = params[m].classifier_bias.copy()
            w[c] = np.mean([params[j].classifier_weight[c] for j in others], axis=0)
            b[c] = np.mean([params[j].classifier_bias[c] for j in others])
            model = params[m].with_classifier(w, b)
            out[i, c] = loss_ce(forward(model, probe)[0], probe.labels)
    return out


def test_class_loss_matrix_matches_brute_force(rng):
    layout = Layout(4, (5, 3), 4)
    params = [ModelParams(layout, rng.normal(size=layout.size)) for _ in range(3)]
    probe = Batch(rng.normal(size=(8, 4)), rng.integers(0, 4, 8))
    for m in range(3):
        np.testing.assert_allclose(
            class_loss_matrix(m, params, probe), brute_force_class_matrix(m, params, probe), rtol=1e-12
        )


def test_class_loss_matrix_identical_init_columns_constant(rng):
    layout = Layout(4, (5,), 3)
    p = ModelParams(layout, rng.normal(size=layout.size))
    probe = Batch(rng.normal(size=(6, 4)), rng.integers(0, 3, 6))
    mat = class_loss_matrix(2, [p] * 4, probe)
    own = loss_ce(forward(p, probe)[0], probe.labels)
    assert np.all(mat == mat[0]) and np.allclose(mat, own, rtol=1e-14)


def test_class_loss_matrix_shared_classifier_is_own_loss(rng):
    layout = Layout(4, (5,), 3)
    base = ModelParams(layout, rng.normal(size=layout.size))
    params = [base.with_theta(rng.normal(size=layout.repr_size)) for _ in range(3)]
    probe = Batch(rng.normal(size=(6, 4)), rng.integers(0, 3, 6))
    own = loss_ce(forward(params[0], probe)[0], probe.labels)
    np.testing.assert_allclose(class_loss_matrix(0, params, probe), own, rtol=1e-13)


def test_class_loss_matrix_two_client_scalar_oracle():
    p0 = scalar_model(1.0, 0.0, [1.0, 3.0], [0.0, 0.0])
    p1 = scalar_model(0.5, 0.5, [5.0, 7.0], [0.0, 0.0])
    xs, ys = [0.4, -0.8], [0, 1]
    probe = Batch(np.array(xs)[:, None], ys)
    hs = [math.tanh(1.0 * x) for x in xs]  # client 0's own representation
    expected = np.empty((2, 2))
    for i in range(2):
        other = [p0, p1][1 - i]
        for c in range(2):
            w = [1.0, 3.0]
            w[c] = other.classifier_weight[c, 0]
            expected[i, c] = ce_by_hand(hs, ys, w, [0.0, 0.0])
    np.testing.assert_allclose(class_loss_matrix(0, [p0, p1], probe), expected, rtol=1e-13)


# -- normalization ---------------------------------------------------------------------


def test_influence_vector_examples():
    assert np.allclose(influence_vector([0.3, 7.0, 2.0], 0.0), [1 / 3] * 3, atol=0)
    np.testing.assert_allclose(influence_vector([2.0, 1.0], 1.0), [2 / 3, 1 / 3], rtol=1e-14)
    np.testing.assert_allclose(influence_vector([2.0, 1.0, 1.0], 5.0), [32 / 34, 1 / 34, 1 / 34], rtol=1e-14)


def test_influence_matrix_examples():
    np.testing.assert_allclose(influence_matrix(np.array([[3.0, 1.0], [1.0, 1.0]]), 2.0), [[0.9, 0.5], [0.1, 0.5]], rtol=1e-14)
    np.testing.assert_allclose(influence_matrix(np.ones((3, 4)), 5.0), 1 / 3, rtol=1e-15)
    assert np.all(influence_matrix(np.random.default_rng(0).uniform(0.1, 3, (4, 5)), 0.0) == 0.25)


def test_all_zero_losses_fall_back_to_uniform():
    assert np.array_equal(influence_vector([0.0, 0.0, 0.0, 0.0], 5.0), [0.25] * 4)
    mat = influence_matrix(np.array([[0.0, 2.0], [0.0, 1.0]]), 1.0)
    np.testing.assert_allclose(mat, [[0.5, 2 / 3], [0.5, 1 / 3]])


def test_zero_loss_entry_gets_zero_weight():
    np.testing.assert_allclose(influence_vector([0.0, 1.0, 3.0], 1.0), [0.0, 0.25, 0.75])


def test_extreme_gamma_does_not_overflow():
    w = influence_vector([1e-300, 1e-290, 1e-295], 100.0)
    assert np.isfinite(w).all() and w[1] == pytest.approx(1.0)


@pytest.mark.parametrize("bad", [[-1.0, 1.0], [np.nan, 1.0], [np.inf, 1.0]])
def test_invalid_losses_rejected(bad):
    with pytest.raises(UsageError):
        influence_vector(bad, 1.0)


def test_negative_gamma_rejected():
    with pytest.raises(UsageError):
        influence_vector([1.0, 2.0], -1.0)


losses_strategy = arrays(
    np.float64, st.integers(2, 12), elements=st.floats(1e-3, 50.0, allow_nan=False)
)


@settings(max_examples=200, deadline=None)
@given(losses_strategy, st.sampled_from(GAMMAS))
def test_weights_normalized_and_nonnegative(losses, gamma):
    w = influence_vector(losses, gamma)
    assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(losses_strategy, st.sampled_from(GAMMAS[1:]), st.floats(1e-3, 1e3))
def test_weights_scale_invariant(losses, gamma, k):
    np.testing.assert_allclose(influence_vector(losses * k, gamma), influence_vector(losses, gamma), rtol=1e-9, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(losses_strategy, st.sampled_from(GAMMAS[1:]))
def test_weights_preserve_loss_order(losses, gamma):
    w = influence_vector(losses, gamma)
    i, j = np.argmax(losses), np.argmin(losses)
    assume(losses[i] > losses[j] * (1 + 1e-9))
    order = np.argsort(losses, kind="stable")
    for a, b in zip(order[:-1], order[1:]):
        if losses[b] > losses[a] * (1 + 1e-9):
            assert w[b] > w[a]


@settings(max_examples=100, deadline=None)
@given(losses_strategy)
def test_sharpening_with_gamma(losses):
    top = np.sort(losses)
    assume(top[-1] > top[-2] * (1 + 1e-6))
    maxima = [influence_vector(losses, g).max() for g in [0, 0.5, 1, 2, 5, 10, 50, 200, 5000]]
    assert all(b >= a - 1e-15 for a, b in zip(maxima, maxima[1:]))
    assert influence_vector(losses, 1e7).max() == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 6)), elements=st.floats(1e-3, 20.0)),
    st.sampled_from(GAMMAS),
)
def test_matrix_columns_normalized(losses, gamma):
    mat = influence_matrix(losses, gamma)
    assert np.all(mat >= 0)
    assert np.abs(mat.sum(axis=0) - 1).max() <= 1e-9
    for c in range(losses.shape[1]):
        np.testing.assert_allclose(mat[:, c], influence_weights(losses[:, c], gamma), rtol=1e-15)


def test_influence_can_be_asymmetric(rng):
    """lambda_m[i] need not equal lambda_i[m]."""
    layout = Layout(3, (4,), 3)
    params = [ModelParams(layout, rng.normal(size=layout.size)) for _ in range(3)]
    probes = [Batch(rng.normal(size=(10, 3)), rng.integers(0, 3, 10)) for _ in range(3)]
    lam = np.array([influence_vector(client_loss_vector(m, params, probes[m]), 5.0) for m in range(3)])
    assert not np.allclose(lam, lam.T, atol=1e-3)
