import numpy as np
import pytest

from influfl import _backend
from influfl.config import RunConfig
from influfl.orchestration import run_experiment

needs_compiled = pytest.mark.skipif(not _backend.compiled_available(), reason="extension not built")


@pytest.fixture
def both():
    return _backend.load("python"), _backend.load("compiled")


@needs_compiled
@pytest.mark.parametrize("act", [0, 1, 2])
def test_dense_kernels_agree(both, rng, act):
    py, cy = both
    x, w, b = rng.normal(size=(7, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    out_py, out_cy = py.dense_forward(x, w, b, act), cy.dense_forward(x, w, b, act)
    np.testing.assert_allclose(out_cy, out_py, rtol=1e-13, atol=1e-14)
    go = rng.normal(size=(7, 4))
    grads = []
    for k, out in ((py, out_py), (cy, out_cy)):
        gw, gb = np.empty_like(w), np.empty_like(b)
        dx = k.dense_backward(go, out, x, w, act, gw, gb, True)
        grads.append((gw, gb, dx))
        assert k.dense_backward(go, out, x, w, act, gw, gb, False) is None
    for a, c in zip(*grads):
        np.testing.assert_allclose(c, a, rtol=1e-12, atol=1e-14)


@needs_compiled
def test_softmax_and_adam_agree(both, rng):
    py, cy = both
    logits, labels = rng.normal(size=(9, 6)) * 10, rng.integers(0, 6, 9).astype(np.int64)
    g_py, g_cy = np.empty_like(logits), np.empty_like(logits)
    assert cy.softmax_xent(logits, labels, g_cy) == pytest.approx(py.softmax_xent(logits, labels, g_py), rel=1e-14)
    np.testing.assert_allclose(g_cy, g_py, rtol=1e-12, atol=1e-16)
    assert cy.softmax_xent(logits, labels, None) == pytest.approx(py.softmax_xent(logits, labels, None), rel=1e-14)
    start = rng.normal(size=50)
    state = [(start.copy(), np.zeros(50), np.zeros(50)) for _ in range(2)]
    g = rng.normal(size=50)
    for step in (1, 2, 3):
        for k, (p, m, v) in zip((py, cy), state):
            k.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, step)
    for a, c in zip(*state):
        np.testing.assert_allclose(c, a, rtol=1e-14, atol=1e-16)


@needs_compiled
def test_backends_give_matching_runs():
    cfg = RunConfig().replace(rounds=2, seeds=(0,), data=dict(train_per_class=20, test_per_class=10))
    flat = {}
    for choice in ("python", "compiled"):
        previous = _backend.set_backend(choice)
        try:
            result = run_experiment(cfg, seed=0)
        finally:
            _backend.set_backend(previous)
        flat[choice] = np.concatenate([s.params.flat for s in result.states])
    np.testing.assert_allclose(flat["compiled"], flat["python"], rtol=1e-9, atol=1e-12)


def test_set_backend_round_trip():
    previous = _backend.set_backend("python")
    assert _backend.name == "python" and _backend.active is _backend.load("python")
    assert _backend.set_backend(previous) == "python"
    with pytest.raises(ValueError):
        _backend.set_backend("gpu")
