"""Compiled and numpy kernels must agree; each is also checked on its own."""
import numpy as np
import pytest

from conftest import bellman_ford, random_dyadic_graph
from vnla import _pykernels as py
from vnla import kernels

IMPLS = kernels.implementations()
OTHER = [name for name in IMPLS if name != "python"]


def test_dispatch_exposes_a_backend():
    assert kernels.BACKEND in IMPLS
    assert "python" in IMPLS


def _lstm_case(rng, nx=7, H=5):
    W = rng.normal(size=(4 * H, nx + H))
    b = rng.normal(size=4 * H)
    x, h, c = rng.normal(size=nx), rng.normal(size=H), rng.normal(size=H)
    return W, b, x, h, c


@pytest.mark.parametrize("name", OTHER)
def test_lstm_parity(name):
    impl = IMPLS[name]
    rng = np.random.default_rng(0)
    W, b, x, h, c = _lstm_case(rng)
    ref = py.lstm_forward(W, b, x, h, c)
    got = impl.lstm_forward(W, b, x, h, c)
    for r, g in zip(ref, got):
        np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-14)
    dh, dc = rng.normal(size=5), rng.normal(size=5)
    grads = []
    for k in (py, impl):
        dW, db = np.zeros_like(W), np.zeros_like(b)
        out = k.lstm_backward(W, x, h, c, ref[2], ref[3], dh, dc, dW, db)
        grads.append(list(out) + [dW, db])
    for r, g in zip(*grads):
        np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("name", OTHER)
@pytest.mark.parametrize("act", [kernels.ACT_NONE, kernels.ACT_TANH, kernels.ACT_RELU])
def test_linear_parity(name, act):
    impl = IMPLS[name]
    rng = np.random.default_rng(act)
    W, b, x = rng.normal(size=(4, 6)), rng.normal(size=4), rng.normal(size=6)
    y = py.linear_forward(W, b, x, act)
    np.testing.assert_allclose(impl.linear_forward(W, b, x, act), y, rtol=1e-12, atol=1e-14)
    dy = rng.normal(size=4)
    res = []
    for k in (py, impl):
        dW, db = np.ones_like(W), np.ones_like(b)  # accumulates on top of existing values
        res.append((k.linear_backward(W, x, y, dy, act, dW, db), dW, db))
    for r, g in zip(*res):
        np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("name", OTHER)
def test_attention_parity(name):
    impl = IMPLS[name]
    rng = np.random.default_rng(3)
    T, H, C = 6, 5, 4
    Wa, M, h = rng.normal(size=(H, H)), rng.normal(size=(T, H)), rng.normal(size=H)
    acc, u, v, w = rng.random(T), rng.normal(size=C), rng.normal(size=C), rng.normal(size=C)
    ref = py.attention_forward(Wa, M, h, acc, u, v, w)
    got = impl.attention_forward(Wa, M, h, acc, u, v, w)
    for r, g in zip(ref, got):
        np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-14)
    alpha, ctx, q, feat = ref
    dctx, dalpha = rng.normal(size=H), rng.normal(size=T)
    res = []
    for k in (py, impl):
        bufs = [np.zeros_like(Wa), np.zeros_like(M), np.zeros_like(u), np.zeros_like(v), np.zeros_like(w)]
        out = k.attention_backward(Wa, M, h, acc, u, w, alpha, q, feat, dctx, dalpha, *bufs)
        res.append(list(out) + bufs)
    for r, g in zip(*res):
        np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-14)


def test_attention_weights_normalised():
    rng = np.random.default_rng(4)
    for impl in IMPLS.values():
        alpha, *_ = impl.attention_forward(rng.normal(size=(3, 3)), rng.normal(size=(5, 3)) * 50,
                                           rng.normal(size=3), rng.random(5), rng.normal(size=2),
                                           rng.normal(size=2), rng.normal(size=2))
        assert abs(alpha.sum() - 1.0) < 1e-12 and np.all(alpha >= 0)


@pytest.mark.parametrize("name", list(IMPLS))
def test_dijkstra_matches_bellman_ford(name):
    impl = IMPLS[name]
    rng = np.random.default_rng(11)
    for _ in range(40):
        env = random_dyadic_graph(rng)
        indptr, indices, weights = env.csr
        sources = sorted({int(s) for s in rng.choice(env.num_viewpoints, size=2)})
        got = impl.dijkstra(indptr, indices, weights, sources)
        assert np.array_equal(got, bellman_ford(env, sources))


@pytest.mark.parametrize("name", OTHER)
def test_compiled_kernels_reject_non_contiguous(name):
    impl = IMPLS[name]
    W = np.zeros((8, 6))[:, ::2]
    with pytest.raises((TypeError, ValueError)):
        impl.linear_forward(W, np.zeros(8), np.zeros(3), 0)
