"""Pure-numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and semantics. Gradient-accumulating arguments (``dW``, ``db``...) are
updated in place; everything else is returned.
"""
import heapq

import numpy as np

BACKEND = "python"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(W, b, x, h, c):
    """One step of a 4-gate LSTM cell (gate order i, f, g, o).

    ``W`` has shape (4H, len(x) + H) and multiplies ``[x; h]``.
    Returns ``(h_new, c_new, gates, tanh_c)``; the last two are the cache
    needed by :func:`lstm_backward`.
    """
    H = h.shape[0]
    nx = x.shape[0]
    z = W[:, :nx] @ x + W[:, nx:] @ h + b
    gates = np.empty(4 * H)
    gates[: 2 * H] = _sigmoid(z[: 2 * H])
    gates[2 * H : 3 * H] = np.tanh(z[2 * H : 3 * H])
    gates[3 * H :] = _sigmoid(z[3 * H :])
    i, f, g, o = gates[:H], gates[H : 2 * H], gates[2 * H : 3 * H], gates[3 * H :]
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, gates, tanh_c


def lstm_backward(W, x, h, c, gates, tanh_c, dh_new, dc_new, dW, db):
    H = h.shape[0]
    nx = x.shape[0]
    i, f, g, o = gates[:H], gates[H : 2 * H], gates[2 * H : 3 * H], gates[3 * H :]
    dct = dc_new + dh_new * o * (1.0 - tanh_c * tanh_c)
    dz = np.empty(4 * H)
    dz[:H] = dct * g * i * (1.0 - i)
    dz[H : 2 * H] = dct * c * f * (1.0 - f)
    dz[2 * H : 3 * H] = dct * i * (1.0 - g * g)
    dz[3 * H :] = dh_new * tanh_c * o * (1.0 - o)
    dW[:, :nx] += np.outer(dz, x)
    dW[:, nx:] += np.outer(dz, h)
    db += dz
    dx = W[:, :nx].T @ dz
    dh = W[:, nx:].T @ dz
    dc = dct * f
    return dx, dh, dc


# activation codes shared with the compiled kernels
ACT_NONE, ACT_TANH, ACT_RELU = 0, 1, 2


def linear_forward(W, b, x, act):
    y = W @ x + b
    if act == ACT_TANH:
        y = np.tanh(y)
    elif act == ACT_RELU:
        y = np.maximum(y, 0.0)
    return y


def linear_backward(W, x, y, dy, act, dW, db):
    if act == ACT_TANH:
        dz = dy * (1.0 - y * y)
    elif act == ACT_RELU:
        dz = dy * (y > 0.0)
    else:
        dz = dy
    dW += np.outer(dz, x)
    db += dz
    return W.T @ dz


def attention_forward(Wa, M, h, acc, u, v, wcov):
    """Multiplicative attention with a coverage term.

    score_i = m_i . (Wa h) + wcov . tanh(acc_i * u + v)
    Returns ``(alpha, ctx, q, feat)``; ``q`` and ``feat`` are cache.
    """
    q = Wa @ h
    feat = np.tanh(np.outer(acc, u) + v)
    s = M @ q + feat @ wcov
    s = s - s.max()
    e = np.exp(s)
    alpha = e / e.sum()
    ctx = alpha @ M
    return alpha, ctx, q, feat


def attention_backward(Wa, M, h, acc, u, wcov, alpha, q, feat,
                       dctx, dalpha, dWa, dM, du, dv, dwcov):
    """Returns ``(dh, dacc)``; parameter and memory grads accumulate in place."""
    da = M @ dctx + dalpha
    ds = alpha * (da - alpha @ da)
    dM += np.outer(alpha, dctx) + np.outer(ds, q)
    dq = ds @ M
    dwcov += ds @ feat
    dpre = np.outer(ds, wcov) * (1.0 - feat * feat)
    du += acc @ dpre
    dv += dpre.sum(axis=0)
    dacc = dpre @ u
    dWa += np.outer(dq, h)
    dh = Wa.T @ dq
    return dh, dacc


def dijkstra(indptr, indices, weights, sources):
    """Multi-source shortest distances over a CSR adjacency."""
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    heap = []
    for s in sources:
        dist[s] = 0.0
        heap.append((0.0, int(s)))
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for k in range(indptr[u], indptr[u + 1]):
            w = indices[k]
            nd = d + weights[k]
            if nd < dist[w]:
                dist[w] = nd
                heapq.heappush(heap, (nd, int(w)))
    return dist
