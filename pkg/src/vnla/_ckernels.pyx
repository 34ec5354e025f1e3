# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``.

Same signatures, same in-place accumulation contract. Arrays must be
C-contiguous float64 (checked); matrix-vector work goes through BLAS, the
elementwise parts are fused loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp, INFINITY
from scipy.linalg.cython_blas cimport dgemv, dger

cnp.import_array()

BACKEND = "cython"

ACT_NONE = 0
ACT_TANH = 1
ACT_RELU = 2

cdef int ONE = 1
cdef double D_ONE = 1.0
cdef double D_ZERO = 0.0


cdef inline double* _p(object a) except NULL:
    cdef cnp.ndarray arr = <cnp.ndarray?>a
    if cnp.PyArray_TYPE(arr) != cnp.NPY_DOUBLE or not cnp.PyArray_IS_C_CONTIGUOUS(arr):
        raise TypeError("kernel arguments must be C-contiguous float64 arrays")
    return <double*>cnp.PyArray_DATA(arr)


cdef inline double _sig(double z) nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef inline void _matvec(double* W, int rows, int cols, int ld, double* x,
                         double beta, double* y) noexcept nogil:
    # y = W[:, :cols] @ x + beta*y, W row-major with row stride ld
    cdef char t = b'T'
    dgemv(&t, &cols, &rows, &D_ONE, W, &ld, x, &ONE, &beta, y, &ONE)


cdef inline void _matTvec(double* W, int rows, int cols, int ld, double* d,
                          double* out) noexcept nogil:
    # out = W[:, :cols].T @ d
    cdef char n = b'N'
    dgemv(&n, &cols, &rows, &D_ONE, W, &ld, d, &ONE, &D_ZERO, out, &ONE)


cdef inline void _outer_acc(double* dW, int rows, int cols, int ld, double* d,
                            double* x) noexcept nogil:
    # dW[:, :cols] += outer(d, x)
    dger(&cols, &rows, &D_ONE, x, &ONE, d, &ONE, dW, &ld)


def lstm_forward(W, b, x, h, c):
    cdef int H = h.shape[0], nx = x.shape[0], ld = W.shape[1], k
    cdef double* Wp = _p(W)
    cdef double* bp = _p(b)
    cdef double* xp = _p(x)
    cdef double* hp = _p(h)
    cdef double* cp = _p(c)
    gates_a = np.empty(4 * H)
    h_a = np.empty(H)
    c_a = np.empty(H)
    tc_a = np.empty(H)
    cdef double* g = _p(gates_a)
    cdef double* hn = _p(h_a)
    cdef double* cn = _p(c_a)
    cdef double* tc = _p(tc_a)
    with nogil:
        for k in range(4 * H):
            g[k] = bp[k]
        _matvec(Wp, 4 * H, nx, ld, xp, 1.0, g)
        _matvec(Wp + nx, 4 * H, H, ld, hp, 1.0, g)
        for k in range(2 * H):
            g[k] = _sig(g[k])
        for k in range(2 * H, 3 * H):
            g[k] = tanh(g[k])
        for k in range(3 * H, 4 * H):
            g[k] = _sig(g[k])
        for k in range(H):
            cn[k] = g[H + k] * cp[k] + g[k] * g[2 * H + k]
            tc[k] = tanh(cn[k])
            hn[k] = g[3 * H + k] * tc[k]
    return h_a, c_a, gates_a, tc_a


def lstm_backward(W, x, h, c, gates, tanh_c, dh_new, dc_new, dW, db):
    cdef int H = h.shape[0], nx = x.shape[0], ld = W.shape[1], k
    cdef double dct, ig, fg, gg, og
    cdef double* Wp = _p(W)
    cdef double* xp = _p(x)
    cdef double* hp = _p(h)
    cdef double* cp = _p(c)
    cdef double* g = _p(gates)
    cdef double* tc = _p(tanh_c)
    cdef double* dhn = _p(dh_new)
    cdef double* dcn = _p(dc_new)
    cdef double* dWp = _p(dW)
    cdef double* dbp = _p(db)
    dz_a = np.empty(4 * H)
    dx_a = np.empty(nx)
    dh_a = np.empty(H)
    dc_a = np.empty(H)
    cdef double* dz = _p(dz_a)
    cdef double* dx = _p(dx_a)
    cdef double* dh = _p(dh_a)
    cdef double* dc = _p(dc_a)
    with nogil:
        for k in range(H):
            ig = g[k]
            fg = g[H + k]
            gg = g[2 * H + k]
            og = g[3 * H + k]
            dct = dcn[k] + dhn[k] * og * (1.0 - tc[k] * tc[k])
            dz[k] = dct * gg * ig * (1.0 - ig)
            dz[H + k] = dct * cp[k] * fg * (1.0 - fg)
            dz[2 * H + k] = dct * ig * (1.0 - gg * gg)
            dz[3 * H + k] = dhn[k] * tc[k] * og * (1.0 - og)
            dc[k] = dct * fg
        for k in range(4 * H):
            dbp[k] += dz[k]
        _outer_acc(dWp, 4 * H, nx, ld, dz, xp)
        _outer_acc(dWp + nx, 4 * H, H, ld, dz, hp)
        _matTvec(Wp, 4 * H, nx, ld, dz, dx)
        _matTvec(Wp + nx, 4 * H, H, ld, dz, dh)
    return dx_a, dh_a, dc_a


def linear_forward(W, b, x, int act):
    cdef int m = W.shape[0], n = x.shape[0], ld = W.shape[1], r
    cdef double* Wp = _p(W)
    cdef double* bp = _p(b)
    cdef double* xp = _p(x)
    y_a = np.empty(m)
    cdef double* y = _p(y_a)
    with nogil:
        for r in range(m):
            y[r] = bp[r]
        _matvec(Wp, m, n, ld, xp, 1.0, y)
        if act == 1:
            for r in range(m):
                y[r] = tanh(y[r])
        elif act == 2:
            for r in range(m):
                if y[r] < 0.0:
                    y[r] = 0.0
    return y_a


def linear_backward(W, x, y, dy, int act, dW, db):
    cdef int m = W.shape[0], n = x.shape[0], ld = W.shape[1], r
    cdef double* Wp = _p(W)
    cdef double* xp = _p(x)
    cdef double* yp = _p(y)
    cdef double* dyp = _p(dy)
    cdef double* dWp = _p(dW)
    cdef double* dbp = _p(db)
    dz_a = np.empty(m)
    dx_a = np.empty(n)
    cdef double* dz = _p(dz_a)
    cdef double* dx = _p(dx_a)
    with nogil:
        for r in range(m):
            if act == 1:
                dz[r] = dyp[r] * (1.0 - yp[r] * yp[r])
            elif act == 2:
                dz[r] = dyp[r] if yp[r] > 0.0 else 0.0
            else:
                dz[r] = dyp[r]
            dbp[r] += dz[r]
        _outer_acc(dWp, m, n, ld, dz, xp)
        _matTvec(Wp, m, n, ld, dz, dx)
    return dx_a


def attention_forward(Wa, M, h, acc, u, v, wcov):
    cdef int L = M.shape[0], H = M.shape[1], C = u.shape[0], Hh = h.shape[0], i, j
    cdef double s, smax, tot
    cdef double* Wap = _p(Wa)
    cdef double* Mp = _p(M)
    cdef double* hp = _p(h)
    cdef double* ap = _p(acc)
    cdef double* up = _p(u)
    cdef double* vp = _p(v)
    cdef double* wc = _p(wcov)
    q_a = np.empty(H)
    feat_a = np.empty((L, C))
    alpha_a = np.empty(L)
    ctx_a = np.empty(H)
    cdef double* q = _p(q_a)
    cdef double* feat = _p(feat_a)
    cdef double* al = _p(alpha_a)
    cdef double* ctx = _p(ctx_a)
    cdef char t = b'T'
    cdef char n = b'N'
    with nogil:
        _matvec(Wap, H, Hh, Hh, hp, 0.0, q)
        # scores = M @ q
        dgemv(&t, &H, &L, &D_ONE, Mp, &H, q, &ONE, &D_ZERO, al, &ONE)
        smax = -INFINITY
        for i in range(L):
            s = al[i]
            for j in range(C):
                feat[i * C + j] = tanh(ap[i] * up[j] + vp[j])
                s = s + feat[i * C + j] * wc[j]
            al[i] = s
            if s > smax:
                smax = s
        tot = 0.0
        for i in range(L):
            al[i] = exp(al[i] - smax)
            tot = tot + al[i]
        for i in range(L):
            al[i] = al[i] / tot
        # ctx = M.T @ alpha
        dgemv(&n, &H, &L, &D_ONE, Mp, &H, al, &ONE, &D_ZERO, ctx, &ONE)
    return alpha_a, ctx_a, q_a, feat_a


def attention_backward(Wa, M, h, acc, u, wcov, alpha, q, feat,
                       dctx, dalpha, dWa, dM, du, dv, dwcov):
    cdef int L = M.shape[0], H = M.shape[1], C = u.shape[0], Hh = h.shape[0], i, j
    cdef double dot, dp, dsi, f
    cdef double* Wap = _p(Wa)
    cdef double* Mp = _p(M)
    cdef double* hp = _p(h)
    cdef double* ap = _p(acc)
    cdef double* up = _p(u)
    cdef double* wc = _p(wcov)
    cdef double* al = _p(alpha)
    cdef double* qp = _p(q)
    cdef double* fp = _p(feat)
    cdef double* dctxp = _p(dctx)
    cdef double* dalp = _p(dalpha)
    cdef double* dWap = _p(dWa)
    cdef double* dMp = _p(dM)
    cdef double* dup = _p(du)
    cdef double* dvp = _p(dv)
    cdef double* dwc = _p(dwcov)
    da_a = np.empty(L)
    ds_a = np.empty(L)
    dq_a = np.empty(H)
    dh_a = np.empty(Hh)
    dacc_a = np.zeros(L)
    cdef double* da = _p(da_a)
    cdef double* ds = _p(ds_a)
    cdef double* dq = _p(dq_a)
    cdef double* dh = _p(dh_a)
    cdef double* dacc = _p(dacc_a)
    cdef char t = b'T'
    cdef char n = b'N'
    with nogil:
        # da = M @ dctx + dalpha
        for i in range(L):
            da[i] = dalp[i]
        dgemv(&t, &H, &L, &D_ONE, Mp, &H, dctxp, &ONE, &D_ONE, da, &ONE)
        dot = 0.0
        for i in range(L):
            dot = dot + al[i] * da[i]
        for i in range(L):
            ds[i] = al[i] * (da[i] - dot)
        # dM += outer(alpha, dctx) + outer(ds, q)
        dger(&H, &L, &D_ONE, dctxp, &ONE, al, &ONE, dMp, &H)
        dger(&H, &L, &D_ONE, qp, &ONE, ds, &ONE, dMp, &H)
        # dq = M.T @ ds
        dgemv(&n, &H, &L, &D_ONE, Mp, &H, ds, &ONE, &D_ZERO, dq, &ONE)
        for i in range(L):
            dsi = ds[i]
            for j in range(C):
                f = fp[i * C + j]
                dwc[j] += dsi * f
                dp = dsi * wc[j] * (1.0 - f * f)
                dup[j] += ap[i] * dp
                dvp[j] += dp
                dacc[i] += dp * up[j]
        _outer_acc(dWap, H, Hh, Hh, dq, hp)
        _matTvec(Wap, H, Hh, Hh, dq, dh)
    return dh_a, dacc_a


def dijkstra(indptr, indices, weights, sources):
    """Dense O(n^2) multi-source Dijkstra; n is a few hundred at most."""
    cdef long[::1] ip = indptr
    cdef long[::1] ix = indices
    cdef double[::1] wt = weights
    cdef Py_ssize_t n = ip.shape[0] - 1, it, u, w, k
    cdef double best, nd
    dist_a = np.full(n, np.inf)
    done_a = np.zeros(n, dtype=np.uint8)
    cdef double[::1] dist = dist_a
    cdef unsigned char[::1] done = done_a
    for s in sources:
        dist[<Py_ssize_t>s] = 0.0
    with nogil:
        for it in range(n):
            u = -1
            best = INFINITY
            for k in range(n):
                if not done[k] and dist[k] < best:
                    best = dist[k]
                    u = k
            if u < 0:
                break
            done[u] = 1
            for k in range(ip[u], ip[u + 1]):
                w = ix[k]
                nd = best + wt[k]
                if nd < dist[w]:
                    dist[w] = nd
    return dist_a
