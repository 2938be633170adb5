# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy kernel backend.

Same signatures and same numerics as `numpy_kernels`; matrix-vector products
go through BLAS (dgemv/dger) so the large-model path keeps BLAS speed while
the per-call overhead of the many small ops drops well below numpy's.
The generic 2-D @ 2-D case is cold (tests only) and simply delegates to numpy.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh as ctanh
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

NAME = "c"


cdef inline double _sig(double v) noexcept nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


cdef inline void _mv(double[:, ::1] w, double[::1] x, double* y, double beta) noexcept nogil:
    # y <- w @ x + beta * y for row-major w (m, n)
    cdef int m = w.shape[0], n = w.shape[1], inc = 1
    cdef double alpha = 1.0
    cdef char t = b'T'
    dgemv(&t, &n, &m, &alpha, &w[0, 0], &n, &x[0], &inc, &beta, y, &inc)


cdef inline void _mtv(double[:, ::1] w, double[::1] g, double* y, double beta) noexcept nogil:
    # y <- w.T @ g + beta * y for row-major w (m, n)
    cdef int m = w.shape[0], n = w.shape[1], inc = 1
    cdef double alpha = 1.0
    cdef char t = b'N'
    dgemv(&t, &n, &m, &alpha, &w[0, 0], &n, &g[0], &inc, &beta, y, &inc)


cdef inline void _outer(double[::1] g, double[::1] x, double[:, ::1] out) noexcept nogil:
    # out <- g outer x, write-only (out may be uninitialized)
    cdef Py_ssize_t i, j, m = g.shape[0], n = x.shape[0]
    cdef double gi
    for i in range(m):
        gi = g[i]
        for j in range(n):
            out[i, j] = gi * x[j]


def sigmoid(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        of[i] = _sig(xf[i])
    return out


def matmul(a, b):
    if b.ndim == 1:
        return _matvec(a, b)
    return np.matmul(a, b)


def _matvec(double[:, ::1] a, double[::1] b):
    y = np.empty(a.shape[0], dtype=np.float64)
    cdef double[::1] yv = y
    _mv(a, b, &yv[0], 0.0)
    return y


def matmul_bwd(g, a, b):
    if b.ndim == 1:
        ga = np.empty((a.shape[0], a.shape[1]), dtype=np.float64)
        gb = np.empty(a.shape[1], dtype=np.float64)
        _matvec_bwd(g, a, b, ga, gb)
        return ga, gb
    return np.matmul(g, b.T), np.matmul(a.T, g)


def _matvec_bwd(double[::1] g, double[:, ::1] a, double[::1] b,
                double[:, ::1] ga, double[::1] gb):
    _outer(g, b, ga)
    _mtv(a, g, &gb[0], 0.0)


def linear(double[:, ::1] w, double[::1] x, double[::1] b):
    y = np.empty(w.shape[0], dtype=np.float64)
    cdef double[::1] yv = y
    cdef Py_ssize_t i
    _mv(w, x, &yv[0], 0.0)
    for i in range(yv.shape[0]):
        yv[i] += b[i]
    return y


def linear_bwd(double[::1] g, double[:, ::1] w, double[::1] x):
    gw = np.empty((w.shape[0], w.shape[1]), dtype=np.float64)
    gx = np.empty(w.shape[1], dtype=np.float64)
    cdef double[:, ::1] gwv = gw
    cdef double[::1] gxv = gx
    _outer(g, x, gwv)
    _mtv(w, g, &gxv[0], 0.0)
    return gw, gx


def gated_unit(double[::1] inp, double[:, ::1] w1, double[::1] b1,
               double[:, ::1] w2, double[::1] b2):
    cdef Py_ssize_t m = w1.shape[0], i
    out = np.empty(m, dtype=np.float64)
    gate = np.empty(m, dtype=np.float64)
    act = np.empty(m, dtype=np.float64)
    cdef double[::1] ov = out, gv = gate, av = act
    _mv(w1, inp, &gv[0], 0.0)
    _mv(w2, inp, &av[0], 0.0)
    for i in range(m):
        gv[i] = _sig(gv[i] + b1[i])
        av[i] = ctanh(av[i] + b2[i])
        ov[i] = gv[i] * av[i]
    return out, gate, act


def gated_unit_bwd(double[::1] g, double[::1] inp, double[:, ::1] w1,
                   double[:, ::1] w2, double[::1] gate, double[::1] act):
    cdef Py_ssize_t m = w1.shape[0], n = w1.shape[1], i
    g1 = np.empty(m, dtype=np.float64)
    g2 = np.empty(m, dtype=np.float64)
    gw1 = np.empty((m, n), dtype=np.float64)
    gw2 = np.empty((m, n), dtype=np.float64)
    ginp = np.empty(n, dtype=np.float64)
    cdef double[::1] g1v = g1, g2v = g2, giv = ginp
    cdef double[:, ::1] gw1v = gw1, gw2v = gw2
    for i in range(m):
        g1v[i] = (g[i] * act[i]) * gate[i] * (1.0 - gate[i])
        g2v[i] = (g[i] * gate[i]) * (1.0 - act[i] * act[i])
    _outer(g1v, inp, gw1v)
    _outer(g2v, inp, gw2v)
    _mtv(w1, g1v, &giv[0], 0.0)
    _mtv(w2, g2v, &giv[0], 1.0)
    return ginp, gw1, g1, gw2, g2


def gru_cell(double[::1] x, double[::1] h,
             double[:, ::1] wz, double[:, ::1] uz, double[::1] bz,
             double[:, ::1] wr, double[:, ::1] ur, double[::1] br,
             double[:, ::1] wn, double[:, ::1] un, double[::1] bn):
    cdef Py_ssize_t m = wz.shape[0], i
    h_new = np.empty(m, dtype=np.float64)
    z = np.empty(m, dtype=np.float64)
    r = np.empty(m, dtype=np.float64)
    c = np.empty(m, dtype=np.float64)
    rh = np.empty(m, dtype=np.float64)
    cdef double[::1] hv = h_new, zv = z, rv = r, cv = c, rhv = rh
    _mv(wz, x, &zv[0], 0.0)
    _mv(uz, h, &zv[0], 1.0)
    _mv(wr, x, &rv[0], 0.0)
    _mv(ur, h, &rv[0], 1.0)
    for i in range(m):
        zv[i] = _sig(zv[i] + bz[i])
        rv[i] = _sig(rv[i] + br[i])
        rhv[i] = rv[i] * h[i]
    _mv(wn, x, &cv[0], 0.0)
    _mv(un, rhv, &cv[0], 1.0)
    for i in range(m):
        cv[i] = ctanh(cv[i] + bn[i])
        hv[i] = zv[i] * h[i] + (1.0 - zv[i]) * cv[i]
    return h_new, z, r, c, rh


def gru_cell_bwd(double[::1] g, double[::1] x, double[::1] h,
                 double[:, ::1] wz, double[:, ::1] uz,
                 double[:, ::1] wr, double[:, ::1] ur,
                 double[:, ::1] wn, double[:, ::1] un,
                 double[::1] z, double[::1] r, double[::1] c, double[::1] rh):
    cdef Py_ssize_t m = wz.shape[0], n = wz.shape[1], i
    gz_pre = np.empty(m, dtype=np.float64)
    gr_pre = np.empty(m, dtype=np.float64)
    gc_pre = np.empty(m, dtype=np.float64)
    grh = np.empty(m, dtype=np.float64)
    gh = np.empty(m, dtype=np.float64)
    gx = np.empty(n, dtype=np.float64)
    gwz = np.empty((m, n), dtype=np.float64)
    guz = np.empty((m, m), dtype=np.float64)
    gwr = np.empty((m, n), dtype=np.float64)
    gur = np.empty((m, m), dtype=np.float64)
    gwn = np.empty((m, n), dtype=np.float64)
    gun = np.empty((m, m), dtype=np.float64)
    cdef double[::1] gzv = gz_pre, grv = gr_pre, gcv = gc_pre
    cdef double[::1] grhv = grh, ghv = gh, gxv = gx
    cdef double[:, ::1] gwzv = gwz, guzv = guz, gwrv = gwr
    cdef double[:, ::1] gurv = gur, gwnv = gwn, gunv = gun

    for i in range(m):
        gcv[i] = (g[i] * (1.0 - z[i])) * (1.0 - c[i] * c[i])
        ghv[i] = g[i] * z[i]
    _outer(gcv, x, gwnv)
    _outer(gcv, rh, gunv)
    _mtv(wn, gcv, &gxv[0], 0.0)
    _mtv(un, gcv, &grhv[0], 0.0)
    for i in range(m):
        ghv[i] += grhv[i] * r[i]
        gzv[i] = (g[i] * (h[i] - c[i])) * z[i] * (1.0 - z[i])
        grv[i] = (grhv[i] * h[i]) * r[i] * (1.0 - r[i])
    _outer(gzv, x, gwzv)
    _outer(gzv, h, guzv)
    _outer(grv, x, gwrv)
    _outer(grv, h, gurv)
    _mtv(wz, gzv, &gxv[0], 1.0)
    _mtv(wr, grv, &gxv[0], 1.0)
    _mtv(uz, gzv, &ghv[0], 1.0)
    _mtv(ur, grv, &ghv[0], 1.0)
    return gx, gh, gwz, guz, gz_pre, gwr, gur, gr_pre, gwn, gun, gc_pre


def masked_softmax(double[::1] logits, const unsigned char[::1] mask):
    cdef Py_ssize_t n = logits.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double m = 0.0, s = 0.0
    cdef bint seen = False
    for i in range(n):
        if mask[i] and (not seen or logits[i] > m):
            m = logits[i]
            seen = True
    for i in range(n):
        if mask[i]:
            ov[i] = exp(logits[i] - m)
            s += ov[i]
        else:
            ov[i] = 0.0
    for i in range(n):
        ov[i] /= s
    return out


def masked_softmax_bwd(double[::1] g, double[::1] probs):
    cdef Py_ssize_t n = probs.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double dot = 0.0
    for i in range(n):
        dot += g[i] * probs[i]
    for i in range(n):
        ov[i] = probs[i] * (g[i] - dot)
    return out
