# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``. Same signatures."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

# masks at or below this add at least 1e8 of headroom, far past exp underflow
cdef double SKIP = -1e8


def softmax_forward(x, mask=None):
    xa = np.ascontiguousarray(x, dtype=np.float64)
    shape = tuple(xa.shape)
    cdef Py_ssize_t nd = len(shape)
    cdef Py_ssize_t n = shape[nd - 1]
    cdef Py_ssize_t m = shape[nd - 2] if nd >= 2 else 1
    cdef Py_ssize_t rows = xa.size // n
    cdef const double[:, ::1] xv = xa.reshape(rows, n)
    out = np.empty((rows, n))
    cdef double[:, ::1] ov = out
    cdef const double[:, ::1] mv
    cdef bint has_mask = mask is not None
    if has_mask:
        mv = np.ascontiguousarray(mask, dtype=np.float64)
    cdef Py_ssize_t r, j, mr
    cdef double mx, s, v
    with nogil:
        for r in range(rows):
            mr = r % m
            mx = -1e308
            for j in range(n):
                v = xv[r, j]
                if has_mask:
                    v = v + mv[mr, j]
                ov[r, j] = v
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(n):
                # forbidden slots underflow to exactly zero; skip the exp
                if has_mask and mv[mr, j] <= SKIP:
                    ov[r, j] = 0.0
                    continue
                v = exp(ov[r, j] - mx)
                ov[r, j] = v
                s = s + v
            s = 1.0 / s
            for j in range(n):
                ov[r, j] = ov[r, j] * s
    return out.reshape(shape)


def softmax_backward(y, g):
    ya = np.ascontiguousarray(y, dtype=np.float64)
    ga = np.ascontiguousarray(g, dtype=np.float64)
    shape = tuple(ya.shape)
    cdef Py_ssize_t n = shape[len(shape) - 1]
    cdef Py_ssize_t rows = ya.size // n
    cdef const double[:, ::1] yv = ya.reshape(rows, n)
    cdef const double[:, ::1] gv = ga.reshape(rows, n)
    out = np.empty((rows, n))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, j
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot = dot + gv[r, j] * yv[r, j]
            for j in range(n):
                ov[r, j] = yv[r, j] * (gv[r, j] - dot)
    return out.reshape(shape)


def layernorm_forward(x, gamma, beta, double eps):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    y = np.empty((rows, d))
    xhat = np.empty((rows, d))
    rstd = np.empty(rows)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] hv = xhat
    cdef double[::1] rv = rstd
    cdef Py_ssize_t r, j
    cdef double mu, var, c, rs
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu = mu + xv[r, j]
            mu = mu / d
            var = 0.0
            for j in range(d):
                c = xv[r, j] - mu
                var = var + c * c
            var = var / d
            rs = 1.0 / sqrt(var + eps)
            rv[r] = rs
            for j in range(d):
                c = (xv[r, j] - mu) * rs
                hv[r, j] = c
                yv[r, j] = c * gv[j] + bv[j]
    return y, xhat, rstd


def layernorm_backward(g, xhat, rstd, gamma):
    cdef const double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef const double[::1] rv = np.ascontiguousarray(rstd, dtype=np.float64)
    cdef const double[::1] gam = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef Py_ssize_t rows = gv.shape[0]
    cdef Py_ssize_t d = gv.shape[1]
    dx = np.empty((rows, d))
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    cdef double[:, ::1] dxv = dx
    cdef double[::1] dgv = dgamma
    cdef double[::1] dbv = dbeta
    cdef Py_ssize_t r, j
    cdef double mg, mgh, gx
    with nogil:
        for r in range(rows):
            mg = 0.0
            mgh = 0.0
            for j in range(d):
                gx = gv[r, j] * gam[j]
                mg = mg + gx
                mgh = mgh + gx * hv[r, j]
                dgv[j] = dgv[j] + gv[r, j] * hv[r, j]
                dbv[j] = dbv[j] + gv[r, j]
            mg = mg / d
            mgh = mgh / d
            for j in range(d):
                gx = gv[r, j] * gam[j]
                dxv[r, j] = (gx - mg - hv[r, j] * mgh) * rv[r]
    return dx, dgamma, dbeta


def segment_max_forward(x, starts, lengths):
    cdef const double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const cnp.int64_t[::1] sv = np.ascontiguousarray(starts, dtype=np.int64)
    cdef const cnp.int64_t[::1] lv = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t B = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[2]
    out = np.empty((B, d))
    arg = np.empty((B, d), dtype=np.int64)
    cdef double[:, ::1] ov = out
    cdef cnp.int64_t[:, ::1] av = arg
    cdef Py_ssize_t b, j, t, s, e, best
    cdef double mx
    with nogil:
        for b in range(B):
            s = sv[b]
            e = s + lv[b]
            for j in range(d):
                best = s
                mx = xv[b, s, j]
                for t in range(s + 1, e):
                    # strict > keeps the lowest index on ties
                    if xv[b, t, j] > mx:
                        mx = xv[b, t, j]
                        best = t
                ov[b, j] = mx
                av[b, j] = best
    return out, arg
