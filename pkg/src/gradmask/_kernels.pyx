# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the numeric hot loops.

Mirrors gradmask._kernels_py operation-for-operation: left-to-right sums,
libm transcendentals, no FMA contraction (see setup.py flags), so results
are bitwise identical to the pure-Python fallback.
"""

from libc.math cimport exp, log, sqrt, tanh

import numpy as np

GELU_C0 = 0.7978845608028654
GELU_C1 = 0.044715

cdef double C0 = 0.7978845608028654
cdef double C1 = 0.044715


def matmul_nn(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double s
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out_arr


def matmul_nt(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double s
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[j, p]
            out[i, j] = s
    return out_arr


def matmul_tn(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double s
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[p, i] * b[p, j]
            out[i, j] = s
    return out_arr


def gelu_fw(x):
    x_flat = np.ascontiguousarray(x).reshape(-1)
    cdef double[::1] xv = x_flat
    cdef Py_ssize_t n = xv.shape[0], i
    cdef double v, u, t
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        v = xv[i]
        u = C0 * (v + C1 * v * v * v)
        t = tanh(u)
        out[i] = 0.5 * v * (1.0 + t)
    return out_arr.reshape(x.shape)


def gelu_bw(x, gout):
    x_flat = np.ascontiguousarray(x).reshape(-1)
    g_flat = np.ascontiguousarray(gout).reshape(-1)
    cdef double[::1] xv = x_flat
    cdef double[::1] gv = g_flat
    cdef Py_ssize_t n = xv.shape[0], i
    cdef double v, u, t, sech2, du
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        v = xv[i]
        u = C0 * (v + C1 * v * v * v)
        t = tanh(u)
        sech2 = 1.0 - t * t
        du = C0 * (1.0 + 3.0 * C1 * v * v)
        out[i] = gv[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du)
    return out_arr.reshape(x.shape)


def tanh_fw(x):
    x_flat = np.ascontiguousarray(x).reshape(-1)
    cdef double[::1] xv = x_flat
    cdef Py_ssize_t n = xv.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = tanh(xv[i])
    return out_arr.reshape(x.shape)


def softmax_fw(double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    cdef double mx, s, e
    out_arr = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(r):
        mx = x[i, 0]
        for j in range(1, c):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(c):
            e = exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(c):
            out[i, j] = out[i, j] / s
    return out_arr


def softmax_bw(double[:, ::1] p, double[:, ::1] gout):
    cdef Py_ssize_t r = p.shape[0], c = p.shape[1], i, j
    cdef double s
    out_arr = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += gout[i, j] * p[i, j]
        for j in range(c):
            out[i, j] = p[i, j] * (gout[i, j] - s)
    return out_arr


def layernorm_fw(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    cdef double s, m, q, d, rs
    y_arr = np.empty((r, c), dtype=np.float64)
    mean_arr = np.empty(r, dtype=np.float64)
    rstd_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += x[i, j]
        m = s / c
        q = 0.0
        for j in range(c):
            d = x[i, j] - m
            q += d * d
        rs = 1.0 / sqrt(q / c + eps)
        mean[i] = m
        rstd[i] = rs
        for j in range(c):
            y[i, j] = gain[j] * ((x[i, j] - m) * rs) + bias[j]
    return y_arr, mean_arr, rstd_arr


def layernorm_bw(double[:, ::1] x, double[::1] gain, double[::1] mean,
                 double[::1] rstd, double[:, ::1] gout):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    cdef double m, rs, s1, s2, gg, xhat
    gx_arr = np.empty((r, c), dtype=np.float64)
    ggain_arr = np.zeros(c, dtype=np.float64)
    gbias_arr = np.zeros(c, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    for i in range(r):
        m = mean[i]
        rs = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(c):
            gg = gout[i, j] * gain[j]
            s1 += gg
            s2 += gg * ((x[i, j] - m) * rs)
        for j in range(c):
            xhat = (x[i, j] - m) * rs
            gx[i, j] = rs * (gout[i, j] * gain[j] - s1 / c - xhat * s2 / c)
            ggain[j] += gout[i, j] * xhat
            gbias[j] += gout[i, j]
    return gx_arr, ggain_arr, gbias_arr


def ce_fw(double[:, ::1] logits, long long[::1] targets):
    cdef Py_ssize_t r = logits.shape[0], v = logits.shape[1], i, j
    cdef double mx, s, e, total = 0.0
    probs_arr = np.empty((r, v), dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    for i in range(r):
        mx = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(v):
            e = exp(logits[i, j] - mx)
            probs[i, j] = e
            s += e
        total += (mx + log(s)) - logits[i, targets[i]]
        for j in range(v):
            probs[i, j] = probs[i, j] / s
    return total / r, probs_arr


def mse_fw(a, b):
    a_flat = np.ascontiguousarray(a).reshape(-1)
    b_flat = np.ascontiguousarray(b).reshape(-1)
    cdef double[::1] av = a_flat
    cdef double[::1] bv = b_flat
    cdef Py_ssize_t n = av.shape[0], i
    cdef double s = 0.0, d
    for i in range(n):
        d = av[i] - bv[i]
        s += d * d
    return s / n


def reduce_sum(x):
    x_flat = np.ascontiguousarray(x).reshape(-1)
    cdef double[::1] xv = x_flat
    cdef Py_ssize_t n = xv.shape[0], i
    cdef double s = 0.0
    for i in range(n):
        s += xv[i]
    return s


def colsum(double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    out_arr = np.zeros(c, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(r):
        for j in range(c):
            out[j] += x[i, j]
    return out_arr


def kth_largest(x, m):
    """Value of the m-th largest element (1-indexed), via quickselect."""
    buf = np.ascontiguousarray(x).reshape(-1).copy()
    cdef double[::1] a = buf
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t target = n - m  # index in ascending order
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    while lo < hi:
        pivot = a[lo + (hi - lo) // 2]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                tmp = a[i]
                a[i] = a[j]
                a[j] = tmp
                i += 1
                j -= 1
        if target <= j:
            hi = j
        elif target >= i:
            lo = i
        else:
            break
    return a[target]


def fnv1a64(data):
    """64-bit FNV-1a hash of a bytes object."""
    cdef const unsigned char[::1] buf = data
    cdef Py_ssize_t n = buf.shape[0], i
    cdef unsigned long long h = 0xCBF29CE484222325ULL
    for i in range(n):
        h = (h ^ buf[i]) * 0x100000001B3ULL
    return h
