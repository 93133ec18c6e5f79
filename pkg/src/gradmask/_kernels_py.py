"""Pure-Python fallback kernels.

Reference implementation of the numeric hot loops. The compiled extension
(gradmask._kernels) mirrors these functions operation-for-operation: every
sum runs left to right and transcendental functions come from the platform
libm in both backends, so the two produce bitwise-identical float64 results.
Keep the two files in sync when touching arithmetic.
"""

import math

import numpy as np

# tanh-approximation GELU constants (shared with the compiled kernels).
GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def matmul_nn(a, b):
    """(m,k) @ (k,n) -> (m,n), contraction left to right over k."""
    m, k = a.shape
    k2, n = b.shape
    al = a.tolist()
    bl = b.tolist()
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        ai = al[i]
        row = out[i]
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += ai[p] * bl[p][j]
            row[j] = s
    return out


def matmul_nt(a, b):
    """(m,k) @ (n,k)^T -> (m,n): out[i,j] = sum_p a[i,p]*b[j,p]."""
    m, k = a.shape
    n = b.shape[0]
    al = a.tolist()
    bl = b.tolist()
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        ai = al[i]
        row = out[i]
        for j in range(n):
            bj = bl[j]
            s = 0.0
            for p in range(k):
                s += ai[p] * bj[p]
            row[j] = s
    return out


def matmul_tn(a, b):
    """(k,m)^T @ (k,n) -> (m,n): out[i,j] = sum_p a[p,i]*b[p,j]."""
    k, m = a.shape
    n = b.shape[1]
    al = a.tolist()
    bl = b.tolist()
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        row = out[i]
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += al[p][i] * bl[p][j]
            row[j] = s
    return out


def gelu_fw(x):
    xl = x.ravel().tolist()
    out = np.empty(len(xl), dtype=np.float64)
    for i, v in enumerate(xl):
        u = GELU_C0 * (v + GELU_C1 * v * v * v)
        t = math.tanh(u)
        out[i] = 0.5 * v * (1.0 + t)
    return out.reshape(x.shape)


def gelu_bw(x, gout):
    xl = x.ravel().tolist()
    gl = gout.ravel().tolist()
    out = np.empty(len(xl), dtype=np.float64)
    for i, v in enumerate(xl):
        u = GELU_C0 * (v + GELU_C1 * v * v * v)
        t = math.tanh(u)
        sech2 = 1.0 - t * t
        du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v)
        out[i] = gl[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du)
    return out.reshape(x.shape)


def tanh_fw(x):
    xl = x.ravel().tolist()
    out = np.empty(len(xl), dtype=np.float64)
    for i, v in enumerate(xl):
        out[i] = math.tanh(v)
    return out.reshape(x.shape)


def softmax_fw(x):
    """Row softmax of a (rows, cols) array, numerically stabilized."""
    r, c = x.shape
    xl = x.tolist()
    out = np.empty((r, c), dtype=np.float64)
    for i in range(r):
        xi = xl[i]
        mx = xi[0]
        for j in range(1, c):
            if xi[j] > mx:
                mx = xi[j]
        s = 0.0
        row = out[i]
        for j in range(c):
            e = math.exp(xi[j] - mx)
            row[j] = e
            s += e
        for j in range(c):
            row[j] = row[j] / s
    return out


def softmax_bw(p, gout):
    r, c = p.shape
    pl = p.tolist()
    gl = gout.tolist()
    out = np.empty((r, c), dtype=np.float64)
    for i in range(r):
        pi = pl[i]
        gi = gl[i]
        s = 0.0
        for j in range(c):
            s += gi[j] * pi[j]
        row = out[i]
        for j in range(c):
            row[j] = pi[j] * (gi[j] - s)
    return out


def layernorm_fw(x, gain, bias, eps):
    r, c = x.shape
    xl = x.tolist()
    gl = gain.tolist()
    bl = bias.tolist()
    y = np.empty((r, c), dtype=np.float64)
    mean = np.empty(r, dtype=np.float64)
    rstd = np.empty(r, dtype=np.float64)
    for i in range(r):
        xi = xl[i]
        s = 0.0
        for j in range(c):
            s += xi[j]
        m = s / c
        q = 0.0
        for j in range(c):
            d = xi[j] - m
            q += d * d
        rs = 1.0 / math.sqrt(q / c + eps)
        mean[i] = m
        rstd[i] = rs
        row = y[i]
        for j in range(c):
            row[j] = gl[j] * ((xi[j] - m) * rs) + bl[j]
    return y, mean, rstd


def layernorm_bw(x, gain, mean, rstd, gout):
    r, c = x.shape
    xl = x.tolist()
    gl = gain.tolist()
    ml = mean.tolist()
    rl = rstd.tolist()
    go = gout.tolist()
    gx = np.empty((r, c), dtype=np.float64)
    ggain = np.zeros(c, dtype=np.float64)
    gbias = np.zeros(c, dtype=np.float64)
    for i in range(r):
        xi = xl[i]
        gi = go[i]
        m = ml[i]
        rs = rl[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(c):
            gg = gi[j] * gl[j]
            s1 += gg
            s2 += gg * ((xi[j] - m) * rs)
        row = gx[i]
        for j in range(c):
            xhat = (xi[j] - m) * rs
            row[j] = rs * (gi[j] * gl[j] - s1 / c - xhat * s2 / c)
            ggain[j] += gi[j] * xhat
            gbias[j] += gi[j]
    return gx, ggain, gbias


def ce_fw(logits, targets):
    """Mean cross-entropy of (rows, vocab) logits vs int targets.

    Returns (loss, probs); probs is the row softmax, cached for backward.
    """
    r, v = logits.shape
    ll = logits.tolist()
    tl = targets.tolist()
    probs = np.empty((r, v), dtype=np.float64)
    total = 0.0
    for i in range(r):
        li = ll[i]
        mx = li[0]
        for j in range(1, v):
            if li[j] > mx:
                mx = li[j]
        s = 0.0
        row = probs[i]
        for j in range(v):
            e = math.exp(li[j] - mx)
            row[j] = e
            s += e
        total += (mx + math.log(s)) - li[tl[i]]
        for j in range(v):
            row[j] = row[j] / s
    return total / r, probs


def mse_fw(a, b):
    al = a.ravel().tolist()
    bl = b.ravel().tolist()
    s = 0.0
    for i in range(len(al)):
        d = al[i] - bl[i]
        s += d * d
    return s / len(al)


def reduce_sum(x):
    s = 0.0
    for v in x.ravel().tolist():
        s += v
    return s


def colsum(x):
    """Column sums of a (rows, cols) array, rows accumulated in order."""
    r, c = x.shape
    xl = x.tolist()
    out = np.zeros(c, dtype=np.float64)
    for i in range(r):
        xi = xl[i]
        for j in range(c):
            out[j] += xi[j]
    return out


def kth_largest(x, m):
    """Value of the m-th largest element (1-indexed) of a flat array."""
    n = x.size
    return sorted(x.ravel().tolist())[n - m]


def fnv1a64(data):
    """64-bit FNV-1a hash of a bytes object."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h
