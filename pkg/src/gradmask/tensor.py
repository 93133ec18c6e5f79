"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward ops run whether or not a Graph is active; inside an active Graph
context, ops whose inputs require gradients append a node to the tape.
Graph.backward walks the tape in exact reverse construction order (every
node's inputs precede it, so this is a valid topological order) and
accumulates into each tensor's grad buffer.

All reductions run left to right through the backend kernels, so a run is
reproducible bit-for-bit and the compiled/pure backends agree exactly.
The tape is per-step: build a fresh Graph for every forward/backward pair.
"""

import numpy as np

from gradmask import backend as K
from gradmask import flops

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op received or produced NaN/Inf values."""


class GraphError(RuntimeError):
    """Tape misuse: nested graphs, double backward, or foreign tensors."""


class Tensor:
    """Row-major float64 array with a same-shaped gradient buffer.

    The grad buffer materializes lazily as zeros on first access; ops
    accumulate into it during backward.
    """

    __slots__ = ("values", "_grad", "requires_grad", "_graph")

    def __init__(self, values, requires_grad=False):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._graph = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def accumulate_grad(self, g):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        self._grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_ACTIVE = None


class Graph:
    """Recording tape for one forward/backward pass."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise GraphError("a Graph is already active; graphs do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def backward(self, loss):
        """Fill grad buffers of everything `loss` depends on."""
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise GraphError("backward requires a scalar Tensor loss")
        if loss._graph is not self:
            raise GraphError("loss was not produced by this graph")
        self._consumed = True
        loss.accumulate_grad(np.ones_like(loss.values))
        for out, backward_fn in reversed(self._nodes):
            if out._grad is not None:
                backward_fn(out._grad)


def _record(out, backward_fn):
    out._graph = _ACTIVE
    _ACTIVE._nodes.append((out, backward_fn))


def _make_out(values, parents, backward_fn):
    needs = _ACTIVE is not None and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    if needs:
        _record(out, backward_fn)
    return out


def _check_finite(op, *tensors):
    for t in tensors:
        if not np.isfinite(t.values).all():
            raise NonFiniteError(f"{op}: non-finite input values")


def _as_2d(arr):
    return arr.reshape(-1, arr.shape[-1])


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a, b):
    """2-D matrix product (m,k) @ (k,n)."""
    _check_finite("matmul", a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    flops.add("matmul", 2 * m * n * k)

    def backward(gout):
        if a.requires_grad:
            flops.add("matmul", 2 * m * k * n)
            a.accumulate_grad(K.matmul_nt(gout, b.values))
        if b.requires_grad:
            flops.add("matmul", 2 * k * n * m)
            b.accumulate_grad(K.matmul_tn(a.values, gout))

    return _make_out(K.matmul_nn(a.values, b.values), (a, b), backward)


def bmm(a, b, transpose_b=False):
    """Batched matrix product over a shared leading dim.

    (B,m,k) @ (B,k,n), or (B,m,k) @ (B,n,k)^T when transpose_b.
    """
    _check_finite("bmm", a, b)
    ok = (
        a.values.ndim == 3
        and b.values.ndim == 3
        and a.shape[0] == b.shape[0]
        and (a.shape[2] == b.shape[2] if transpose_b else a.shape[2] == b.shape[1])
    )
    if not ok:
        raise ShapeError(f"bmm(transpose_b={transpose_b}): {a.shape} @ {b.shape}")
    bs, m, k = a.shape
    n = b.shape[1] if transpose_b else b.shape[2]
    flops.add("matmul", 2 * bs * m * n * k)
    out = np.empty((bs, m, n), dtype=np.float64)
    fw = K.matmul_nt if transpose_b else K.matmul_nn
    for i in range(bs):
        out[i] = fw(a.values[i], b.values[i])

    def backward(gout):
        flops.add("matmul", 2 * bs * m * n * k * (int(a.requires_grad) + int(b.requires_grad)))
        if a.requires_grad:
            ga = np.empty_like(a.values)
            for i in range(bs):
                if transpose_b:
                    ga[i] = K.matmul_nn(gout[i], b.values[i])
                else:
                    ga[i] = K.matmul_nt(gout[i], b.values[i])
            a.accumulate_grad(ga)
        if b.requires_grad:
            gb = np.empty_like(b.values)
            for i in range(bs):
                if transpose_b:
                    gb[i] = K.matmul_tn(gout[i], a.values[i])
                else:
                    gb[i] = K.matmul_tn(a.values[i], gout[i])
            b.accumulate_grad(gb)

    return _make_out(out, (a, b), backward)


def add(a, b):
    """Elementwise add; `b` may broadcast over leading dims of `a`."""
    _check_finite("add", a, b)
    if a.shape != b.shape:
        if b.values.ndim >= a.values.ndim or a.shape[a.values.ndim - b.values.ndim:] != b.shape:
            raise ShapeError(f"add: {a.shape} + {b.shape} (only trailing broadcast)")
    flops.add("elementwise", a.size)

    def backward(gout):
        if a.requires_grad:
            a.accumulate_grad(gout)
        if b.requires_grad:
            if b.shape == a.shape:
                b.accumulate_grad(gout)
            else:
                g2 = gout.reshape(-1, b.size)
                flops.add("reduction", (g2.shape[0] - 1) * b.size)
                b.accumulate_grad(K.colsum(g2).reshape(b.shape))

    return _make_out(a.values + b.values, (a, b), backward)


def mul(a, b):
    """Elementwise product of same-shaped tensors."""
    _check_finite("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    flops.add("elementwise", a.size)

    def backward(gout):
        flops.add("elementwise", a.size * (int(a.requires_grad) + int(b.requires_grad)))
        if a.requires_grad:
            a.accumulate_grad(gout * b.values)
        if b.requires_grad:
            b.accumulate_grad(gout * a.values)

    return _make_out(a.values * b.values, (a, b), backward)


def scale(a, c):
    """Multiply by a Python scalar."""
    _check_finite("scale", a)
    c = float(c)
    flops.add("elementwise", a.size)

    def backward(gout):
        flops.add("elementwise", a.size)
        if a.requires_grad:
            a.accumulate_grad(gout * c)

    return _make_out(a.values * c, (a,), backward)


def relu(a):
    _check_finite("relu", a)
    flops.add("elementwise", a.size)

    def backward(gout):
        flops.add("elementwise", a.size)
        if a.requires_grad:
            a.accumulate_grad(gout * (a.values > 0.0))

    return _make_out(np.maximum(a.values, 0.0), (a,), backward)


def gelu(a):
    """GELU, tanh approximation: 0.5*x*(1+tanh(c0*(x+c1*x^3)))."""
    _check_finite("gelu", a)
    flops.add("elementwise", a.size)

    def backward(gout):
        flops.add("elementwise", a.size)
        if a.requires_grad:
            a.accumulate_grad(K.gelu_bw(a.values, gout))

    return _make_out(K.gelu_fw(a.values), (a,), backward)


def tanh(a):
    _check_finite("tanh", a)
    flops.add("elementwise", a.size)
    y = K.tanh_fw(a.values)

    def backward(gout):
        flops.add("elementwise", 3 * a.size)
        if a.requires_grad:
            a.accumulate_grad(gout * (1.0 - y * y))

    return _make_out(y, (a,), backward)


def softmax(a):
    """Softmax over the last axis."""
    _check_finite("softmax", a)
    if a.values.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"softmax: {a.shape}")
    x2 = _as_2d(a.values)
    r, c = x2.shape
    flops.add("softmax", r * (4 * c - 2))
    p = K.softmax_fw(x2)

    def backward(gout):
        flops.add("softmax", r * (4 * c - 1))
        if a.requires_grad:
            a.accumulate_grad(K.softmax_bw(p, _as_2d(gout)).reshape(a.shape))

    return _make_out(p.reshape(a.shape), (a,), backward)


def layer_norm(a, gain, bias, eps=LAYERNORM_EPS):
    """Normalize over the last axis, then scale by gain and shift by bias."""
    _check_finite("layer_norm", a, gain, bias)
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: x {a.shape}, gain {gain.shape}, bias {bias.shape}")
    x2 = _as_2d(a.values)
    r = x2.shape[0]
    flops.add("layernorm", r * (8 * c + 4))
    y, mean, rstd = K.layernorm_fw(x2, gain.values, bias.values, eps)

    def backward(gout):
        flops.add("layernorm", r * 17 * c)
        gx, ggain, gbias = K.layernorm_bw(x2, gain.values, mean, rstd, _as_2d(gout))
        if a.requires_grad:
            a.accumulate_grad(gx.reshape(a.shape))
        if gain.requires_grad:
            gain.accumulate_grad(ggain)
        if bias.requires_grad:
            bias.accumulate_grad(gbias)

    return _make_out(y.reshape(a.shape), (a, gain, bias), backward)


def embedding(table, ids):
    """Row lookup: out[..., :] = table[ids[...], :]. `ids` is an int array."""
    _check_finite("embedding", table)
    ids = np.asarray(ids)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding: table {table.shape} must be 2-D")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    flat = ids.reshape(-1)

    def backward(gout):
        if table.requires_grad:
            flops.add("elementwise", flat.size * table.shape[1])
            g = np.zeros_like(table.values)
            np.add.at(g, flat, gout.reshape(flat.size, table.shape[1]))
            table.accumulate_grad(g)

    return _make_out(table.values[flat].reshape(ids.shape + (table.shape[1],)),
                     (table,), backward)


def take_rows(a, idx):
    """Select rows of a 2-D tensor by an int index array."""
    _check_finite("take_rows", a)
    idx = np.asarray(idx)
    if a.values.ndim != 2:
        raise ShapeError(f"take_rows: {a.shape} must be 2-D")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= a.shape[0]:
        raise ShapeError(f"take_rows: indices outside [0, {a.shape[0]})")

    def backward(gout):
        if a.requires_grad:
            flops.add("elementwise", idx.size * a.shape[1])
            g = np.zeros_like(a.values)
            np.add.at(g, idx, gout)
            a.accumulate_grad(g)

    return _make_out(a.values[idx], (a,), backward)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")

    def backward(gout):
        if a.requires_grad:
            a.accumulate_grad(gout.reshape(a.shape))

    return _make_out(a.values.reshape(shape), (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.values.ndim)):
        raise ShapeError(f"transpose: axes {axes} for shape {a.shape}")
    inv = np.argsort(axes)

    def backward(gout):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(gout.transpose(inv)))

    return _make_out(np.ascontiguousarray(a.values.transpose(axes)), (a,), backward)


def sum_all(a):
    """Sum of all elements (left-to-right), as a scalar tensor."""
    _check_finite("sum_all", a)
    flops.add("reduction", max(a.size - 1, 0))

    def backward(gout):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.values, gout.item()))

    return _make_out(np.float64(K.reduce_sum(a.values)), (a,), backward)


def mean_all(a):
    """Mean of all elements, as a scalar tensor."""
    _check_finite("mean_all", a)
    n = a.size
    flops.add("reduction", max(n - 1, 0) + 1)

    def backward(gout):
        flops.add("elementwise", n)
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.values, gout.item() / n))

    return _make_out(np.float64(K.reduce_sum(a.values) / n), (a,), backward)


def cross_entropy(logits, targets):
    """Mean cross-entropy over rows of (..., vocab) logits vs int targets."""
    _check_finite("cross_entropy", logits)
    l2 = _as_2d(logits.values)
    r, v = l2.shape
    targets = np.ascontiguousarray(np.asarray(targets).reshape(-1), dtype=np.int64)
    if targets.shape[0] != r:
        raise ShapeError(f"cross_entropy: {logits.shape} logits vs {targets.shape} targets")
    if targets.min() < 0 or targets.max() >= v:
        raise ShapeError(f"cross_entropy: target ids outside [0, {v})")
    flops.add("loss", r * (4 * v + 2) + 1)
    loss, probs = K.ce_fw(l2, targets)

    def backward(gout):
        if logits.requires_grad:
            flops.add("loss", r * v + r + 1)
            g = probs * (gout.item() / r)
            g[np.arange(r), targets] -= gout.item() / r
            logits.accumulate_grad(g.reshape(logits.shape))

    return _make_out(np.float64(loss), (logits,), backward)


def mse(pred, target):
    """Mean squared error over all elements."""
    _check_finite("mse", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    n = pred.size
    flops.add("loss", 3 * n + 1)

    def backward(gout):
        flops.add("loss", 4 * n)
        d = (2.0 * gout.item() / n) * (pred.values - target.values)
        if pred.requires_grad:
            pred.accumulate_grad(d)
        if target.requires_grad:
            target.accumulate_grad(-d)

    return _make_out(np.float64(K.mse_fw(pred.values, target.values)), (pred, target), backward)
