"""Compiled and pure kernels must agree bit-for-bit."""

import numpy as np
import pytest

from gradmask import _kernels_py as pure
from gradmask import backend

compiled = pytest.importorskip("gradmask._kernels")

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (3, 5, 2), (8, 8, 8), (7, 13, 4)])
def test_matmul_variants_bitwise(m, k, n):
    a, b = rand(m, k), rand(k, n)
    assert (compiled.matmul_nn(a, b) == pure.matmul_nn(a, b)).all()
    at, bt = rand(m, k), rand(n, k)
    assert (compiled.matmul_nt(at, bt) == pure.matmul_nt(at, bt)).all()
    a2, b2 = rand(k, m), rand(k, n)
    assert (compiled.matmul_tn(a2, b2) == pure.matmul_tn(a2, b2)).all()


def test_matmul_matches_numpy():
    a, b = rand(6, 4), rand(4, 5)
    assert np.allclose(compiled.matmul_nn(a, b), a @ b, rtol=1e-13)
    assert np.allclose(compiled.matmul_nt(a, b.T.copy()), a @ b, rtol=1e-13)
    assert np.allclose(compiled.matmul_tn(a.T.copy(), b), a @ b, rtol=1e-13)


@pytest.mark.parametrize("shape", [(4,), (3, 7), (2, 3, 4)])
def test_pointwise_kernels_bitwise(shape):
    x, g = rand(*shape), rand(*shape)
    assert (compiled.gelu_fw(x) == pure.gelu_fw(x)).all()
    assert (compiled.gelu_bw(x, g) == pure.gelu_bw(x, g)).all()
    assert (compiled.tanh_fw(x) == pure.tanh_fw(x)).all()


def test_row_kernels_bitwise():
    x, g = rand(9, 6), rand(9, 6)
    pc, pp = compiled.softmax_fw(x), pure.softmax_fw(x)
    assert (pc == pp).all()
    assert (compiled.softmax_bw(pc, g) == pure.softmax_bw(pp, g)).all()
    gain, bias = rand(6), rand(6)
    yc, mc, rc = compiled.layernorm_fw(x, gain, bias, 1e-5)
    yp, mp, rp = pure.layernorm_fw(x, gain, bias, 1e-5)
    assert (yc == yp).all() and (mc == mp).all() and (rc == rp).all()
    for out_c, out_p in zip(compiled.layernorm_bw(x, gain, mc, rc, g),
                            pure.layernorm_bw(x, gain, mp, rp, g)):
        assert (out_c == out_p).all()


def test_loss_and_reduce_kernels_bitwise():
    x = rand(8, 11)
    t = RNG.integers(0, 11, size=8).astype(np.int64)
    lc, pc = compiled.ce_fw(x, t)
    lp, pp = pure.ce_fw(x, t)
    assert lc == lp and (pc == pp).all()
    a, b = rand(40), rand(40)
    assert compiled.mse_fw(a, b) == pure.mse_fw(a, b)
    assert compiled.reduce_sum(a) == pure.reduce_sum(a)
    assert (compiled.colsum(x) == pure.colsum(x)).all()


def test_softmax_rows_normalized():
    p = compiled.softmax_fw(rand(20, 9) * 10)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p >= 0)


@pytest.mark.parametrize("n,m", [(1, 1), (10, 3), (1001, 250), (64, 64)])
def test_kth_largest_matches_sort(n, m):
    x = rand(n)
    expected = np.sort(x)[n - m]
    assert compiled.kth_largest(x, m) == expected
    assert pure.kth_largest(x, m) == expected


def test_kth_largest_with_ties():
    x = np.array([1.0, 2.0, 2.0, 2.0, 3.0])
    for m, want in [(1, 3.0), (2, 2.0), (3, 2.0), (4, 2.0), (5, 1.0)]:
        assert compiled.kth_largest(x, m) == want
    allsame = np.full(17, 0.25)
    assert compiled.kth_largest(allsame, 5) == 0.25


def test_fnv1a64_vectors():
    # standard FNV-1a 64 vectors
    assert pure.fnv1a64(b"") == 0xCBF29CE484222325
    assert pure.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    data = bytes(RNG.integers(0, 256, size=4096, dtype=np.uint8))
    assert compiled.fnv1a64(data) == pure.fnv1a64(data)


def test_backend_selection_roundtrip():
    assert backend.backend_name() in ("compiled", "pure")
    original = backend.backend_name()
    backend.set_backend("pure")
    assert backend.backend_name() == "pure"
    x = rand(5, 5)
    via_pure = backend.matmul_nn(x, x)
    backend.set_backend("auto")
    assert backend.backend_name() == ("compiled" if backend.compiled_available() else "pure")
    assert (backend.matmul_nn(x, x) == via_pure).all()
    backend.set_backend(original)
    with pytest.raises(ValueError):
        backend.set_backend("gpu")
