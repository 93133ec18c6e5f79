"""Benchmark the compiled kernels against the pure-Python fallback.

Both backends implement identical arithmetic (same operation order, same
libm), so outputs are verified bitwise before timing. Run:

    python benchmarks/backend_bench.py [--repeats N]
"""

import argparse
import time

import numpy as np

from gradmask import _kernels_py as pure
from gradmask import backend


def _assert_same(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _assert_same(x, y)
    elif isinstance(a, (float, int)):
        assert a == b, "backend results differ"
    else:
        assert (np.asarray(a) == np.asarray(b)).all(), "backend results differ"


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases():
    rng = np.random.default_rng(0)
    m64 = rng.standard_normal((64, 64))
    m128 = rng.standard_normal((128, 128))
    rows = rng.standard_normal((512, 64))
    gain, bias = rng.standard_normal(64), rng.standard_normal(64)
    flat = rng.standard_normal(100_000)
    targets = rng.integers(0, 64, size=512).astype(np.int64)
    blob = rng.integers(0, 256, size=1_000_000, dtype=np.uint8).tobytes()
    yield "matmul 64x64x64", "matmul_nn", (m64, m64.copy())
    yield "matmul 128x128x128", "matmul_nn", (m128, m128.copy())
    yield "softmax 512x64", "softmax_fw", (rows,)
    yield "layernorm 512x64", "layernorm_fw", (rows, gain, bias, 1e-5)
    yield "gelu 100k", "gelu_fw", (flat,)
    yield "cross-entropy 512x64", "ce_fw", (rows, targets)
    yield "kth_largest 100k", "kth_largest", (flat, 25_000)
    yield "fnv1a64 1MB", "fnv1a64", (blob,)


def bench_kernels(compiled, repeats):
    print(f"{'kernel':<24} {'compiled':>12} {'pure':>12} {'speedup':>9}")
    for label, name, args in kernel_cases():
        fc, fp = getattr(compiled, name), getattr(pure, name)
        _assert_same(fc(*args), fp(*args))
        tc = _time(fc, args, repeats)
        tp = _time(fp, args, max(1, repeats // 3))
        print(f"{label:<24} {tc * 1e3:>10.2f}ms {tp * 1e3:>10.2f}ms {tp / tc:>8.1f}x")


def bench_train_step(repeats):
    from gradmask.datasets import make_dataset
    from gradmask.models import build_mlp, build_tiny_transformer
    from gradmask.optim import train

    def mlp_run():
        ds = make_dataset("regression", seed=0, n=128)
        model = build_mlp([4, 32, 1], seed=0)
        train(model, ds, strategy="gmt", keep_fraction=0.7, steps=20,
              accum_n=2, base_lr=0.01, seed=0, batch_size=16)

    def tf_run():
        ds = make_dataset("charlm", seed=0, n=64, context_len=16)
        model = build_tiny_transformer(ds.meta["vocab"], 32, 2, 2, 16, seed=0)
        train(model, ds, strategy="gmt", keep_fraction=0.7, steps=2,
              accum_n=1, base_lr=0.003, seed=0, batch_size=8)

    print(f"\n{'end-to-end':<24} {'compiled':>12} {'pure':>12} {'speedup':>9}")
    for label, fn in (("mlp 20 gmt steps", mlp_run), ("tinytf 2 gmt steps", tf_run)):
        backend.set_backend("compiled")
        tc = _time(fn, (), repeats)
        backend.set_backend("pure")
        tp = _time(fn, (), 1)
        backend.set_backend("auto")
        print(f"{label:<24} {tc * 1e3:>10.1f}ms {tp * 1e3:>10.1f}ms {tp / tc:>8.1f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    if not backend.compiled_available():
        raise SystemExit("compiled kernels not built; nothing to compare")
    from gradmask import _kernels as compiled

    print("verifying bitwise equality, then timing (best of repeats)\n")
    bench_kernels(compiled, args.repeats)
    bench_train_step(args.repeats)


if __name__ == "__main__":
    main()
