"""Kernel backend selection.

The compiled extension (gradmask._kernels) is preferred when importable;
otherwise the pure-Python fallback (gradmask._kernels_py) is used. Both
implement the same arithmetic in the same order and give bitwise-identical
results, so the choice only affects speed.

Override with the environment variable GRADMASK_BACKEND={compiled,pure}
or programmatically via set_backend(). All callers should go through the
module-level function names re-exported here, which set_backend rebinds.
"""

import os

from gradmask import _kernels_py as _pure

try:
    from gradmask import _kernels as _compiled
except ImportError:
    _compiled = None

_KERNEL_NAMES = (
    "matmul_nn", "matmul_nt", "matmul_tn",
    "gelu_fw", "gelu_bw", "tanh_fw",
    "softmax_fw", "softmax_bw",
    "layernorm_fw", "layernorm_bw",
    "ce_fw", "mse_fw",
    "reduce_sum", "colsum",
    "kth_largest", "fnv1a64",
)

GELU_C0 = _pure.GELU_C0
GELU_C1 = _pure.GELU_C1

_active_name = None


def compiled_available():
    return _compiled is not None


def backend_name():
    return _active_name


def set_backend(name):
    """Select the kernel implementation: 'compiled', 'pure', or 'auto'."""
    global _active_name
    if name == "auto":
        name = "compiled" if _compiled is not None else "pure"
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available (extension not built)")
        module = _compiled
    elif name == "pure":
        module = _pure
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'compiled', 'pure' or 'auto'")
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(module, fn)
    _active_name = name


set_backend(os.environ.get("GRADMASK_BACKEND", "auto"))
