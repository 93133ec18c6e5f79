"""gradmask: sparse fine-tuning by accumulated-gradient magnitude masking.

A small float64 training engine (tensors with reverse-mode autodiff, toy
models, synthetic datasets) plus the masked-update optimizers, post-hoc
delta-drop tooling, and an experiment harness with FLOPs/throughput
accounting. Numeric hot loops run in a compiled extension when available,
with a bitwise-identical pure-Python fallback (see gradmask.backend).
"""

from gradmask.backend import backend_name, compiled_available, set_backend

__version__ = "0.1.0"

__all__ = ["backend_name", "compiled_available", "set_backend", "__version__"]
