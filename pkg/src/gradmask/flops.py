"""Analytic FLOP accounting.

Counting conventions (applied by the tensor ops, forward and backward):

  matmul (m,k)x(k,n)      2*m*n*k per product
  elementwise op          1 per output element (transcendentals count as 1)
  reduction over n        n - 1 per reduce

Derived per-op totals live next to each op in gradmask.tensor. Optimizer
update arithmetic is not counted: it is linear in the parameter count,
identical in structure across masking strategies, and excluded so that the
model-compute counters compare exactly across strategies. Mask threshold
selection is tracked in a separate `selection` counter: 2n for abs+compare
plus n for the expected linear-time select, 3n total per thresholding of n
values.

A ledger is active only inside a `tracking(ledger)` block; ops called
outside (e.g. eval passes) are not counted.
"""

from collections import Counter
from contextlib import contextmanager

_active = None


class FlopLedger:
    """Additive per-op-kind FLOP counters plus a selection-overhead counter."""

    def __init__(self):
        self.counters = Counter()
        self.selection = 0

    def add(self, kind, n):
        self.counters[kind] += int(n)

    def add_selection(self, n):
        self.selection += int(n)

    def model_total(self):
        return sum(self.counters.values())

    def total(self):
        return self.model_total() + self.selection

    def reset(self):
        self.counters.clear()
        self.selection = 0

    def as_dict(self):
        d = dict(sorted(self.counters.items()))
        d["selection"] = self.selection
        return d


def active():
    return _active


def add(kind, n):
    if _active is not None:
        _active.add(kind, n)


def add_selection(n):
    if _active is not None:
        _active.add_selection(n)


@contextmanager
def tracking(ledger):
    """Route op counts into `ledger` for the duration of the block."""
    global _active
    prev = _active
    _active = ledger
    try:
        yield ledger
    finally:
        _active = prev


@contextmanager
def paused():
    """Suspend counting (used around eval passes inside a tracked loop)."""
    global _active
    prev = _active
    _active = None
    try:
        yield
    finally:
        _active = prev
