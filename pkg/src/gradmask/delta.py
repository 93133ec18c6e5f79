"""Post-hoc delta-parameter dropping.

Deltas are the elementwise difference between a fine-tuned checkpoint and
its base. A drop spec zeroes a fraction of delta entries by one of three
strategies, ordered over ALL tensors jointly (global magnitude order,
stable ties):

  trivial   zero the floor(p*total) smallest |delta|
  salient   zero the floor(p*total) largest |delta|
  random    zero each entry independently with probability p (seeded)

Merging takes the fine-tuned value wherever the delta survives (and the
base value where it was dropped), so a merge with rate 0 reproduces the
fine-tuned checkpoint bit-for-bit; float re-addition could not promise
that. With the rescale flag, survivors are scaled by 1/(1-p) and added to
the base instead, which forfeits the bitwise guarantee.
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

DROP_STRATEGIES = ("trivial", "salient", "random")


class DeltaError(ValueError):
    pass


@dataclass
class DeltaParams:
    """Per-parameter deltas plus the checkpoints they came from."""

    deltas: "OrderedDict[str, np.ndarray]"
    base: "OrderedDict[str, np.ndarray]"
    finetuned: "OrderedDict[str, np.ndarray]"

    def total(self):
        return sum(d.size for d in self.deltas.values())


@dataclass
class DropSpec:
    rate: float
    strategy: str = "trivial"
    seed: int = 0
    rescale: bool = False

    def validate(self):
        if not 0.0 <= self.rate <= 1.0:
            raise DeltaError(f"drop rate must be in [0, 1], got {self.rate}")
        if self.strategy not in DROP_STRATEGIES:
            raise DeltaError(
                f"unknown drop strategy {self.strategy!r}; valid: {DROP_STRATEGIES}")
        if self.rescale and self.rate == 1.0:
            raise DeltaError("rate 1.0 with rescale divides by zero")


def compute_delta(base, finetuned):
    """Elementwise finetuned - base over identical registries."""
    if hasattr(base, "snapshot"):
        base = base.snapshot()
    if hasattr(finetuned, "snapshot"):
        finetuned = finetuned.snapshot()
    base_names = list(base.keys())
    ft_names = list(finetuned.keys())
    if base_names != ft_names:
        for b, f in zip(base_names, ft_names):
            if b != f:
                raise DeltaError(f"registry mismatch: base has {b!r}, finetuned has {f!r}")
        longer = base_names if len(base_names) > len(ft_names) else ft_names
        raise DeltaError(f"registry mismatch: unmatched entry {longer[min(len(base_names), len(ft_names))]!r}")
    deltas = OrderedDict()
    for name in base_names:
        a, b = np.asarray(base[name]), np.asarray(finetuned[name])
        if a.shape != b.shape:
            raise DeltaError(f"registry mismatch at {name!r}: {a.shape} vs {b.shape}")
        deltas[name] = b - a
    return DeltaParams(deltas=deltas, base=base, finetuned=finetuned)


def _drop_mask(delta, spec):
    """Boolean drop markers per parameter (True = zero this delta entry)."""
    names = list(delta.deltas.keys())
    sizes = [delta.deltas[n].size for n in names]
    total = sum(sizes)
    if spec.strategy == "random":
        rng = np.random.default_rng([spec.seed, 101])
        flat = rng.random(total) < spec.rate
    else:
        mags = np.concatenate([np.abs(delta.deltas[n]).reshape(-1) for n in names])
        z = int(np.floor(spec.rate * total))
        order = np.argsort(mags, kind="stable")
        flat = np.zeros(total, dtype=bool)
        if z > 0:
            chosen = order[:z] if spec.strategy == "trivial" else order[total - z:]
            flat[chosen] = True
    out = {}
    pos = 0
    for name, size in zip(names, sizes):
        out[name] = flat[pos:pos + size].reshape(delta.deltas[name].shape)
        pos += size
    return out


def apply_drop(delta, spec):
    """Merged checkpoint: base where dropped, fine-tuned (or rescaled delta
    plus base) where the delta survives."""
    spec.validate()
    dropped = _drop_mask(delta, spec)
    merged = OrderedDict()
    for name, d in delta.deltas.items():
        drop = dropped[name]
        if spec.rescale:
            kept = np.where(drop, 0.0, d) / (1.0 - spec.rate)
            merged[name] = np.asarray(delta.base[name]) + kept
        else:
            merged[name] = np.where(drop, delta.base[name], delta.finetuned[name])
    return merged


def kept_fraction(delta, spec):
    """Fraction of delta entries surviving a drop spec."""
    spec.validate()
    dropped = _drop_mask(delta, spec)
    total = delta.total()
    return (total - sum(int(m.sum()) for m in dropped.values())) / total


def drop_sweep(base, finetuned, rates, strategies, eval_fn, seed=0, rescale=False):
    """Evaluate merged checkpoints over a (rate, strategy) grid.

    eval_fn(merged) -> (eval_loss, eval_metric). Returns rows of
    (strategy, rate, eval_loss, eval_metric, kept_fraction) in
    deterministic grid order.
    """
    delta = compute_delta(base, finetuned)
    rows = []
    for strategy in strategies:
        for rate in rates:
            spec = DropSpec(rate=rate, strategy=strategy, seed=seed, rescale=rescale)
            merged = apply_drop(delta, spec)
            loss, metric = eval_fn(merged)
            rows.append({
                "strategy": strategy, "rate": rate,
                "eval_loss": loss, "eval_metric": metric,
                "kept_fraction": kept_fraction(delta, spec),
            })
    return rows
