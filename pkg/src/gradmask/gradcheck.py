"""Central finite-difference gradient oracle.

Independent of the autodiff path: perturbs each parameter entry by +/-h
with plain forward evaluations and compares (L+ - L-)/(2h) against the
recorded gradient. The relative-error denominator is floored to guard
against cancellation noise in the difference quotient where the true
gradient is tiny; below the floor the comparison is effectively absolute.
"""

import numpy as np

from gradmask.tensor import Graph

DEFAULT_H = 1e-6
REL_FLOOR = 1e-3


def autodiff_grads(model, inputs, targets):
    """Gradients of the mean batch loss for every registered parameter."""
    model.registry.zero_grads()
    with Graph() as g:
        loss = model.loss(inputs, targets)
    g.backward(loss)
    grads = model.registry.grads()
    model.registry.zero_grads()
    return grads


def finite_difference_grad(model, inputs, targets, name, index, h=DEFAULT_H):
    """Central-difference d(loss)/d(param[name].flat[index])."""
    flat = model.registry.get(name).values.reshape(-1)
    saved = flat[index]
    flat[index] = saved + h
    lp = model.loss(inputs, targets).item()
    flat[index] = saved - h
    lm = model.loss(inputs, targets).item()
    flat[index] = saved
    return (lp - lm) / (2.0 * h)


def relative_error(ad, fd):
    return abs(ad - fd) / max(abs(ad), abs(fd), REL_FLOOR)


def check_model(model, inputs, targets, h=DEFAULT_H, sample=None, seed=0):
    """Max relative error between autodiff and finite differences.

    sample=None checks every parameter entry; an integer spot-checks that
    many entries drawn uniformly (seeded) across the whole parameter vector.
    Returns (max_rel_err, n_checked).
    """
    grads = autodiff_grads(model, inputs, targets)
    entries = []
    for name, t, _ in model.registry:
        entries.extend((name, i) for i in range(t.size))
    if sample is not None and sample < len(entries):
        rng = np.random.default_rng([seed, 31337])
        picks = rng.choice(len(entries), size=sample, replace=False)
        entries = [entries[i] for i in sorted(picks)]
    worst = 0.0
    for name, i in entries:
        fd = finite_difference_grad(model, inputs, targets, name, i, h=h)
        ad = float(grads[name].reshape(-1)[i])
        worst = max(worst, relative_error(ad, fd))
    return worst, len(entries)
