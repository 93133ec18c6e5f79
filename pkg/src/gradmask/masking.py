"""Gradient accumulation, magnitude-threshold masks, and saliency.

The update-selection rule: accumulate per-parameter gradients over N
mini-batches, average them, and keep exactly the entries whose absolute
accumulated gradient reaches the top keep_fraction by magnitude. The
threshold is an exact order statistic; ties at the threshold are kept
(the rule is |g| >= T), so the kept count can exceed ceil(k*total) by the
tie count. keep_fraction 1.0 uses threshold 0, which keeps everything.

Baseline mask generators live here too: RMT resamples an element-wise
Bernoulli mask each step; HFT freezes a fixed random half of the parameter
tensors for a whole run.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from gradmask import flops
from gradmask import backend as K
from gradmask.tensor import Graph, NonFiniteError

STRATEGIES = ("none", "gmt", "rmt", "hft")
SCOPES = ("global", "per_tensor")


class MaskingError(ValueError):
    pass


@dataclass
class MaskPlan:
    """Per-parameter binary masks plus how they were derived."""

    strategy: str
    keep_fraction: float
    scope: str = "global"
    threshold: object = None  # float (global) or {name: float} (per_tensor)
    masks: dict = field(default_factory=dict)  # name -> bool array
    seed: object = None

    def total(self):
        return sum(m.size for m in self.masks.values())

    def kept_count(self):
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def kept_fraction(self):
        return self.kept_count() / self.total()


class GradAccumulator:
    """Running per-parameter gradient sums over an accumulation interval."""

    def __init__(self, registry, interval):
        if interval < 1:
            raise MaskingError(f"accumulation interval must be >= 1, got {interval}")
        self.interval = interval
        self.batches_seen = 0
        self._sums = {name: np.zeros_like(t.values) for name, t, _ in registry}

    def accumulate(self, grads):
        if self.batches_seen >= self.interval:
            raise MaskingError(
                f"accumulate called after {self.batches_seen} of {self.interval} batches")
        for name, buf in self._sums.items():
            g = grads[name]
            if g.shape != buf.shape:
                raise MaskingError(f"gradient shape mismatch for {name!r}: {g.shape} vs {buf.shape}")
            buf += g
        self.batches_seen += 1

    def finalize(self):
        """Average of the accumulated gradients (only after a full interval)."""
        if self.batches_seen != self.interval:
            raise MaskingError(
                f"finalize after {self.batches_seen} of {self.interval} batches")
        return {name: buf / self.interval for name, buf in self._sums.items()}


def compute_threshold(abs_values, keep_fraction):
    """Order-statistic threshold: the ceil(k*n)-th largest magnitude.

    keep_fraction 1.0 returns 0.0 so every entry (|g| >= 0) is kept.
    """
    abs_values = np.asarray(abs_values).reshape(-1)
    if abs_values.size == 0:
        raise MaskingError("compute_threshold on empty input")
    if not 0.0 < keep_fraction <= 1.0:
        raise MaskingError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return 0.0
    m = math.ceil(keep_fraction * abs_values.size)
    flops.add_selection(3 * abs_values.size)
    return float(K.kth_largest(np.ascontiguousarray(abs_values), m))


def build_gmt_mask(gamma, keep_fraction, scope="global", exempt=()):
    """Mask from accumulated gradients: keep entries with |gamma| >= T_k.

    `scope` picks one threshold over all parameters concatenated (global)
    or one per tensor. Parameters named in `exempt` are excluded from the
    threshold pool and always fully kept.
    """
    if scope not in SCOPES:
        raise MaskingError(f"unknown scope {scope!r}; valid: {SCOPES}")
    exempt = set(exempt)
    pool = {name: np.abs(g) for name, g in gamma.items() if name not in exempt}
    if not pool:
        raise MaskingError("no parameters left to mask after exemptions")
    masks = {}
    if scope == "global":
        threshold = compute_threshold(
            np.concatenate([a.reshape(-1) for a in pool.values()]), keep_fraction)
        for name, a in pool.items():
            masks[name] = a >= threshold
    else:
        threshold = {}
        for name, a in pool.items():
            t = compute_threshold(a.reshape(-1), keep_fraction)
            threshold[name] = t
            masks[name] = a >= t
    for name, g in gamma.items():
        if name in exempt:
            masks[name] = np.ones(g.shape, dtype=bool)
    return MaskPlan(strategy="gmt", keep_fraction=keep_fraction, scope=scope,
                    threshold=threshold, masks=masks)


def build_rmt_mask(registry, keep_fraction, seed, step):
    """Element-wise Bernoulli(keep_fraction) mask, reseeded per step."""
    if not 0.0 < keep_fraction <= 1.0:
        raise MaskingError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    rng = np.random.default_rng([seed, step])
    masks = {name: rng.random(t.shape) < keep_fraction for name, t, _ in registry}
    return MaskPlan(strategy="rmt", keep_fraction=keep_fraction,
                    masks=masks, seed=(seed, step))


def build_hft_mask(registry, seed):
    """Freeze a random half of the tensors; fixed for the whole run.

    ceil(n_tensors/2) tensors are trainable (all-ones mask), the rest are
    frozen (all-zeros).
    """
    names = registry.names()
    if not names:
        raise MaskingError("empty registry")
    rng = np.random.default_rng([seed, 424242])
    order = rng.permutation(len(names))
    trainable = {names[i] for i in order[:math.ceil(len(names) / 2)]}
    masks = {name: np.full(t.shape, name in trainable, dtype=bool)
             for name, t, _ in registry}
    return MaskPlan(strategy="hft", keep_fraction=0.5, masks=masks, seed=seed)


def build_none_mask(registry):
    """All-ones mask: vanilla (dense) updates."""
    masks = {name: np.ones(t.shape, dtype=bool) for name, t, _ in registry}
    return MaskPlan(strategy="none", keep_fraction=1.0, masks=masks)


def mask_for_step(strategy, registry, gamma, *, keep_fraction, scope, seed, step,
                  hft_plan=None, exempt=()):
    """Dispatch to the per-strategy mask builder for one optimizer step."""
    if strategy == "gmt":
        return build_gmt_mask(gamma, keep_fraction, scope=scope, exempt=exempt)
    if strategy == "rmt":
        return build_rmt_mask(registry, keep_fraction, seed, step)
    if strategy == "hft":
        if hft_plan is None:
            raise MaskingError("hft requires the run-level plan")
        return hft_plan
    if strategy == "none":
        return build_none_mask(registry)
    raise MaskingError(f"unknown strategy {strategy!r}; valid: {STRATEGIES}")


# ---------------------------------------------------------------------------
# saliency


@dataclass
class SaliencyReport:
    """Per-parameter saliency |dL/dtheta| and removal-effect estimates.

    predicted_delta is the first-order estimate of the loss change caused
    by zeroing each parameter: grad * (-theta). exact_delta (optional, from
    the ablation oracle) is the measured change loss(zeroed) - loss(full),
    signed the same way, so the two agree to second order.
    """

    saliency: dict
    predicted_delta: dict
    exact_delta: dict = None


def saliency_first_order(model, inputs, targets):
    """Gradient-based saliency over a full data pass (mean loss)."""
    model.registry.zero_grads()
    with Graph() as g:
        loss = model.loss(inputs, targets)
    g.backward(loss)
    saliency = {}
    predicted = {}
    for name, t, _ in model.registry:
        if not np.isfinite(t.grad).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        saliency[name] = np.abs(t.grad)
        predicted[name] = t.grad * (-t.values)
    model.registry.zero_grads()
    return SaliencyReport(saliency=saliency, predicted_delta=predicted)


def exact_ablation_deltas(model, inputs, targets, max_params=1000):
    """Oracle: re-evaluate the loss with each parameter zeroed in turn.

    Returns loss(zeroed) - loss(full) per parameter entry. O(P) full
    forward passes, so guarded to small models.
    """
    total = model.registry.total_params()
    if total > max_params:
        raise MaskingError(
            f"ablation oracle limited to {max_params} params, model has {total}")
    base = model.loss(inputs, targets).item()
    out = {}
    for name, t, _ in model.registry:
        flat = t.values.reshape(-1)
        deltas = np.empty_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = 0.0
            deltas[i] = model.loss(inputs, targets).item() - base
            flat[i] = saved
        out[name] = deltas.reshape(t.shape)
    return out


def spearman_rank_correlation(a, b):
    """Spearman rho with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("spearman needs two equal-length arrays of size >= 2")

    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(x.size, dtype=np.float64)
        r[order] = np.arange(1, x.size + 1)
        # average the ranks within tied groups
        for v in np.unique(x):
            sel = x == v
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


def dump_mask_csv(path, plan, gamma):
    """Debug dump: one row per parameter entry (name, index, |grad|, kept)."""
    with open(path, "w", newline="") as fh:
        fh.write("param_name,index,abs_grad,kept\n")
        for name, mask in plan.masks.items():
            a = np.abs(gamma[name]).reshape(-1)
            m = mask.reshape(-1)
            for i in range(a.size):
                fh.write(f"{name},{i},{float(a[i])!r},{int(m[i])}\n")
