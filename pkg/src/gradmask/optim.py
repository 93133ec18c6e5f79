"""SGD/Adam with the masked-update contract, LR schedule, training loop.

Masked-update semantics ("skip" mode, the default): entries dropped by the
step's mask are skipped entirely -- the parameter AND its Adam moment
buffers stay bitwise unchanged, mirroring a conditional update that only
executes when the accumulated gradient clears the threshold. Feeding a
zeroed gradient into Adam instead (so momentum still moves masked entries)
is available as masked_mode="zero" for ablation.

Weight decay defaults to 0; when nonzero it is decoupled (lr*wd*theta) and
applies only to kept entries, consistent with skip semantics. Adam bias
correction uses the global step count t even for entries whose moments
were updated fewer times (the literal consequence of skipping).
"""

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from gradmask import flops
from gradmask.checkpoint import registry_checksum, save_checkpoint
from gradmask.datasets import BatchStream
from gradmask.masking import (GradAccumulator, MaskingError, build_hft_mask,
                              dump_mask_csv, mask_for_step)
from gradmask.tensor import Graph

OPTIMIZERS = ("sgd", "adam")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(ArithmeticError):
    """Training loss became NaN/Inf."""


@dataclass
class OptimizerState:
    kind: str
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, kind, registry, **kwargs):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}; valid: {OPTIMIZERS}")
        state = cls(kind=kind, **kwargs)
        if kind == "adam":
            state.m = {name: np.zeros_like(t.values) for name, t, _ in registry}
            state.v = {name: np.zeros_like(t.values) for name, t, _ in registry}
        return state


def apply_step(registry, masked_grads, plan, opt, lr, masked_mode="skip"):
    """One optimizer step over kept entries; dropped entries untouched.

    masked_grads holds the accumulated gradients (already elementwise equal
    to gamma*mask on the kept set; dropped values are ignored under "skip").
    """
    if masked_mode not in ("skip", "zero"):
        raise ValueError(f"masked_mode must be 'skip' or 'zero', got {masked_mode!r}")
    opt.t += 1
    for name, t, _ in registry:
        g = masked_grads[name]
        mask = plan.masks.get(name)
        if mask is None or mask.shape != t.shape:
            raise MaskingError(f"mask plan does not match registry entry {name!r}")
        if opt.kind == "sgd":
            if masked_mode == "zero":
                step = np.where(mask, g, 0.0)
                t.values -= lr * step
                if opt.weight_decay:
                    t.values[mask] -= lr * opt.weight_decay * t.values[mask]
            else:
                kept_g = g[mask]
                t.values[mask] -= lr * kept_g
                if opt.weight_decay:
                    t.values[mask] -= lr * opt.weight_decay * t.values[mask]
        else:
            m, v = opt.m[name], opt.v[name]
            bc1 = 1.0 - opt.beta1 ** opt.t
            bc2 = 1.0 - opt.beta2 ** opt.t
            if masked_mode == "zero":
                gz = np.where(mask, g, 0.0)
                m[...] = opt.beta1 * m + (1.0 - opt.beta1) * gz
                v[...] = opt.beta2 * v + (1.0 - opt.beta2) * (gz * gz)
                t.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
                if opt.weight_decay:
                    t.values[mask] -= lr * opt.weight_decay * t.values[mask]
            else:
                kept_g = g[mask]
                mk = opt.beta1 * m[mask] + (1.0 - opt.beta1) * kept_g
                vk = opt.beta2 * v[mask] + (1.0 - opt.beta2) * (kept_g * kept_g)
                m[mask] = mk
                v[mask] = vk
                t.values[mask] -= lr * (mk / bc1) / (np.sqrt(vk / bc2) + opt.eps)
                if opt.weight_decay:
                    t.values[mask] -= lr * opt.weight_decay * t.values[mask]


@dataclass
class Schedule:
    """Linear warmup to base_lr over ceil(warmup_ratio*T), then cosine to 0."""

    total_steps: int
    base_lr: float
    warmup_ratio: float = 0.03

    @property
    def warmup_steps(self):
        return max(1, math.ceil(self.warmup_ratio * self.total_steps))


def lr_at(schedule, step):
    """Learning rate at 1-based step (1 <= step <= total_steps)."""
    T = schedule.total_steps
    if not 1 <= step <= T:
        raise ValueError(f"step {step} outside [1, {T}]")
    W = schedule.warmup_steps
    if step <= W:
        return schedule.base_lr * step / W
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - W) / (T - W)))


@dataclass
class RunReport:
    """Everything a training run produced, minus the parameters themselves."""

    losses: list
    kept_fractions: list
    eval_steps: list
    eval_losses: list
    eval_metrics: list
    final_checkpoint: str
    checksum: int
    throughput: float
    wall_seconds: float
    train_samples: int
    flop_counters: dict
    model_flops: int
    selection_flops: int

    @property
    def final_eval_loss(self):
        return self.eval_losses[-1]

    @property
    def final_eval_metric(self):
        return self.eval_metrics[-1]


def evaluate(model, split):
    """Mean loss and task metric on a split (no graph, no FLOP counting)."""
    with flops.paused():
        loss = model.loss(split.inputs, split.targets).item()
        metric = model.metric(split.inputs, split.targets)
    return loss, metric


def train(model, dataset, *, strategy="gmt", keep_fraction=1.0, scope="global",
          steps=100, accum_n=1, base_lr=1e-2, seed=0, optimizer="adam",
          batch_size=16, eval_every=0, warmup_ratio=0.03, weight_decay=0.0,
          masked_mode="skip", exempt_groups=(), out_dir=None,
          checkpoint_every=0, dump_masks=False):
    """Run the accumulate/threshold/masked-update loop for `steps` steps.

    Deterministic given identical arguments; wall-clock covers only the
    training computation (batch fetch, forward/backward, masking, update),
    not evaluation or file writes.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if accum_n < 1:
        raise ValueError(f"accum_n must be >= 1, got {accum_n}")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    registry = model.registry
    exempt = tuple(name for name, _, grp in registry if grp in set(exempt_groups))
    schedule = Schedule(total_steps=steps, base_lr=base_lr, warmup_ratio=warmup_ratio)
    opt = OptimizerState.create(optimizer, registry, weight_decay=weight_decay)
    stream = BatchStream(dataset.train, batch_size, seed)
    hft_plan = build_hft_mask(registry, seed) if strategy == "hft" else None
    ledger = flops.FlopLedger()

    losses, kept_fractions = [], []
    eval_steps, eval_losses, eval_metrics = [], [], []
    steps_csv = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        steps_csv = open(os.path.join(out_dir, "steps.csv"), "w", newline="")
        steps_csv.write("step,loss,lr,kept_fraction\n")

    wall = 0.0
    try:
        with flops.tracking(ledger):
            for step in range(1, steps + 1):
                t0 = time.perf_counter()
                acc = GradAccumulator(registry, accum_n)
                batch_losses = []
                for _ in range(accum_n):
                    xb, yb = stream.next_batch()
                    registry.zero_grads()
                    with Graph() as g:
                        loss = model.loss(xb, yb)
                    g.backward(loss)
                    batch_losses.append(loss.item())
                    acc.accumulate({name: t.grad for name, t, _ in registry})
                step_loss = sum(batch_losses) / accum_n
                if not math.isfinite(step_loss):
                    raise DivergenceError(f"non-finite loss at step {step}")
                gamma = acc.finalize()
                plan = mask_for_step(strategy, registry, gamma,
                                     keep_fraction=keep_fraction, scope=scope,
                                     seed=seed, step=step, hft_plan=hft_plan,
                                     exempt=exempt)
                lr = lr_at(schedule, step)
                apply_step(registry, gamma, plan, opt, lr, masked_mode=masked_mode)
                wall += time.perf_counter() - t0

                losses.append(step_loss)
                kept_fractions.append(plan.kept_fraction())
                if steps_csv is not None:
                    steps_csv.write(
                        f"{step},{step_loss!r},{lr!r},{plan.kept_fraction()!r}\n")
                if dump_masks and out_dir is not None:
                    dump_mask_csv(f"{out_dir}/masks_step{step}.csv", plan, gamma)
                if checkpoint_every and out_dir is not None and step % checkpoint_every == 0:
                    save_checkpoint(f"{out_dir}/step{step}.gmtckpt", registry)
                if (eval_every and step % eval_every == 0) or step == steps:
                    ev_loss, ev_metric = evaluate(model, dataset.eval)
                    eval_steps.append(step)
                    eval_losses.append(ev_loss)
                    eval_metrics.append(ev_metric)
    finally:
        if steps_csv is not None:
            steps_csv.close()

    final_path = None
    if out_dir is not None:
        final_path = f"{out_dir}/final.gmtckpt"
        save_checkpoint(final_path, registry)
    train_samples = steps * accum_n * stream.batch_size
    return RunReport(
        losses=losses, kept_fractions=kept_fractions,
        eval_steps=eval_steps, eval_losses=eval_losses, eval_metrics=eval_metrics,
        final_checkpoint=final_path, checksum=registry_checksum(registry),
        throughput=train_samples / wall if wall > 0 else float("inf"),
        wall_seconds=wall, train_samples=train_samples,
        flop_counters=ledger.as_dict(), model_flops=ledger.model_total(),
        selection_flops=ledger.selection,
    )
