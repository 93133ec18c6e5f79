"""Built-in correctness checks behind the grad-check / saliency-check verbs.

Fixed seeded configurations; the test suite runs the same cases. Tolerances:
gradient checks compare autodiff against central finite differences
(h=1e-6) at max relative error 1e-5; the saliency check requires Spearman
rank correlation > 0.8 between the exhaustive ablation oracle and the
first-order prediction, plus close absolute agreement on near-zero
parameters.
"""

from dataclasses import dataclass

import numpy as np

from gradmask.datasets import make_dataset
from gradmask.gradcheck import check_model
from gradmask.masking import (exact_ablation_deltas, saliency_first_order,
                              spearman_rank_correlation)
from gradmask.models import build_mlp, build_tiny_transformer
from gradmask.optim import train

GRAD_TOL = 1e-5
SPEARMAN_MIN = 0.8
SMALL_PARAM_CUT = 0.01
SMALL_PARAM_ERR = 1e-4


@dataclass
class GradCheckCase:
    name: str
    max_rel_err: float
    checked: int
    tolerance: float = GRAD_TOL

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


def _mlp_case(name, sizes, activation, loss_kind, task, seed, batch=16):
    ds = make_dataset(task, seed=seed, n=64)
    model = build_mlp(sizes, activation=activation, seed=seed, loss_kind=loss_kind)
    err, n = check_model(model, ds.train.inputs[:batch], ds.train.targets[:batch])
    return GradCheckCase(name, err, n)


def _transformer_case(name, task, seed, d_model, n_heads, n_layers, batch,
                      sample=200, **task_kw):
    ds = make_dataset(task, seed=seed, n=32, **task_kw)
    model = build_tiny_transformer(ds.meta["vocab"], d_model, n_heads, n_layers,
                                   max(ds.meta["seq_len"], 2), seed=seed,
                                   loss_kind=ds.meta["loss"])
    err, n = check_model(model, ds.train.inputs[:batch], ds.train.targets[:batch],
                         sample=sample, seed=seed)
    return GradCheckCase(name, err, n)


def grad_check_cases(quick=False):
    """Seeded model/input combinations for the finite-difference oracle."""
    yield _mlp_case("mlp-gelu-mse", [4, 12, 6, 1], "gelu", "mse", "regression", seed=3)
    yield _mlp_case("mlp-tanh-ce", [2, 16, 2], "tanh", "ce", "gaussians", seed=4)
    yield _mlp_case("mlp-relu-mse", [4, 10, 1], "relu", "mse", "regression", seed=11)
    yield _mlp_case("mlp-deep-gelu", [4, 16, 12, 8, 1], "gelu", "mse", "regression", seed=5)
    if not quick:
        yield _transformer_case("tinytf-charlm", "charlm", seed=5, d_model=16,
                                n_heads=2, n_layers=2, batch=4, context_len=8)
        yield _transformer_case("tinytf-modadd", "modadd", seed=6, d_model=8,
                                n_heads=2, n_layers=1, batch=8)


@dataclass
class SaliencyCheckResult:
    spearman: float
    n_params: int
    small_max_err: float
    n_small: int
    small_cut: float = SMALL_PARAM_CUT

    @property
    def passed(self):
        return self.spearman > SPEARMAN_MIN

    @property
    def small_param_ok(self):
        return self.small_max_err < SMALL_PARAM_ERR


def saliency_check(seed=33, warm_steps=5):
    """Exhaustive ablation oracle vs first-order saliency on a small MLP.

    A few warmup steps put the model where per-step selection operates:
    gradients are informative there, whereas at a converged minimum the
    first-order term vanishes and curvature dominates the exact deltas.
    """
    ds = make_dataset("regression", seed=seed, n=128)
    model = build_mlp([4, 12, 1], activation="tanh", seed=seed)
    if warm_steps:
        train(model, ds, strategy="none", steps=warm_steps, accum_n=1,
              base_lr=0.01, seed=seed, optimizer="adam", batch_size=16)
    report = saliency_first_order(model, ds.train.inputs, ds.train.targets)
    exact = exact_ablation_deltas(model, ds.train.inputs, ds.train.targets)
    names = model.registry.names()
    pred = np.concatenate([report.predicted_delta[k].reshape(-1) for k in names])
    exa = np.concatenate([exact[k].reshape(-1) for k in names])
    theta = np.concatenate([model.registry.get(k).values.reshape(-1) for k in names])
    rho = spearman_rank_correlation(exa, pred)
    small = np.abs(theta) <= SMALL_PARAM_CUT
    small_err = float(np.abs(exa - pred)[small].max()) if small.any() else 0.0
    return SaliencyCheckResult(spearman=rho, n_params=pred.size,
                               small_max_err=small_err, n_small=int(small.sum()))
