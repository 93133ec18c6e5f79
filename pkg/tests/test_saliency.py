"""First-order saliency against the exhaustive ablation oracle."""

import numpy as np
import pytest

from gradmask.datasets import make_dataset
from gradmask.masking import (MaskingError, exact_ablation_deltas,
                              saliency_first_order, spearman_rank_correlation)
from gradmask.models import build_mlp


def test_zero_parameter_has_zero_predicted_delta():
    ds = make_dataset("regression", seed=1, n=32)
    model = build_mlp([4, 6, 1], seed=1)  # biases start at exactly zero
    report = saliency_first_order(model, ds.train.inputs, ds.train.targets)
    for name, t, grp in model.registry:
        zero = t.values == 0.0
        assert (report.predicted_delta[name][zero] == 0.0).all()


def test_zero_gradient_has_zero_saliency():
    ds = make_dataset("regression", seed=1, n=32)
    model = build_mlp([4, 6, 1], seed=1)
    report = saliency_first_order(model, ds.train.inputs, ds.train.targets)
    ranks = np.concatenate([report.saliency[n].reshape(-1)
                            for n in model.registry.names()])
    assert (ranks >= 0.0).all()
    # an artificial zero-grad entry would rank last; saliency is |grad|
    assert report.saliency["layers.0.weight"].shape == (4, 6)


def test_predicted_delta_is_minus_grad_times_theta():
    from gradmask.gradcheck import autodiff_grads

    ds = make_dataset("regression", seed=2, n=32)
    model = build_mlp([4, 6, 1], seed=2)
    report = saliency_first_order(model, ds.train.inputs, ds.train.targets)
    grads = autodiff_grads(model, ds.train.inputs, ds.train.targets)
    for name in model.registry.names():
        theta = model.registry.get(name).values
        assert (report.predicted_delta[name] == grads[name] * (-theta)).all()
        assert (report.saliency[name] == np.abs(grads[name])).all()


def test_ablation_oracle_guard():
    big = build_mlp([50, 50, 10], seed=0)
    ds = make_dataset("regression", seed=0, n=8)
    with pytest.raises(MaskingError, match="limited"):
        exact_ablation_deltas(big, np.zeros((4, 50)), np.zeros((4, 10)), max_params=100)


def test_oracle_correlation_on_small_model():
    ds = make_dataset("regression", seed=33, n=128)
    model = build_mlp([4, 12, 1], activation="tanh", seed=33)
    report = saliency_first_order(model, ds.train.inputs, ds.train.targets)
    exact = exact_ablation_deltas(model, ds.train.inputs, ds.train.targets)
    names = model.registry.names()
    pred = np.concatenate([report.predicted_delta[n].reshape(-1) for n in names])
    exa = np.concatenate([exact[n].reshape(-1) for n in names])
    assert spearman_rank_correlation(exa, pred) > 0.8
