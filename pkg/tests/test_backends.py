"""The pure fallback must reproduce compiled-backend training exactly."""

import pytest

from gradmask import backend
from gradmask.datasets import make_dataset
from gradmask.models import build_mlp, build_tiny_transformer
from gradmask.optim import train
from gradmask.tensor import Graph

pytestmark = pytest.mark.skipif(not backend.compiled_available(),
                                reason="compiled kernels not built")


@pytest.fixture
def restore_backend():
    original = backend.backend_name()
    yield
    backend.set_backend(original)


def _short_training_run():
    ds = make_dataset("regression", seed=12, n=64)
    model = build_mlp([4, 16, 1], activation="gelu", seed=12)
    report = train(model, ds, strategy="gmt", keep_fraction=0.6, steps=12,
                   accum_n=2, base_lr=0.01, seed=12, optimizer="adam",
                   batch_size=8)
    return report.checksum, report.losses


def test_training_identical_across_backends(restore_backend):
    backend.set_backend("compiled")
    ck_c, losses_c = _short_training_run()
    backend.set_backend("pure")
    ck_p, losses_p = _short_training_run()
    assert ck_c == ck_p
    assert losses_c == losses_p


def test_transformer_forward_backward_identical(restore_backend):
    ds = make_dataset("charlm", seed=4, n=16, context_len=8)

    def run():
        model = build_tiny_transformer(ds.meta["vocab"], 16, 2, 1, 8, seed=4)
        with Graph() as g:
            loss = model.loss(ds.train.inputs[:4], ds.train.targets[:4])
        g.backward(loss)
        return loss.item(), model.registry.grads()

    backend.set_backend("compiled")
    loss_c, grads_c = run()
    backend.set_backend("pure")
    loss_p, grads_p = run()
    assert loss_c == loss_p
    for name in grads_c:
        assert (grads_c[name] == grads_p[name]).all(), name
