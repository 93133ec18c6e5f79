"""Optimizer rules, schedule shape, skip semantics, and the training loop."""

import math

import numpy as np
import pytest

from gradmask.datasets import make_dataset
from gradmask.masking import MaskPlan, build_gmt_mask
from gradmask.models import build_mlp
from gradmask.optim import (DivergenceError, OptimizerState, Schedule,
                            apply_step, lr_at, train)


def one_param_registry(values):
    model = build_mlp([len(values), 1], seed=0)
    reg = model.registry
    reg.get("layers.0.weight").values[:] = np.asarray(values).reshape(-1, 1)
    return reg


def plan_for(reg, masks):
    return MaskPlan(strategy="gmt", keep_fraction=0.5, masks=masks)


def test_sgd_update_arithmetic():
    reg = one_param_registry([1.0])
    grads = {"layers.0.weight": np.array([[2.0]]), "layers.0.bias": np.zeros(1)}
    masks = {n: np.ones(t.shape, dtype=bool) for n, t, _ in reg}
    opt = OptimizerState.create("sgd", reg)
    apply_step(reg, grads, plan_for(reg, masks), opt, lr=0.1)
    assert reg.get("layers.0.weight").values[0, 0] == pytest.approx(0.8)


def test_all_zero_mask_leaves_registry_bitwise():
    for kind in ("sgd", "adam"):
        model = build_mlp([3, 4, 1], seed=2)
        reg = model.registry
        before = reg.snapshot()
        grads = {n: np.random.default_rng(0).standard_normal(t.shape) for n, t, _ in reg}
        masks = {n: np.zeros(t.shape, dtype=bool) for n, t, _ in reg}
        opt = OptimizerState.create(kind, reg)
        apply_step(reg, grads, plan_for(reg, masks), opt, lr=0.1)
        after = reg.snapshot()
        for name in before:
            assert before[name].tobytes() == after[name].tobytes()


def test_skip_semantics_freeze_params_and_moments():
    model = build_mlp([4, 6, 1], seed=3)
    reg = model.registry
    rng = np.random.default_rng(1)
    opt = OptimizerState.create("adam", reg)
    # seed the moments so a stale-momentum bug would be visible
    for step in range(5):
        grads = {n: rng.standard_normal(t.shape) for n, t, _ in reg}
        masks = {n: rng.random(t.shape) < 0.5 for n, t, _ in reg}
        before = reg.snapshot()
        m_before = {n: opt.m[n].copy() for n in opt.m}
        v_before = {n: opt.v[n].copy() for n in opt.v}
        apply_step(reg, grads, plan_for(reg, masks), opt, lr=0.05)
        for name, t, _ in reg:
            dropped = ~masks[name]
            assert (t.values[dropped] == before[name][dropped]).all()
            assert (opt.m[name][dropped] == m_before[name][dropped]).all()
            assert (opt.v[name][dropped] == v_before[name][dropped]).all()
            kept = masks[name]
            if kept.any():
                assert (t.values[kept] != before[name][kept]).all()


def test_zero_mode_moves_moments_of_masked_entries():
    model = build_mlp([4, 6, 1], seed=3)
    reg = model.registry
    opt = OptimizerState.create("adam", reg)
    rng = np.random.default_rng(2)
    grads = {n: rng.standard_normal(t.shape) for n, t, _ in reg}
    masks = {n: np.ones(t.shape, dtype=bool) for n, t, _ in reg}
    apply_step(reg, grads, plan_for(reg, masks), opt, lr=0.05, masked_mode="zero")
    # moments are now nonzero; masking everything still decays them in zero mode
    masks0 = {n: np.zeros(t.shape, dtype=bool) for n, t, _ in reg}
    m_before = {n: opt.m[n].copy() for n in opt.m}
    apply_step(reg, grads, plan_for(reg, masks0), opt, lr=0.05, masked_mode="zero")
    changed = any((opt.m[n] != m_before[n]).any() for n in opt.m)
    assert changed


def test_weight_decay_only_on_kept_entries():
    reg = one_param_registry([1.0, 1.0])
    w = reg.get("layers.0.weight")
    grads = {n: np.zeros(t.shape) for n, t, _ in reg}
    masks = {n: np.zeros(t.shape, dtype=bool) for n, t, _ in reg}
    masks["layers.0.weight"] = np.array([[True], [False]])
    opt = OptimizerState.create("sgd", reg, weight_decay=0.1)
    apply_step(reg, grads, plan_for(reg, masks), opt, lr=0.5)
    assert w.values[0, 0] == pytest.approx(1.0 - 0.5 * 0.1)
    assert w.values[1, 0] == 1.0


def test_mask_registry_mismatch_rejected():
    reg = one_param_registry([1.0])
    grads = {n: np.zeros(t.shape) for n, t, _ in reg}
    plan = MaskPlan(strategy="gmt", keep_fraction=0.5,
                    masks={"layers.0.weight": np.ones((1, 1), dtype=bool)})
    with pytest.raises(Exception, match="layers.0.bias"):
        apply_step(reg, grads, plan, OptimizerState.create("sgd", reg), lr=0.1)


def test_schedule_shape():
    sched = Schedule(total_steps=200, base_lr=0.4)
    W = sched.warmup_steps
    assert W == math.ceil(0.03 * 200)
    assert lr_at(sched, 1) == pytest.approx(0.4 / W)
    assert lr_at(sched, W) == pytest.approx(0.4)
    assert lr_at(sched, 200) == pytest.approx(0.0, abs=1e-15)
    mid = W + (200 - W) // 2
    if (200 - W) % 2 == 0:
        assert lr_at(sched, mid) == pytest.approx(0.2)
    lrs = [lr_at(sched, s) for s in range(W, 201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))  # nonincreasing after warmup
    for bad in (0, 201):
        with pytest.raises(ValueError):
            lr_at(sched, bad)


def test_gmt_keep_all_bitwise_equals_vanilla():
    ds = make_dataset("regression", seed=5, n=64)

    def run(strategy, keep):
        model = build_mlp([4, 8, 1], seed=5)
        report = train(model, ds, strategy=strategy, keep_fraction=keep, steps=25,
                       accum_n=2, base_lr=0.01, seed=5, optimizer="adam",
                       batch_size=8)
        return report.checksum, report.losses

    ck_none, losses_none = run("none", 1.0)
    ck_gmt, losses_gmt = run("gmt", 1.0)
    assert ck_none == ck_gmt
    assert losses_none == losses_gmt


def test_hft_frozen_tensors_bitwise_at_end():
    ds = make_dataset("regression", seed=4, n=64)
    model = build_mlp([4, 8, 1], seed=4)
    init = model.registry.snapshot()
    from gradmask.masking import build_hft_mask

    plan = build_hft_mask(model.registry, seed=4)
    train(model, ds, strategy="hft", steps=40, accum_n=1, base_lr=0.01,
          seed=4, optimizer="adam", batch_size=8)
    frozen = [n for n, m in plan.masks.items() if not m.any()]
    trained = [n for n, m in plan.masks.items() if m.all()]
    assert frozen and trained
    final = model.registry.snapshot()
    for name in frozen:
        assert final[name].tobytes() == init[name].tobytes()
    assert any(final[name].tobytes() != init[name].tobytes() for name in trained)


def test_changed_set_matches_mask_rule():
    ds = make_dataset("regression", seed=10, n=64)
    model = build_mlp([4, 8, 1], activation="gelu", seed=10)
    reg = model.registry
    from gradmask.datasets import BatchStream
    from gradmask.masking import GradAccumulator
    from gradmask.tensor import Graph

    stream = BatchStream(ds.train, 8, seed=10)
    opt = OptimizerState.create("adam", reg)
    for step in range(1, 11):
        acc = GradAccumulator(reg, 2)
        for _ in range(2):
            x, y = stream.next_batch()
            reg.zero_grads()
            with Graph() as g:
                loss = model.loss(x, y)
            g.backward(loss)
            acc.accumulate(reg.grads())
        gamma = acc.finalize()
        plan = build_gmt_mask(gamma, 0.6)
        before = reg.snapshot()
        apply_step(reg, gamma, plan, opt, lr=0.01)
        for name, t, _ in reg:
            changed = t.values != before[name]
            expected = plan.masks[name] & (gamma[name] != 0.0)
            assert (changed == expected).all()


def test_masked_update_support_bound():
    # SGD: the number of changed entries never exceeds the kept count
    ds = make_dataset("regression", seed=3, n=64)
    model = build_mlp([4, 8, 1], seed=3)
    reg = model.registry
    from gradmask.datasets import BatchStream
    from gradmask.masking import GradAccumulator
    from gradmask.tensor import Graph

    stream = BatchStream(ds.train, 8, seed=3)
    opt = OptimizerState.create("sgd", reg)
    for step in range(5):
        acc = GradAccumulator(reg, 1)
        x, y = stream.next_batch()
        reg.zero_grads()
        with Graph() as g:
            loss = model.loss(x, y)
        g.backward(loss)
        acc.accumulate(reg.grads())
        gamma = acc.finalize()
        plan = build_gmt_mask(gamma, 0.3)
        before = reg.snapshot()
        apply_step(reg, gamma, plan, opt, lr=0.05)
        changed = sum(int((t.values != before[n]).sum()) for n, t, _ in reg)
        assert changed <= plan.kept_count()


def test_divergence_aborts_with_step_index():
    ds = make_dataset("regression", seed=2, n=64)
    model = build_mlp([4, 8, 1], seed=2)
    with pytest.raises(DivergenceError, match=r"step \d+"):
        train(model, ds, strategy="none", steps=200, accum_n=1, base_lr=1e9,
              seed=2, optimizer="sgd", batch_size=8)


def test_train_reproducible_and_writes_artifacts(tmp_path):
    ds = make_dataset("regression", seed=1, n=64)

    def run(out):
        model = build_mlp([4, 8, 1], seed=1)
        return train(model, ds, strategy="gmt", keep_fraction=0.5, steps=10,
                     accum_n=2, base_lr=0.01, seed=1, batch_size=8,
                     eval_every=5, out_dir=out, checkpoint_every=5)

    a = run(tmp_path / "a")
    b = run(tmp_path / "b")
    assert a.checksum == b.checksum
    assert a.losses == b.losses and a.eval_losses == b.eval_losses
    steps_a = (tmp_path / "a" / "steps.csv").read_text()
    steps_b = (tmp_path / "b" / "steps.csv").read_text()
    assert steps_a == steps_b
    assert steps_a.splitlines()[0] == "step,loss,lr,kept_fraction"
    assert len(steps_a.splitlines()) == 11
    assert (tmp_path / "a" / "step5.gmtckpt").exists()
    assert (tmp_path / "a" / "final.gmtckpt").exists()
    from gradmask.checkpoint import load_checkpoint, registry_checksum

    assert registry_checksum(load_checkpoint(tmp_path / "a" / "final.gmtckpt")) == a.checksum


def test_train_validates_arguments():
    ds = make_dataset("regression", seed=1, n=64)
    model = build_mlp([4, 8, 1], seed=1)
    with pytest.raises(ValueError, match="steps"):
        train(model, ds, steps=0)
    with pytest.raises(ValueError, match="keep_fraction"):
        train(model, ds, keep_fraction=0.0)
    with pytest.raises(ValueError, match="accum_n"):
        train(model, ds, accum_n=0)


def test_exempt_groups_never_masked():
    ds = make_dataset("regression", seed=7, n=64)
    model = build_mlp([4, 8, 1], seed=7)
    report = train(model, ds, strategy="gmt", keep_fraction=0.2, steps=5,
                   accum_n=1, base_lr=0.01, seed=7, batch_size=8,
                   exempt_groups=("bias",))
    n_bias = sum(t.size for _, t, grp in model.registry if grp == "bias")
    total = model.registry.total_params()
    # kept fraction is at least the exempt share
    assert all(k >= n_bias / total for k in report.kept_fractions)


def test_gmt_final_loss_close_to_vanilla_oracle():
    # desk-scale run: vanilla first as the oracle, then GMT keep 0.8
    def run(strategy, keep):
        ds = make_dataset("regression", seed=7, n=512)
        model = build_mlp([4, 32, 1], activation="gelu", seed=7)
        report = train(model, ds, strategy=strategy, keep_fraction=keep,
                       steps=2000, accum_n=4, base_lr=0.01, seed=7,
                       optimizer="adam", batch_size=16)
        return report.losses[-1]

    vanilla = run("none", 1.0)
    gmt = run("gmt", 0.8)
    assert gmt <= 1.5 * vanilla
