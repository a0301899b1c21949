import copy
import math
import time

import numpy as np
import pytest
import torch

from cognitivetwin.data import fit_normalization, select_split
from cognitivetwin.estimator import CognitiveTwin
from cognitivetwin.training import (
    CheckpointError, EarlyStopping, NumericalError, TrainConfig, combine_losses, composite_loss,
    cosine_lr, draw_noise, fit, global_grad_norm, gradient_check, load_checkpoint, save_checkpoint,
)

from conftest import TINY, make_patient


def tiny_setup(variant="full", dtype="float64", n=6, **kw):
    """A float64 tiny network and a batch of 3-visit patients (months 0/12/24)."""
    est = CognitiveTwin(variant=variant, dtype=dtype, dropout=0.0, **{**TINY, **kw})
    rng = np.random.default_rng(0)
    cohort = [make_patient(f"P{i}", mmse=tuple(rng.uniform(20, 30, 3))) for i in range(n)]
    stats = fit_normalization(cohort, split=None)
    net = est._build_net()
    return est, net, est._batch(cohort, stats), cohort


# ---------------------------------------------------------------------------
# Composite loss


def test_total_is_scaled_sum():
    out = combine_losses(torch.tensor(2.0), torch.tensor(10.0), 0.1)
    assert float(out.total.detach()) == pytest.approx(3.0, abs=1e-12)


def test_total_zero_for_perfect_static_fit():
    est, net, batch, _ = tiny_setup("no_dmm")
    net.eval()
    with torch.no_grad():
        batch.target = net(batch).prediction.clone()
    loss = composite_loss(net, batch)
    assert float(loss.total.detach()) == 0.0


def test_total_matches_component_oracle():
    est, net, batch, _ = tiny_setup()
    net.eval()
    noise = torch.randn(batch.size, batch.xs[0].shape[1], net.dmm.latent_dim,
                        generator=torch.Generator().manual_seed(1))
    loss = composite_loss(net, batch, noise=noise)
    out = net(batch, noise)
    task = float(((out.prediction - batch.target)[batch.has_target] ** 2).mean().detach())
    elbo = out.elbo
    neg = float((elbo.reconstruction_term + elbo.kl_term).sum().detach()) / batch.size
    assert abs(float(loss.task_mse.detach()) - task) < 1e-9
    assert abs(float(loss.dmm_negative_elbo.detach()) - neg) < 1e-9
    assert abs(float(loss.total.detach()) - (task + 0.1 * neg)) < 1e-9


def test_patients_without_target_contribute_only_elbo():
    est, net, batch, cohort = tiny_setup()
    net.eval()
    noise = draw_noise(net, batch, torch.Generator().manual_seed(0), torch.float64)
    full = composite_loss(net, batch, noise=noise)
    batch.has_target[:] = False
    no_task = composite_loss(net, batch, noise=noise)
    assert float(no_task.task_mse.detach()) == 0.0
    assert float(no_task.dmm_negative_elbo.detach()) == pytest.approx(float(full.dmm_negative_elbo.detach()), abs=1e-12)


def test_empty_batch_is_an_error():
    est, net, batch, _ = tiny_setup()
    with pytest.raises(ValueError, match="non-empty"):
        composite_loss(net, batch.subset([]) if False else _empty(batch))


def _empty(batch):
    b = copy.copy(batch)
    b.lengths = batch.lengths[:0]
    return b


# ---------------------------------------------------------------------------
# Schedule and early stopping


def test_cosine_schedule_closed_form():
    assert cosine_lr(0, 8e-4, 150) == 8e-4
    assert cosine_lr(150, 8e-4, 150) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(75, 8e-4, 150) == pytest.approx(4e-4)
    for e in (10, 33, 100):
        assert cosine_lr(e, 8e-4, 150) == pytest.approx(8e-4 * (1 + math.cos(math.pi * e / 150)) / 2)


def test_early_stopping_improving_runs_to_end():
    s = EarlyStopping(10)
    stops = [s.step(e, 1.0 / e) for e in range(1, 151)]
    assert not any(stops) and s.best_epoch == 150


def test_early_stopping_flat_after_epoch_five():
    s = EarlyStopping(10)
    for e in range(1, 40):
        if s.step(e, max(0.5, 1.0 - 0.1 * e)):
            break
    assert e == 15 and s.best_epoch == 5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.batch_size, c.max_epochs, c.early_stop_patience,
            c.grad_clip_max_norm, c.dmm_loss_scale, c.t_max) == (8e-4, 1e-3, 32, 150, 10, 1.0, 0.1, 150)


# ---------------------------------------------------------------------------
# fit


def _fit(small_cohort, **kw):
    params = {**TINY, "max_epochs": 4, "dtype": "float64", **kw}
    return CognitiveTwin(**params).fit(small_cohort)


def test_fit_records_history(small_cohort):
    m = _fit(small_cohort)
    assert [r["epoch"] for r in m.history_] == [1, 2, 3, 4]
    for r in m.history_:
        assert {"epoch", "train_total", "val_total", "lr"} <= set(r)
    assert m.history_[0]["lr"] == 8e-4
    assert m.best_val_loss_ == min(r["val_total"] for r in m.history_)


def test_fit_is_deterministic(small_cohort):
    a = _fit(small_cohort).history_
    b = _fit(small_cohort).history_
    for x, y in zip(a, b):
        for k in x:
            assert abs(x[k] - y[k]) <= 1e-9


def test_best_checkpoint_reproduces_validation_loss(small_cohort):
    m = _fit(small_cohort, max_epochs=5)
    val = select_split(small_cohort, "validation")
    assert abs(m.validation_loss(val) - m.best_val_loss_) < 1e-6


def test_gradient_clipping_bounds_update_norm():
    est, net, batch, _ = tiny_setup()
    with torch.no_grad():
        for p in net.parameters():
            p.mul_(5.0)
    loss = composite_loss(net, batch, torch.Generator().manual_seed(0))
    loss.total.backward()
    params = [p for p in net.parameters()]
    pre = global_grad_norm(params)
    torch.nn.utils.clip_grad_norm_(params, 1.0)
    assert pre > 1.0 and global_grad_norm(params) <= 1.0 + 1e-6


def test_non_finite_loss_aborts_with_batch_index():
    est, net, batch, _ = tiny_setup()
    batch.target = batch.target.clone()
    batch.target[0] = float("nan")
    with pytest.raises(NumericalError, match="batch 0"):
        fit(net, batch, batch, TrainConfig(max_epochs=1))


# ---------------------------------------------------------------------------
# Checkpoints


def _save(m, path):
    r = m.fit_result_
    save_checkpoint(path, state_dict=r.best_state, config=m.get_params(),
                    normalization=m.stats_.to_dict(), epoch=r.epoch, best_val_loss=r.best_val_loss,
                    history=r.history, last_state=r.last_state, optimizer=r.optimizer_state,
                    stopper=r.stopper_state, extra={"residual_std": m.residual_std_})


def test_checkpoint_round_trip(small_cohort, tmp_path):
    from cognitivetwin.data import NormalizationStats

    m = _fit(small_cohort)
    _save(m, tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck["format"] == "ckpt/v1" and ck["epoch"] == 4
    again = CognitiveTwin(**ck["config"]).load(
        ck["state_dict"], NormalizationStats.from_dict(ck["normalization"]), ck["extra"]["residual_std"])
    val = select_split(small_cohort, "validation")
    assert abs(again.validation_loss(val) - ck["best_val_loss"]) < 1e-6
    np.testing.assert_array_equal(again.predict(val), m.predict(val))


def test_corrupted_checkpoint_is_rejected(small_cohort, tmp_path):
    m = _fit(small_cohort, max_epochs=1)
    path = tmp_path / "m.ckpt"
    _save(m, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_resume_continues_epochs(small_cohort, tmp_path):
    m = _fit(small_cohort, max_epochs=2)
    _save(m, tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    resumed = CognitiveTwin(**{**ck["config"], "max_epochs": 4}).fit(small_cohort, resume=ck)
    assert [r["epoch"] for r in resumed.history_] == [1, 2, 3, 4]
    straight = _fit(small_cohort, max_epochs=4)
    for a, b in zip(resumed.history_, straight.history_):
        assert abs(a["val_total"] - b["val_total"]) < 1e-9


# ---------------------------------------------------------------------------
# Gradient verification


def test_gradient_check_linear_model_is_exact():
    torch.manual_seed(0)
    lin = torch.nn.Linear(5, 3).double()
    x = torch.randn(4, 5, dtype=torch.float64)
    c = torch.randn(4, 3, dtype=torch.float64)
    rep = gradient_check(lambda: (lin(x) * c).sum(), dict(lin.named_parameters()), eps=1e-3)
    assert rep.worst < 1e-8


def test_gradient_check_flags_corrupted_gradient():
    torch.manual_seed(0)
    lin = torch.nn.Linear(5, 3).double()
    x = torch.randn(4, 5, dtype=torch.float64)
    params = dict(lin.named_parameters())

    def loss():
        return (lin(x) ** 2).sum()

    def bad_grads():
        g = torch.autograd.grad(loss(), list(params.values()))
        return [g[0] * 1.01, g[1]]

    rep = gradient_check(loss, params, grad_fn=bad_grads)
    assert not rep.passed and rep.max_relative_error["weight"] > 1e-3


def composite_gradient_report():
    """Composite loss of the reduced float64 network (d_model 8, latent 3, T = 3)."""
    est, net, batch, _ = tiny_setup(n=2)
    net.train()
    net.dmm.detach_target = False
    noise = torch.randn(batch.size, 3, 3, generator=torch.Generator().manual_seed(0))
    params = dict(net.named_parameters())
    return gradient_check(lambda: composite_loss(net, batch, noise=noise).total, params,
                          eps=1e-5, floor=1e-5, max_entries=16)


def test_gradient_check_composite_loss():
    t = time.perf_counter()
    rep = composite_gradient_report()
    assert rep.passed, sorted(rep.max_relative_error.items(), key=lambda kv: -kv[1])[:3]
    assert time.perf_counter() - t < 30
