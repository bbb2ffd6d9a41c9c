import numpy as np
import pytest
import torch

from priordepth.data import AugmentConfig, DepthSample, generate_synthetic
from priordepth.losses import LossConfig, batch_objective
from priordepth.model import NetworkConfig
from priordepth.priors import SparsePrior
from priordepth.training import (
    NonFiniteLossError,
    StepLog,
    TrainConfig,
    batch_tensors,
    configs_from_payload,
    evaluate_model,
    fit,
    init_state,
    load_state,
    lr_schedule,
    mean_train_rmse,
    predict,
    train_step,
)

NET = NetworkConfig.toy()


def dense_prior(sample: DepthSample) -> SparsePrior:
    ys, xs = np.nonzero(sample.validity)
    return SparsePrior(np.column_stack([xs, ys, sample.gt_depth[ys, xs]]), sample.id)


def batch_loss(model, samples, loss_cfg=LossConfig()):
    images, prior, gt, mask = batch_tensors(samples, NET.sigma)
    with torch.no_grad():
        out = model(images, prior)
        loss, _ = batch_objective(out.depth, gt, mask, out.bins.centers, loss_cfg, list(range(len(samples))))
    return float(loss)


# -- schedule ----------------------------------------------------------------

def test_lr_values():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(1, cfg) == pytest.approx(9e-5, rel=1e-12)
    assert lr_schedule(10, cfg) == pytest.approx(3.4868e-5, abs=1e-9)


def test_lr_ratio_constant():
    cfg = TrainConfig()
    for t in range(30):
        assert lr_schedule(t, cfg) > 0
        assert lr_schedule(t + 1, cfg) / lr_schedule(t, cfg) == pytest.approx(0.9, rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_config_validation():
    for bad in (dict(base_lr=0), dict(decay_rate=0), dict(decay_rate=1.1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- single steps ------------------------------------------------------------

def test_step_advances_and_clips():
    samples = generate_synthetic(0, 2, 64, 48, 100)
    cfg = TrainConfig.toy(grad_clip_norm=0.05)
    state = init_state(NET, cfg)
    parts = train_step(state, samples, NET, LossConfig(), cfg, AugmentConfig())
    assert state.step == 1
    assert set(parts) >= {"total", "rmse", "silog", "chamfer", "lr"}
    norm = torch.sqrt(sum((p.grad ** 2).sum() for p in state.model.parameters() if p.grad is not None))
    assert norm <= 0.05 + 1e-6


def test_step_uses_epoch_learning_rate():
    samples = generate_synthetic(0, 2, 64, 48, 10)
    cfg = TrainConfig.toy()
    state = init_state(NET, cfg)
    state.epoch = 3
    parts = train_step(state, samples, NET, LossConfig(), cfg, AugmentConfig())
    assert parts["lr"] == pytest.approx(1e-3 * 0.99 ** 3)
    assert state.optimizer.param_groups[0]["lr"] == parts["lr"]


def test_exact_prediction_gives_zero_update():
    cfg = TrainConfig.toy(weight_decay=0.0, dtype="float64")
    state = init_state(NET, cfg)
    s = generate_synthetic(1, 1, 64, 48, 50)[0]
    s = DepthSample(s.image, s.gt_depth, np.ones_like(s.validity), s.prior, s.id)
    state.model.train()
    with torch.no_grad():
        images, prior, _, _ = batch_tensors([s], NET.sigma, torch.float64)
        pred = state.model(images, prior).depth[0, 0].numpy()
    target = DepthSample(s.image, pred.copy(), s.validity, s.prior, s.id)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    train_step(state, [target], NET, LossConfig(1.0, 10.0, 1.0, 0.0, 0.0), cfg, AugmentConfig.identity())
    assert all(p.grad is None or not p.grad.any() for p in state.model.parameters())
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_non_finite_loss_names_batch():
    samples = generate_synthetic(0, 2, 64, 48, 10)
    cfg = TrainConfig.toy()
    state = init_state(NET, cfg)
    with torch.no_grad():
        state.model.classifier.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="synth_0_00000"):
        train_step(state, samples, NET, LossConfig(), cfg, AugmentConfig())


def test_empty_batch_rejected():
    cfg = TrainConfig.toy()
    with pytest.raises(ValueError):
        train_step(init_state(NET, cfg), [], NET, LossConfig(), cfg, AugmentConfig())


def test_descent_on_repeated_sample():
    sample = generate_synthetic(3, 1, 64, 48, 100)
    cfg = TrainConfig.toy()
    state = init_state(NET, cfg)
    first = train_step(state, sample, NET, LossConfig(), cfg, AugmentConfig.identity())["total"]
    for _ in range(199):
        last = train_step(state, sample, NET, LossConfig(), cfg, AugmentConfig.identity())["total"]
    assert last < first


# -- fit ---------------------------------------------------------------------

def test_fit_is_deterministic():
    samples = generate_synthetic(0, 4, 64, 48, 50)
    cfg = TrainConfig.toy(epochs=2)
    _, a = fit(samples, None, NET, LossConfig(), cfg, AugmentConfig())
    _, b = fit(samples, None, NET, LossConfig(), cfg, AugmentConfig())
    assert [r["total"] for r in a.rows] == [r["total"] for r in b.rows]
    assert len(a.rows) == 4


def test_resume_reproduces_next_epoch(tmp_path):
    samples = generate_synthetic(0, 4, 64, 48, 50)
    cfg = TrainConfig.toy(epochs=2, dtype="float64", checkpoint_dir=str(tmp_path))
    state, full = fit(samples, None, NET, LossConfig(), cfg, AugmentConfig())
    resumed, _ = load_state(tmp_path / "epoch_0001.pt")
    assert (resumed.epoch, resumed.step) == (1, 2)
    _, tail = fit(samples, None, NET, LossConfig(), cfg, AugmentConfig(), state=resumed)
    assert [r["total"] for r in tail.rows] == [r["total"] for r in full.rows[2:]]
    for a, b in zip(state.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_restores_configs(tmp_path):
    samples = generate_synthetic(0, 2, 64, 48, 10)
    cfg = TrainConfig.toy(epochs=1, checkpoint_dir=str(tmp_path))
    state, _ = fit(samples, None, NET, LossConfig(w_chamfer=0.2), cfg, AugmentConfig(p_hflip=0.3))
    restored, payload = load_state(tmp_path / "epoch_0001.pt")
    net, loss, train, aug = configs_from_payload(payload)
    assert net == NET and loss.w_chamfer == 0.2 and aug.p_hflip == 0.3 and train.epochs == 1
    for (k, a), b in zip(state.model.state_dict().items(), restored.model.state_dict().values()):
        assert torch.equal(a, b), k


def test_eval_every_epoch_and_best_checkpoint(tmp_path):
    samples = generate_synthetic(0, 4, 64, 48, 50)
    cfg = TrainConfig.toy(epochs=3, eval_every=1, checkpoint_dir=str(tmp_path))
    state, log = fit(samples, samples[:2], NET, LossConfig(), cfg, AugmentConfig(),
                     log_path=tmp_path / "log.csv")
    assert len(state.eval_history) == 3
    assert all(len(s) == 3 for s in state.eval_history)
    assert state.best_eval.rmse_lin == min(s[0].rmse_lin for s in state.eval_history)
    assert (tmp_path / "best.pt").exists() and (tmp_path / "epoch_0003.pt").exists()
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,lr,total,rmse,silog,chamfer" and len(lines) == 1 + 6


def test_max_steps_stops_early():
    samples = generate_synthetic(0, 4, 64, 48, 10)
    state, log = fit(samples, None, NET, LossConfig(), TrainConfig.toy(epochs=5, max_steps=3), AugmentConfig())
    assert state.step == 3 and len(log.rows) == 3


def test_fifty_epochs_reduce_train_error():
    samples = generate_synthetic(5, 8, 64, 48, 100)
    cfg = TrainConfig.toy(epochs=50)
    state = init_state(NET, cfg)
    before = mean_train_rmse(state.model, samples)
    state, _ = fit(samples, None, NET, LossConfig(), cfg, AugmentConfig(), state=state)
    assert mean_train_rmse(state.model, samples) < before


def test_zero_prior_evaluation_matches_prior_free_samples():
    samples = generate_synthetic(0, 2, 64, 48, 100)
    state = init_state(NET, TrainConfig.toy())
    reports = evaluate_model(state.model, samples, n_priors=0)
    assert list(reports) == [s.id for s in samples] and len(reports[samples[0].id]) == 3
    bare = [DepthSample(s.image, s.gt_depth, s.validity, SparsePrior(), s.id) for s in samples]
    preds = predict(state.model, bare)
    assert preds[0].shape == (48, 64)
    for s, p in zip(samples, preds):
        full = reports[s.id][0]
        assert full.rmse_lin == pytest.approx(np.sqrt(np.mean((p - s.gt_depth)[s.validity] ** 2)), rel=1e-12)


def test_step_log_in_memory():
    log = StepLog(None)
    log.add(1, 0, {"lr": 1.0, "total": 2.0, "rmse": 3.0, "silog": 4.0, "chamfer": 5.0})
    assert log.rows == [{"step": 1, "epoch": 0, "lr": 1.0, "total": 2.0, "rmse": 3.0, "silog": 4.0,
                         "chamfer": 5.0}]


# -- prior signal ------------------------------------------------------------

@pytest.mark.slow
def test_priors_lower_loss_after_warmup():
    """Dense priors beat zero priors on the same weights after 200 warm-up steps, for most seeds."""
    wins = 0
    for seed in range(10):
        train = generate_synthetic(100 + seed, 8, 64, 48, 100, scale_range=(0.5, 1.5))
        cfg = TrainConfig.toy(seed=seed, max_steps=200, epochs=10_000)
        state, _ = fit(train, None, NET, LossConfig(), cfg, AugmentConfig(p_prior_dropout=0.0))
        state.model.train()
        probe = generate_synthetic(200 + seed, 2, 64, 48, 1, scale_range=(0.5, 1.5))
        dense = [DepthSample(s.image, s.gt_depth, s.validity, dense_prior(s), s.id) for s in probe]
        empty = [DepthSample(s.image, s.gt_depth, s.validity, SparsePrior(), s.id) for s in probe]
        wins += batch_loss(state.model, dense) < batch_loss(state.model, empty)
    assert wins >= 8
