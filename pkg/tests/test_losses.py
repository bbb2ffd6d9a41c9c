import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradient_rel_error
from priordepth.losses import (
    EmptyMaskError,
    LossConfig,
    batch_objective,
    chamfer_1d,
    loss_chamfer,
    loss_objective,
    loss_rmse,
    loss_silog,
    sample_valid_depths,
)

f64 = dict(dtype=torch.float64)


def pair(seed, shape=(6, 6)):
    g = torch.Generator().manual_seed(seed)
    gt = 0.5 + 9.5 * torch.rand(shape, generator=g, **f64)
    pred = 0.5 + 9.5 * torch.rand(shape, generator=g, **f64)
    mask = torch.rand(shape, generator=g, **f64) > 0.2
    return pred, gt, mask


# -- values ------------------------------------------------------------------

def test_rmse_values():
    pred, gt, _ = pair(0)
    assert loss_rmse(gt, gt).item() == 0.0
    assert loss_rmse(gt + 1, gt).item() == pytest.approx(1.0, abs=1e-12)


def test_rmse_matches_direct_formula():
    pred, gt, _ = pair(1, (8, 8))
    p, g = pred.numpy(), gt.numpy()
    direct = math.sqrt(((p - g) ** 2).sum() / p.size)
    assert loss_rmse(pred, gt).item() == pytest.approx(direct, abs=1e-12)


def test_silog_values():
    _, gt, _ = pair(2)
    assert loss_silog(gt, gt).item() == 0.0
    assert loss_silog(math.e * gt, gt).item() == pytest.approx(3.872983, abs=1e-6)


def test_silog_without_variance_weight_is_scaled_log_rmse():
    pred, gt, _ = pair(3)
    cfg = LossConfig(lambda_silog=0.0, beta=10.0)
    log_rmse = torch.sqrt(torch.mean((torch.log(pred) - torch.log(gt)) ** 2))
    assert loss_silog(pred, gt, None, cfg).item() == pytest.approx(10 * log_rmse.item(), rel=1e-12)


def test_chamfer_values():
    cfg = LossConfig(chamfer_samples=10)
    centres = torch.tensor([1.0, 2.0], **f64)
    assert loss_chamfer(centres, torch.tensor([[1.0, 2.0]], **f64), None, cfg).item() == 0.0
    assert loss_chamfer(torch.tensor([1.0], **f64), torch.tensor([[2.0, 4.0]], **f64), None, cfg).item() == 11.0
    assert chamfer_1d(torch.tensor([1.0]), torch.tensor([2.0, 4.0]), "mean").item() == 1.0 + 5.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 20), min_size=1, max_size=12),
       st.lists(st.floats(0.1, 20), min_size=1, max_size=12))
def test_chamfer_symmetric(a, b):
    a, b = torch.tensor(a, **f64), torch.tensor(b, **f64)
    assert chamfer_1d(a, b).item() == pytest.approx(chamfer_1d(b, a).item(), abs=1e-12)
    assert chamfer_1d(a, b).item() >= 0


def test_chamfer_sampling_is_seeded():
    pred, gt, mask = pair(4, (40, 40))
    cfg = LossConfig(chamfer_samples=100)
    centres = torch.linspace(0.5, 10, 16, **f64)
    a = loss_chamfer(centres, gt, mask, cfg, seed=3)
    b = loss_chamfer(centres, gt, mask, cfg, seed=3)
    assert a.item() == b.item()
    s = sample_valid_depths(gt, mask, 100, 3)
    assert s.numel() == 100 and set(s.tolist()) <= set(gt[mask].tolist())


def test_small_images_use_every_valid_depth():
    _, gt, mask = pair(5)
    s = sample_valid_depths(gt, mask, 8192, 0)
    torch.testing.assert_close(s, gt[mask])


def test_weighted_sum():
    pred, gt, mask = pair(6)
    centres = torch.linspace(1, 9, 8, **f64)
    total, parts = loss_objective(pred, gt, mask, centres)
    expected = 0.3 * parts["rmse"] + 0.6 * parts["silog"] + 0.1 * parts["chamfer"]
    assert total.item() == pytest.approx(expected.item(), rel=1e-12)
    assert 0.3 * 1.0 + 0.6 * 2.0 + 0.1 * 3.0 == pytest.approx(1.8)


def test_objective_zero_at_truth():
    gt = torch.tensor([[1.0, 2.0], [2.0, 1.0]], **f64)
    total, _ = loss_objective(gt, gt, None, torch.tensor([1.0, 2.0], **f64))
    assert total.item() == 0.0


def test_rmse_only_weights():
    pred, gt, mask = pair(7)
    cfg = LossConfig(w_rmse=1, w_silog=0, w_chamfer=0)
    total, parts = loss_objective(pred, gt, mask, torch.ones(3, **f64), cfg)
    assert total.item() == loss_rmse(pred, gt, mask).item()
    assert parts["silog"].item() > 0


def test_batch_objective_averages_samples():
    p1, g1, m1 = pair(8)
    p2, g2, m2 = pair(9)
    centres = torch.stack([torch.linspace(1, 9, 8, **f64)] * 2)
    total, parts = batch_objective(torch.stack([p1, p2]), torch.stack([g1, g2]), torch.stack([m1, m2]),
                                   centres, seeds=[0, 1])
    t1, _ = loss_objective(p1.flatten(), g1.flatten(), m1.flatten(), centres[0], seed=0)
    t2, _ = loss_objective(p2.flatten(), g2.flatten(), m2.flatten(), centres[1], seed=1)
    assert total.item() == pytest.approx((t1.item() + t2.item()) / 2, rel=1e-12)
    assert parts["total"] == pytest.approx(total.item())


def test_empty_mask_rejected():
    pred, gt, _ = pair(10)
    with pytest.raises(EmptyMaskError):
        loss_rmse(pred, gt, torch.zeros_like(gt, dtype=torch.bool))


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_silog=1.5)
    with pytest.raises(ValueError):
        LossConfig(w_rmse=-1)
    with pytest.raises(ValueError):
        LossConfig(chamfer_reduction="max")


# -- properties --------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_silog_scale_invariant(seed, s):
    pred, gt, mask = pair(seed)
    a = loss_silog(pred, gt, mask).item()
    b = loss_silog(s * pred, s * gt, mask).item()
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_non_negative(seed):
    pred, gt, mask = pair(seed)
    centres = torch.sort(pred.flatten()[:8]).values
    assert loss_rmse(pred, gt, mask) >= 0
    assert loss_silog(pred, gt, mask) >= 0
    assert loss_chamfer(centres, gt, mask) >= 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_pixels_ignored(seed):
    pred, gt, mask = pair(seed)
    other = pred.clone()
    other[~mask] = 1e3
    gt2 = gt.clone()
    gt2[~mask] = 77.0
    centres = torch.linspace(1, 9, 8, **f64)
    for fn in (loss_rmse, loss_silog):
        assert fn(pred, gt, mask).item() == fn(other, gt, mask).item()
    assert loss_chamfer(centres, gt, mask).item() == loss_chamfer(centres, gt2, mask).item()


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_rmse_gradient(seed):
    pred, gt, mask = pair(seed)
    assert gradient_rel_error(lambda p: loss_rmse(p, gt, mask), pred) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_silog_gradient(seed):
    pred, gt, mask = pair(seed)
    assert gradient_rel_error(lambda p: loss_silog(p, gt, mask), pred) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_chamfer_gradient(seed):
    _, gt, mask = pair(seed)
    centres = torch.linspace(0.7, 9.3, 7, **f64) + 0.01 * seed
    assert gradient_rel_error(lambda c: loss_chamfer(c, gt, mask), centres) < 1e-3


def test_sqrt_gradient_finite_at_zero():
    gt = torch.rand(4, 4, **f64) + 1
    pred = gt.clone().requires_grad_(True)
    (loss_rmse(pred, gt) + loss_silog(pred, gt)).backward()
    assert torch.all(torch.isfinite(pred.grad)) and torch.all(pred.grad == 0)
