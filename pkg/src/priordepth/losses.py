"""Training objective: RMSE, parameterized SILog and a Chamfer bin regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_FLOOR = 1e-6


class EmptyMaskError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_silog: float = 0.85
    beta: float = 10.0
    w_rmse: float = 0.3
    w_silog: float = 0.6
    w_chamfer: float = 0.1
    chamfer_samples: int = 8192
    chamfer_reduction: str = "sum"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_silog <= 1.0:
            raise ValueError("lambda_silog must lie in [0, 1]")
        if min(self.w_rmse, self.w_silog, self.w_chamfer) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.chamfer_reduction not in ("sum", "mean"):
            raise ValueError("chamfer_reduction must be 'sum' or 'mean'")


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # zero (not NaN) gradient at x == 0; NaN input still yields NaN
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), x * 0)


def _select(pred, gt, mask):
    if mask is None:
        mask = torch.isfinite(gt) & (gt > 0)
    mask = mask.bool()
    if not mask.any():
        raise EmptyMaskError("empty mask")
    return pred[mask], gt[mask]


def loss_rmse(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    p, g = _select(pred, gt, mask)
    return _safe_sqrt(torch.mean((p - g) ** 2))


def loss_silog(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None,
               config: LossConfig | None = None) -> torch.Tensor:
    """``beta * sqrt(mean(g^2) - lambda * mean(g)^2)`` with ``g = log pred - log gt``."""
    cfg = config or LossConfig()
    p, t = _select(pred, gt, mask)
    g = torch.log(torch.clamp(p, min=LOG_FLOOR)) - torch.log(t)
    d = torch.mean(g ** 2) - cfg.lambda_silog * torch.mean(g) ** 2
    return cfg.beta * _safe_sqrt(torch.clamp(d, min=0.0))


def sample_valid_depths(gt: torch.Tensor, mask: torch.Tensor | None, n: int, seed: int) -> torch.Tensor:
    """Seeded uniform subset of at most ``n`` valid ground-truth depths."""
    _, values = _select(gt, gt, mask)
    if values.numel() <= n:
        return values
    gen = torch.Generator().manual_seed(int(seed))
    idx = torch.randperm(values.numel(), generator=gen)[:n]
    return values[idx.to(values.device)]


def chamfer_1d(a: torch.Tensor, b: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Bidirectional squared nearest-neighbour distance between two 1-D point sets."""
    d = (a.reshape(-1, 1) - b.reshape(1, -1)) ** 2
    ab = d.min(dim=1).values
    ba = d.min(dim=0).values
    if reduction == "mean":
        return ab.mean() + ba.mean()
    return ab.sum() + ba.sum()


def loss_chamfer(centers: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None,
                 config: LossConfig | None = None, seed: int | None = None) -> torch.Tensor:
    cfg = config or LossConfig()
    target = sample_valid_depths(gt, mask, cfg.chamfer_samples, cfg.seed if seed is None else seed)
    return chamfer_1d(centers.reshape(-1), target.to(centers.dtype), cfg.chamfer_reduction)


def loss_objective(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None,
                   centers: torch.Tensor, config: LossConfig | None = None,
                   seed: int | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the three losses for a single image.

    Terms with zero weight are still reported but kept out of the graph.
    """
    cfg = config or LossConfig()
    terms = {
        "rmse": (cfg.w_rmse, lambda: loss_rmse(pred, gt, mask)),
        "silog": (cfg.w_silog, lambda: loss_silog(pred, gt, mask, cfg)),
        "chamfer": (cfg.w_chamfer, lambda: loss_chamfer(centers, gt, mask, cfg, seed)),
    }
    total = pred.new_zeros(())
    parts = {}
    for name, (w, fn) in terms.items():
        if w == 0:
            with torch.no_grad():
                parts[name] = fn()
            continue
        value = fn()
        parts[name] = value
        total = total + w * value
    return total, parts


def batch_objective(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, centers: torch.Tensor,
                    config: LossConfig | None = None,
                    seeds: list[int] | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean of ``loss_objective`` over a batch; (B,1,H,W) or (B,H,W) maps, (B,n) centres."""
    b = pred.shape[0]
    pred = pred.reshape(b, -1)
    gt = gt.reshape(b, -1)
    mask = mask.reshape(b, -1)
    totals = []
    acc = {"rmse": 0.0, "silog": 0.0, "chamfer": 0.0}
    for i in range(b):
        t, parts = loss_objective(pred[i], gt[i], mask[i], centers[i], config,
                                  None if seeds is None else seeds[i])
        totals.append(t)
        for k, v in parts.items():
            acc[k] += float(v.detach()) / b
    total = torch.stack(totals).mean()
    acc["total"] = float(total.detach())
    return total, acc
