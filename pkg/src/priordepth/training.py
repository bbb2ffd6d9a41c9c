"""Supervised training loop: augmentation, prior densification, AdamW, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AugmentConfig, DepthSample, augment
from .densify import prior_maps
from .evaluation import DEFAULT_CAPS, MetricReport, evaluate_ranges, summarize
from .losses import LossConfig, batch_objective
from .model import NetworkConfig, PriorDepthNet, load_checkpoint, save_checkpoint
from .priors import SparsePrior, subsample_prior

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "total", "rmse", "silog", "chamfer")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    decay_rate: float = 0.9
    decay_unit: str = "epoch"
    batch_size: int = 6
    epochs: int = 10
    max_steps: int | None = None
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    grad_clip_norm: float | None = 1.0
    n_priors: int = 200
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 1
    eval_priors: int | None = None
    deterministic: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_unit not in ("epoch", "step"):
            raise ValueError("decay_unit must be 'epoch' or 'step'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.betas = tuple(self.betas)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(base_lr=1e-3, decay_rate=0.99, batch_size=2, grad_clip_norm=1.0, n_priors=100)
        base.update(overrides)
        return cls(**base)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def lr_schedule(t: int, config: TrainConfig) -> float:
    """Exponential decay ``base_lr * decay_rate ** t``; ``t`` counts ``decay_unit``s."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return config.base_lr * config.decay_rate ** t


@dataclass
class TrainState:
    model: PriorDepthNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    best_eval: MetricReport | None = None
    eval_history: list = field(default_factory=list)


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)


def init_state(net_cfg: NetworkConfig, train_cfg: TrainConfig) -> TrainState:
    set_determinism(train_cfg.deterministic)
    torch.manual_seed(train_cfg.seed)
    model = PriorDepthNet(net_cfg).to(train_cfg.torch_dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.base_lr, betas=train_cfg.betas,
                            weight_decay=train_cfg.weight_decay)
    return TrainState(model, opt, np.random.default_rng(train_cfg.seed))


def batch_tensors(samples: Sequence[DepthSample], sigma: float, dtype=torch.float32,
                  use_prior: bool = True):
    """Stack samples into (image, prior, gt, mask) tensors; priors are densified here."""
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    gt = torch.from_numpy(np.stack([s.gt_depth for s in samples])).to(dtype).unsqueeze(1)
    mask = torch.from_numpy(np.stack([s.validity for s in samples])).unsqueeze(1)
    prior = None
    if use_prior:
        maps = [prior_maps(s.prior, s.width, s.height, sigma).stack() for s in samples]
        prior = torch.from_numpy(np.stack(maps)).to(dtype)
    return images, prior, gt, mask


def _prepare(sample: DepthSample, state: TrainState, aug_cfg: AugmentConfig, n_priors: int) -> DepthSample:
    s = augment(sample, aug_cfg, state.rng)
    sub_seed = int(state.rng.integers(2 ** 31))
    s.prior = subsample_prior(s.prior, n_priors, sub_seed)
    return s


def current_lr(state: TrainState, cfg: TrainConfig) -> float:
    return lr_schedule(state.epoch if cfg.decay_unit == "epoch" else state.step, cfg)


def train_step(state: TrainState, batch: Sequence[DepthSample], net_cfg: NetworkConfig,
               loss_cfg: LossConfig, train_cfg: TrainConfig, aug_cfg: AugmentConfig) -> dict[str, float]:
    """One optimizer update on ``batch``; returns the loss breakdown plus ``lr``.

    Raises:
        NonFiniteLossError: the loss is NaN/inf; the message lists the batch ids.
    """
    if not batch:
        raise ValueError("empty batch")
    model = state.model
    model.train()
    prepared = [_prepare(s, state, aug_cfg, train_cfg.n_priors) for s in batch]
    chamfer_seeds = [int(x) for x in state.rng.integers(2 ** 31, size=len(prepared))]
    images, prior, gt, mask = batch_tensors(prepared, net_cfg.sigma, train_cfg.torch_dtype, net_cfg.use_prior)

    pred = model(images, prior)
    loss, parts = batch_objective(pred.depth, gt, mask, pred.bins.centers, loss_cfg, chamfer_seeds)
    if not torch.isfinite(loss):
        ids = [s.id for s in batch]
        raise NonFiniteLossError(f"non-finite loss {float(loss.detach())} at step {state.step} "
                                 f"(epoch {state.epoch}) for batch {ids}; terms {parts}")

    lr = current_lr(state, train_cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if train_cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip_norm)
    state.optimizer.step()
    state.step += 1
    parts["lr"] = lr
    return parts


@torch.no_grad()
def predict(model: PriorDepthNet, samples: Sequence[DepthSample], batch_size: int = 8) -> list[np.ndarray]:
    """Depth maps (H, W) for each sample, using the priors the samples carry."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, prior, _, _ = batch_tensors(chunk, model.cfg.sigma, dtype, model.cfg.use_prior)
        depth = model(images, prior).depth[:, 0]
        out.extend(d.double().numpy() for d in depth)
    return out


def with_priors(samples: Sequence[DepthSample], n: int, seed: int = 0) -> list[DepthSample]:
    """Copies of ``samples`` keeping a seeded subset of ``n`` prior points (0 removes them)."""
    out = []
    for i, s in enumerate(samples):
        prior = subsample_prior(s.prior, n, seed + i) if n > 0 else SparsePrior(source_image_id=s.prior.source_image_id)
        out.append(DepthSample(s.image, s.gt_depth, s.validity, prior, s.id))
    return out


def evaluate_model(model: PriorDepthNet, samples: Sequence[DepthSample], n_priors: int | None = None,
                   caps: Sequence[float] = DEFAULT_CAPS, seed: int = 0) -> dict[str, list[MetricReport]]:
    """Per-image range-capped reports; ``n_priors`` subsamples the stored priors first."""
    if n_priors is not None:
        samples = with_priors(samples, n_priors, seed)
    preds = predict(model, samples)
    return {s.id: evaluate_ranges(p, s.gt_depth, s.validity, caps) for s, p in zip(samples, preds)}


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_state(path: str | Path, state: TrainState, net_cfg: NetworkConfig, loss_cfg: LossConfig,
               train_cfg: TrainConfig, aug_cfg: AugmentConfig) -> None:
    save_checkpoint(path, state.model,
                    optimizer=state.optimizer.state_dict(), epoch=state.epoch, step=state.step,
                    rng_state=_rng_state(state.rng), torch_rng=torch.get_rng_state(),
                    best_eval=None if state.best_eval is None else asdict(state.best_eval),
                    loss_config=asdict(loss_cfg), train_config=asdict(train_cfg),
                    augment_config=asdict(aug_cfg))


def load_state(path: str | Path, train_cfg: TrainConfig | None = None) -> tuple[TrainState, dict]:
    """Restore a TrainState saved by ``save_state``; returns it with the raw payload."""
    model, payload = load_checkpoint(path)
    cfg = train_cfg or TrainConfig(**payload["train_config"])
    set_determinism(cfg.deterministic)
    model.to(cfg.torch_dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    opt.load_state_dict(payload["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    torch.set_rng_state(payload["torch_rng"])
    best = payload.get("best_eval")
    state = TrainState(model, opt, rng, payload["epoch"], payload["step"],
                       None if best is None else MetricReport(**best))
    return state, payload


def configs_from_payload(payload: dict):
    """(NetworkConfig, LossConfig, TrainConfig, AugmentConfig) stored in a training checkpoint."""
    net = NetworkConfig.from_dict(payload["network_config"])
    loss = LossConfig(**payload["loss_config"]) if "loss_config" in payload else LossConfig()
    train = TrainConfig(**payload["train_config"]) if "train_config" in payload else TrainConfig()
    aug = AugmentConfig(**payload["augment_config"]) if "augment_config" in payload else AugmentConfig()
    return net, loss, train, aug


class StepLog:
    """Append-only CSV of per-step losses."""

    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def add(self, step: int, epoch: int, parts: dict) -> None:
        row = {"step": step, "epoch": epoch, **{k: parts[k] for k in LOG_COLUMNS[2:]}}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=LOG_COLUMNS).writerow(row)


def fit(train_set: Sequence[DepthSample], eval_set: Sequence[DepthSample] | None,
        net_cfg: NetworkConfig, loss_cfg: LossConfig, train_cfg: TrainConfig, aug_cfg: AugmentConfig,
        state: TrainState | None = None, log_path: str | Path | None = None) -> tuple[TrainState, StepLog]:
    """Train for ``train_cfg.epochs`` epochs (or until ``max_steps``), resuming ``state`` if given.

    Batches are drawn from a seeded shuffle per epoch. Every ``eval_every``
    epochs the eval set is scored over the default range caps; checkpoints
    are written per epoch (``epoch_XXXX.pt``) and for the best full-range
    ``rmse_lin`` (``best.pt``) when ``checkpoint_dir`` is set.
    """
    if not train_set:
        raise ValueError("empty training set")
    if eval_set is not None and len(eval_set) == 0:
        raise ValueError("empty eval set")
    state = state or init_state(net_cfg, train_cfg)
    log = StepLog(log_path)
    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    while state.epoch < train_cfg.epochs:
        if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
            break
        order = state.rng.permutation(len(train_set))
        for i in range(0, len(order), train_cfg.batch_size):
            if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                break
            batch = [train_set[j] for j in order[i:i + train_cfg.batch_size]]
            parts = train_step(state, batch, net_cfg, loss_cfg, train_cfg, aug_cfg)
            log.add(state.step, state.epoch, parts)
        state.epoch += 1

        if eval_set is not None and train_cfg.eval_every and state.epoch % train_cfg.eval_every == 0:
            reports = evaluate_model(state.model, eval_set, train_cfg.eval_priors, seed=train_cfg.seed)
            summary = summarize(reports)
            state.eval_history.append(summary)
            full = summary[0]
            logger.info("epoch %d: rmse_lin %.4f", state.epoch, full.rmse_lin)
            if state.best_eval is None or full.rmse_lin < state.best_eval.rmse_lin:
                state.best_eval = full
                if ckpt_dir is not None:
                    save_state(ckpt_dir / "best.pt", state, net_cfg, loss_cfg, train_cfg, aug_cfg)
        if ckpt_dir is not None:
            save_state(ckpt_dir / f"epoch_{state.epoch:04d}.pt", state, net_cfg, loss_cfg, train_cfg, aug_cfg)
    return state, log


def mean_train_rmse(model: PriorDepthNet, samples: Sequence[DepthSample]) -> float:
    preds = predict(model, samples)
    vals = [evaluate_ranges(p, s.gt_depth, s.validity, [math.inf])[0].rmse_lin for s, p in zip(samples, preds)]
    return float(np.mean(vals))
