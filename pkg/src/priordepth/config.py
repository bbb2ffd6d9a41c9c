"""Flat key-value run configuration covering network, loss, training and augmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig
from .losses import LossConfig
from .model import NetworkConfig
from .training import TrainConfig

_SECTIONS = (("network", NetworkConfig), ("loss", LossConfig), ("train", TrainConfig),
             ("augment", AugmentConfig))
_RUN_KEYS = {"preset": "default", "data": None, "eval_data": None}

KEY_DOCS = {
    "preset": "'default' (320x240, full model) or 'toy' (64x48, small model) base values",
    "data": "training dataset root (rgb/, depth/, priors/)",
    "eval_data": "optional evaluation dataset root",
    # a single flat ``seed`` feeds every section that has one
    "seed": "seed for initialization, shuffling, augmentation and loss sampling",
    "input_width": "working image width in pixels", "input_height": "working image height in pixels",
    "n_bins": "number of adaptive depth bins", "patch_size": "transformer patch size in pixels",
    "embed_dim": "transformer embedding width", "tf_layers": "transformer encoder layers",
    "tf_heads": "attention heads", "tf_ff_dim": "transformer feed-forward width",
    "n_kernels": "range-attention query kernels", "width_mult": "backbone width multiplier",
    "decoder_channels": "output channels of the four decoder stages",
    "encoder_head": "keep MobileNetV2's final 1x1 expansion conv",
    "norm": "'batch' or 'group' normalization in encoder and decoder",
    "mlp_dim": "hidden width of the bin/range MLP head", "eps": "bin-width floor added to logits",
    "d_min": "depth at the left edge of the first bin (m)", "r_min": "minimum predicted range (m)",
    "init_range": "initial predicted range (m)", "sigma": "prior proximity std-dev (px)",
    "use_prior": "false removes the prior channels from the network entirely",
    "lambda_silog": "SILog variance weight", "beta": "SILog scale factor",
    "w_rmse": "RMSE weight", "w_silog": "SILog weight", "w_chamfer": "Chamfer weight",
    "chamfer_samples": "max ground-truth depths sampled for Chamfer",
    "chamfer_reduction": "'sum' over points or per-set 'mean'",
    "base_lr": "initial learning rate", "decay_rate": "per-unit exponential LR decay",
    "decay_unit": "'epoch' or 'step'", "batch_size": "samples per step", "epochs": "training epochs",
    "max_steps": "optional hard step limit", "weight_decay": "AdamW decoupled weight decay",
    "betas": "AdamW moment coefficients", "grad_clip_norm": "global gradient norm cap (null disables)",
    "n_priors": "prior points kept per training sample", "checkpoint_dir": "checkpoint directory",
    "eval_every": "epochs between evaluations", "eval_priors": "prior points used at evaluation",
    "deterministic": "force deterministic torch kernels", "dtype": "'float32' or 'float64'",
    "p_hflip": "horizontal flip probability", "brightness_range": "global brightness gain range",
    "channel_gain_range": "per-channel gain range", "depth_scale_range": "shared depth scale range",
    "p_prior_dropout": "probability of training a sample with no prior",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    preset: str = "default"
    data: str | None = None
    eval_data: str | None = None

    def to_flat(self) -> dict:
        flat = dict(preset=self.preset, data=self.data, eval_data=self.eval_data)
        for name, _ in _SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                flat[k] = list(v) if isinstance(v, tuple) else v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        unknown = set(flat) - all_keys()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        preset = flat.get("preset", "default")
        if preset not in ("default", "toy"):
            raise ConfigError(f"unknown preset {preset!r}")
        sections = {}
        for name, klass in _SECTIONS:
            base = _preset_values(klass, preset)
            names = {f.name for f in fields(klass)}
            base.update({k: v for k, v in flat.items() if k in names})
            try:
                sections[name] = klass(**base)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name} config: {exc}") from None
        return cls(preset=preset, data=flat.get("data"), eval_data=flat.get("eval_data"), **sections)


def _preset_values(klass, preset: str) -> dict:
    if preset == "toy" and hasattr(klass, "toy"):
        return asdict(klass.toy())
    return asdict(klass())


def all_keys() -> set[str]:
    keys = set(_RUN_KEYS)
    for _, klass in _SECTIONS:
        keys |= {f.name for f in fields(klass)}
    return keys


def default_flat(preset: str = "default") -> dict:
    return RunConfig.from_flat({"preset": preset}).to_flat()


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file < overrides (CLI flags); ``None`` overrides are ignored."""
    flat = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError(f"config {path} must be a flat JSON object")
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_flat(flat)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")
