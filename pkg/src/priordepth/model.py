"""Adaptive-bin depth network with range prediction and prior fusion.

MobileNetV2 encoder, U-Net decoder that re-injects the prior maps at every
upsampling stage, a small vision transformer predicting bin-width logits
plus the scene depth range, and a softmax regression over bin centres.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

CHECKPOINT_FORMAT_VERSION = 1

# MobileNetV2 ``features`` slices ending at strides 2, 4, 8, 16, 32
_STAGE_SLICES = ((0, 2), (2, 4), (4, 7), (7, 14), (14, 18))
_HEAD_INDEX = 18  # final 1x1 expansion conv of MobileNetV2


@dataclass
class NetworkConfig:
    input_width: int = 320
    input_height: int = 240
    n_bins: int = 256
    patch_size: int = 8
    embed_dim: int = 128
    tf_layers: int = 4
    tf_heads: int = 4
    tf_ff_dim: int = 512
    n_kernels: int = 128
    width_mult: float = 1.0
    decoder_channels: tuple = (512, 256, 128, 128)
    encoder_head: bool = True
    norm: str = "batch"
    mlp_dim: int = 256
    eps: float = 1e-3
    d_min: float = 0.0
    r_min: float = 0.01
    init_range: float = 10.0
    sigma: float = 10.0
    use_prior: bool = True

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.norm not in ("batch", "group"):
            raise ValueError("norm must be 'batch' or 'group'")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoder_channels needs one entry per upsampling stage (4)")
        fw, fh = self.feature_size
        if fw % self.patch_size or fh % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} does not divide transformer input {fw}x{fh}")
        if self.n_patches < self.n_kernels + 1:
            raise ValueError(f"{self.n_patches} patches cannot supply 1 head token + "
                             f"{self.n_kernels} query kernels")

    @property
    def feature_size(self) -> tuple[int, int]:
        """(width, height) of the decoder output, stride 2."""
        return math.ceil(self.input_width / 2), math.ceil(self.input_height / 2)

    @property
    def n_patches(self) -> int:
        fw, fh = self.feature_size
        return (fw // self.patch_size) * (fh // self.patch_size)

    @property
    def prior_channels(self) -> int:
        return 2 if self.use_prior else 0

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        """Desk-scale configuration for 64x48 inputs."""
        base = dict(input_width=64, input_height=48, n_bins=16, patch_size=4, embed_dim=32,
                    tf_layers=2, tf_heads=4, tf_ff_dim=64, n_kernels=16, width_mult=0.25,
                    decoder_channels=(64, 32, 24, 16), mlp_dim=64,
                    encoder_head=False, norm="group")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BinPrediction:
    logits: torch.Tensor   # (B, n) after the non-negativity clamp
    widths: torch.Tensor   # (B, n) metres
    centers: torch.Tensor  # (B, n) metres, increasing
    range: torch.Tensor    # (B,) metres


@dataclass
class DepthPrediction:
    depth: torch.Tensor      # (B, 1, H, W) at input resolution
    bin_probs: torch.Tensor  # (B, n, H/2, W/2)
    bins: BinPrediction
    extras: dict = field(default_factory=dict)


def compute_bin_widths(logits: torch.Tensor, range_raw: torch.Tensor, eps: float = 1e-3,
                       r_min: float = 0.01) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Metric bin widths from raw logits and raw range.

    Returns ``(clamped_logits, widths, range)`` with
    ``range = r_min + softplus(range_raw)`` and widths proportional to
    ``relu(logits) + eps``, summing to ``range``.
    """
    b = F.relu(logits)
    r = r_min + F.softplus(range_raw)
    shifted = b + eps
    widths = r.unsqueeze(-1) * shifted / shifted.sum(dim=-1, keepdim=True)
    return b, widths, r


def compute_bin_centers(widths: torch.Tensor, d_min: float = 0.0) -> torch.Tensor:
    """Midpoints of consecutive bins laid out from ``d_min``."""
    edges = torch.cumsum(widths, dim=-1)
    return d_min + edges - 0.5 * widths


def depth_from_probs(probs: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Per-pixel expectation of the bin centres: (B, n, h, w), (B, n) -> (B, 1, h, w)."""
    return torch.einsum("bnhw,bn->bhw", probs, centers).unsqueeze(1)


def _norm_layer(kind: str):
    if kind == "group":
        return lambda c: nn.GroupNorm(math.gcd(8, c), c)
    return nn.BatchNorm2d


def _conv_bn_relu(cin: int, cout: int, norm=nn.BatchNorm2d, k: int = 3) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
                         norm(cout), nn.ReLU(inplace=True))


class Encoder(nn.Module):
    """Inverted-residual (MobileNetV2) backbone returning five feature levels."""

    def __init__(self, width_mult: float = 1.0, head: bool = True, norm: str = "batch"):
        super().__init__()
        feats = torchvision.models.mobilenet_v2(weights=None, width_mult=width_mult,
                                                norm_layer=_norm_layer(norm)).features
        slices = list(_STAGE_SLICES)
        if head:
            slices[-1] = (slices[-1][0], _HEAD_INDEX + 1)
        self.slices = slices
        self.stages = nn.ModuleList(nn.Sequential(*feats[a:b]) for a, b in slices)
        self.channels = [feats[b - 1].out_channels for _, b in slices]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class UpBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cprior: int, cout: int, norm=nn.BatchNorm2d):
        super().__init__()
        self.body = nn.Sequential(_conv_bn_relu(cin + cskip + cprior, cout, norm),
                                  _conv_bn_relu(cout, cout, norm))

    def forward(self, x, skip, prior=None):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        parts = [x, skip] if prior is None else [x, skip, prior]
        return self.body(torch.cat(parts, dim=1))


class Decoder(nn.Module):
    def __init__(self, enc_channels: list[int], dec_channels: tuple, prior_channels: int,
                 norm=nn.BatchNorm2d):
        super().__init__()
        self.prior_channels = prior_channels
        cin = enc_channels[4]
        blocks = []
        for skip_c, out_c in zip(reversed(enc_channels[:4]), dec_channels):
            blocks.append(UpBlock(cin, skip_c, prior_channels, out_c, norm))
            cin = out_c
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = cin

    def forward(self, levels: list[torch.Tensor], prior: torch.Tensor | None) -> torch.Tensor:
        x = levels[4]
        for block, skip in zip(self.blocks, reversed(levels[:4])):
            p = None
            if self.prior_channels:
                p = downsample_prior_tensor(prior, prior.shape[-1] // skip.shape[-1])
                if p.shape[-2:] != skip.shape[-2:]:
                    raise ValueError(f"prior {tuple(p.shape[-2:])} vs skip {tuple(skip.shape[-2:])}")
            x = block(x, skip, p)
        return x


def downsample_prior_tensor(prior: torch.Tensor, factor: int) -> torch.Tensor:
    """Batched prior downsampling: top-left sample for depth, block max for proximity."""
    if factor == 1:
        return prior
    s1 = prior[:, :1, ::factor, ::factor]
    s2 = F.max_pool2d(prior[:, 1:2], factor)
    return torch.cat([s1, s2], dim=1)


class MiniViT(nn.Module):
    """Patch transformer producing bin logits, raw range and range-attention maps."""

    def __init__(self, cfg: NetworkConfig, in_channels: int):
        super().__init__()
        e = cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(in_channels, e, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, cfg.n_patches, e))
        layer = nn.TransformerEncoderLayer(e, cfg.tf_heads, cfg.tf_ff_dim, dropout=0.0,
                                           batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, cfg.tf_layers, enable_nested_tensor=False)
        self.query_proj = nn.Conv2d(in_channels, e, 3, padding=1)
        self.head = nn.Sequential(nn.Linear(e, cfg.mlp_dim), nn.LeakyReLU(),
                                  nn.Linear(cfg.mlp_dim, cfg.mlp_dim), nn.LeakyReLU(),
                                  nn.Linear(cfg.mlp_dim, cfg.n_bins + 1))
        with torch.no_grad():
            # start the range head near init_range
            target = max(cfg.init_range - cfg.r_min, 1e-3)
            self.head[-1].bias[-1] = target + math.log(-math.expm1(-target))

    def forward(self, x: torch.Tensor):
        p = self.cfg.patch_size
        if x.shape[-1] % p or x.shape[-2] % p:
            raise ValueError(f"patch size {p} does not divide features {tuple(x.shape[-2:])}")
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        if tokens.shape[1] != self.pos_embed.shape[1]:
            raise ValueError(f"expected {self.pos_embed.shape[1]} patches, got {tokens.shape[1]}")
        out = self.transformer(tokens + self.pos_embed)
        head = self.head(out[:, 0])
        kernels = out[:, 1:1 + self.cfg.n_kernels]
        queries = self.query_proj(x)
        attention = torch.einsum("bchw,bkc->bkhw", queries, kernels)
        return head[:, :-1], head[:, -1], attention


class PriorDepthNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        self.encoder = Encoder(cfg.width_mult, cfg.encoder_head, cfg.norm)
        self.decoder = Decoder(self.encoder.channels, cfg.decoder_channels, cfg.prior_channels,
                               _norm_layer(cfg.norm))
        vit_in = self.decoder.out_channels + cfg.prior_channels
        self.vit = MiniViT(cfg, vit_in)
        self.classifier = nn.Conv2d(cfg.n_kernels, cfg.n_bins, 1)
        # s2 peaks at 1/(sigma*sqrt(2*pi)); rescale to [0, 1] before the network sees it
        self.register_buffer("prior_scale", torch.tensor([1.0, cfg.sigma * math.sqrt(2 * math.pi)]),
                             persistent=False)

    def _check_input(self, image, prior):
        cfg = self.cfg
        if image.dim() != 4 or image.shape[1] != 3 or \
                tuple(image.shape[-2:]) != (cfg.input_height, cfg.input_width):
            raise ValueError(f"expected image (B, 3, {cfg.input_height}, {cfg.input_width}), "
                             f"got {tuple(image.shape)}")
        if cfg.use_prior:
            if prior is None or tuple(prior.shape[1:]) != (2, cfg.input_height, cfg.input_width):
                raise ValueError(f"expected prior (B, 2, {cfg.input_height}, {cfg.input_width}), "
                                 f"got {None if prior is None else tuple(prior.shape)}")

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(image)

    def decode(self, levels: list[torch.Tensor], prior: torch.Tensor | None) -> torch.Tensor:
        return self.decoder(levels, prior)

    def mvit_forward(self, features: torch.Tensor, prior: torch.Tensor | None):
        if self.cfg.use_prior:
            factor = prior.shape[-1] // features.shape[-1]
            features = torch.cat([features, downsample_prior_tensor(prior, factor)], dim=1)
        return self.vit(features)

    def regress_depth(self, attention: torch.Tensor, centers: torch.Tensor):
        probs = torch.softmax(self.classifier(attention), dim=1)
        depth = depth_from_probs(probs, centers)
        depth = F.interpolate(depth, size=(self.cfg.input_height, self.cfg.input_width),
                              mode="bilinear", align_corners=False)
        return depth, probs

    def forward(self, image: torch.Tensor, prior: torch.Tensor | None = None) -> DepthPrediction:
        """Predict metric depth.

        Args:
            image: (B, 3, H, W) RGB in [0, 1].
            prior: (B, 2, H, W) stacked ``s1``/``s2`` maps; ignored when the
                config disables prior channels.
        """
        cfg = self.cfg
        self._check_input(image, prior)
        if cfg.use_prior:
            prior = prior * self.prior_scale.to(prior.dtype).view(1, 2, 1, 1)
        else:
            prior = None
        levels = self.encode(image)
        feats = self.decode(levels, prior)
        logits, range_raw, attention = self.mvit_forward(feats, prior)
        b, widths, r = compute_bin_widths(logits, range_raw, cfg.eps, cfg.r_min)
        centers = compute_bin_centers(widths, cfg.d_min)
        depth, probs = self.regress_depth(attention, centers)
        return DepthPrediction(depth, probs, BinPrediction(b, widths, centers, r))


def model_summary(model: PriorDepthNet) -> dict[str, int]:
    """Trainable parameter counts per component and in total."""
    parts = {name: sum(p.numel() for p in getattr(model, name).parameters())
             for name in ("encoder", "decoder", "vit", "classifier")}
    parts["total"] = sum(parts.values())
    return parts


def save_checkpoint(path: str | Path, model: PriorDepthNet, **extra) -> None:
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION,
               "network_config": model.cfg.to_dict(),
               "state_dict": model.state_dict()}
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[PriorDepthNet, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    cfg = NetworkConfig.from_dict(payload["network_config"])
    model = PriorDepthNet(cfg)
    dtype = next(iter(payload["state_dict"].values())).dtype
    if dtype.is_floating_point:
        # cast first so loading does not round through float32
        model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    return model, payload


def load_backbone_weights(model: PriorDepthNet, path: str | Path) -> None:
    """Load externally trained MobileNetV2 ``features.*`` weights into the encoder."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")} or state
    remapped = {}
    for i, (a, b) in enumerate(model.encoder.slices):
        for j in range(a, b):
            prefix = f"{j}."
            for k, v in state.items():
                if k.startswith(prefix):
                    remapped[f"stages.{i}.{j - a}.{k[len(prefix):]}"] = v
    model.encoder.load_state_dict(remapped, strict=False)
