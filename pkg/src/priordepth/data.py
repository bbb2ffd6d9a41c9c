"""Samples, on-disk datasets, the synthetic scene generator and augmentations.

Dataset layout::

    root/rgb/<stem>.png|.jpg
    root/depth/<stem>.tif      float32 metres (0 or NaN marks holes)
    root/depth/<stem>.png      uint16 millimetres, with ``depth_png_mm=True``
    root/priors/<stem>.csv     x,y,depth records
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import tifffile
from scipy.ndimage import gaussian_filter

from .priors import SparsePrior, read_prior_csv, write_prior_csv

logger = logging.getLogger(__name__)

RGB_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class DepthSample:
    image: np.ndarray      # (3, H, W) float32 in [0, 1]
    gt_depth: np.ndarray   # (H, W) float64 metres
    validity: np.ndarray   # (H, W) bool
    prior: SparsePrior
    id: str = ""

    @property
    def height(self) -> int:
        return self.gt_depth.shape[0]

    @property
    def width(self) -> int:
        return self.gt_depth.shape[1]

    def validate(self) -> None:
        h, w = self.gt_depth.shape
        if self.image.shape != (3, h, w) or self.validity.shape != (h, w):
            raise ValueError(f"sample {self.id!r}: inconsistent shapes {self.image.shape}, "
                             f"{self.gt_depth.shape}, {self.validity.shape}")
        self.prior.validate(w, h)


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    brightness_range: tuple = (0.7, 1.3)
    channel_gain_range: tuple = (0.9, 1.1)
    depth_scale_range: tuple = (0.8, 1.2)
    p_prior_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("brightness_range", "channel_gain_range", "depth_scale_range"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi:
                raise ValueError(f"{name} must contain 1.0")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("p_hflip", "p_prior_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), 0.0)


def hflip_sample(sample: DepthSample) -> DepthSample:
    pts = sample.prior.points.copy()
    pts[:, 0] = sample.width - 1 - pts[:, 0]
    return replace(sample,
                   image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                   gt_depth=np.ascontiguousarray(sample.gt_depth[:, ::-1]),
                   validity=np.ascontiguousarray(sample.validity[:, ::-1]),
                   prior=SparsePrior(pts, sample.prior.source_image_id))


def scale_depth(sample: DepthSample, s: float) -> DepthSample:
    """Multiply ground truth and prior depths by one shared factor."""
    pts = sample.prior.points.copy()
    pts[:, 2] = pts[:, 2] * s
    return replace(sample, gt_depth=sample.gt_depth * s, prior=SparsePrior(pts, sample.prior.source_image_id))


def augment(sample: DepthSample, config: AugmentConfig, rng: np.random.Generator) -> DepthSample:
    """Random flip, brightness/colour gain, shared depth scale and prior dropout.

    The same number of random draws is consumed whatever the outcome, so a
    given generator state always maps to the same transform.
    """
    u_flip, u_drop = rng.random(2)
    brightness = rng.uniform(*config.brightness_range)
    gains = rng.uniform(*config.channel_gain_range, size=3)
    scale = rng.uniform(*config.depth_scale_range)

    out = hflip_sample(sample) if u_flip < config.p_hflip else sample
    out = scale_depth(out, scale)
    image = np.clip(out.image * (brightness * gains)[:, None, None], 0.0, 1.0).astype(np.float32)
    prior = out.prior
    if u_drop < config.p_prior_dropout:
        prior = SparsePrior(source_image_id=prior.source_image_id)
    return DepthSample(image, out.gt_depth, out.validity.copy(), prior, out.id)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return np.clip(n / (2.5 * n.std() + 1e-12), -1.0, 1.0)


def _scene(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(2.0, 8.0)
    tilt = rng.uniform(-1.0, 1.0)
    depth = base + tilt * (0.5 - ys / max(h - 1, 1))
    for _ in range(rng.integers(3, 9)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        s = rng.uniform(0.08, 0.3) * min(w, h) + 1.0
        amp = rng.uniform(-2.0, 2.0)
        depth += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
    return np.maximum(depth, 0.3)


def _render(rng: np.random.Generator, depth: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    inv = 1.0 / depth
    norm = (inv - inv.min()) / (inv.max() - inv.min() + 1e-12)
    texture = 0.6 * _smooth_noise(rng, h, w, 1.0) + 0.4 * _smooth_noise(rng, h, w, 4.0)
    shade = (0.2 + 0.7 * norm) * (1.0 + 0.5 * texture)
    # water column: red attenuates fastest, green least
    tint = np.array([0.45, 1.0, 0.8])[:, None, None] * (0.6 + 0.4 * norm)[None]
    return np.clip(shade[None] * tint, 0.0, 1.0).astype(np.float32)


def _finish(rng: np.random.Generator, image, depth, n_prior: int, hole_fraction: float,
            sample_id: str) -> DepthSample:
    h, w = depth.shape
    depth = depth.astype(np.float32).astype(np.float64)  # exact float32 disk round trip
    n_holes = int(round(hole_fraction * h * w))
    validity = np.ones(h * w, dtype=bool)
    validity[rng.choice(h * w, size=n_holes, replace=False)] = False
    validity = validity.reshape(h, w)
    depth = np.where(validity, depth, 0.0)
    valid_idx = np.flatnonzero(validity)
    pick = rng.choice(valid_idx, size=min(n_prior, len(valid_idx)), replace=False)
    ys, xs = np.divmod(pick, w)
    pts = np.column_stack([xs, ys, depth[ys, xs]]).astype(np.float64)
    return DepthSample(image, depth, validity, SparsePrior(pts, sample_id), sample_id)


def generate_synthetic(seed: int, count: int, width: int = 64, height: int = 48, n_prior: int = 200,
                       scale_range: tuple = (1.0, 1.0), hole_fraction: float = 0.05,
                       sequence_shift: int = 0) -> list[DepthSample]:
    """Desk-scale scenes: a tilted plane with smooth radial bumps, rendered to a tinted image.

    Each sample is a deterministic function of ``(seed, index)``. With
    ``sequence_shift > 0`` the samples are consecutive crops of one wide
    scene, each moved ``sequence_shift`` pixels to the right of the previous,
    which gives frame pairs related by a pure image translation.
    ``scale_range`` multiplies each scene's depth by a random factor the image
    does not reveal (rendering uses normalized inverse depth).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    if sequence_shift > 0:
        rng = np.random.default_rng([seed, 0x5E9])
        wide = width + sequence_shift * (count - 1)
        depth = _scene(rng, wide, height) * rng.uniform(*scale_range)
        image = _render(rng, depth)
        for i in range(count):
            x0 = i * sequence_shift
            sid = f"synth_{seed}_{i:05d}"
            samples.append(_finish(np.random.default_rng([seed, i]), image[:, :, x0:x0 + width].copy(),
                                   depth[:, x0:x0 + width], n_prior, hole_fraction, sid))
        return samples
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        depth = _scene(rng, width, height) * rng.uniform(*scale_range)
        image = _render(rng, depth)
        samples.append(_finish(rng, image, depth, n_prior, hole_fraction, f"synth_{seed}_{i:05d}"))
    return samples


def read_depth(path: str | Path) -> np.ndarray:
    """Depth raster in metres: float TIFF as-is, 16-bit PNG interpreted as millimetres."""
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        depth = tifffile.imread(path).astype(np.float64)
    else:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise OSError(f"cannot read depth {path}")
        depth = raw.astype(np.float64) / 1000.0
    if depth.ndim == 3:
        depth = depth[..., 0]
    return depth


def write_depth(depth: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        tifffile.imwrite(path, np.asarray(depth, dtype=np.float32))
    else:
        cv2.imwrite(str(path), np.clip(np.rint(depth * 1000.0), 0, 65535).astype(np.uint16))


def read_rgb(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise OSError(f"cannot read image {path}")
    return np.moveaxis(bgr[..., ::-1], -1, 0).astype(np.float32) / 255.0


def write_rgb(image: np.ndarray, path: str | Path) -> None:
    hwc = np.moveaxis(np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8), 0, -1)
    cv2.imwrite(str(path), np.ascontiguousarray(hwc[..., ::-1]))


def write_dataset(samples: Sequence[DepthSample], root: str | Path) -> None:
    root = Path(root)
    for sub in ("rgb", "depth", "priors"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_rgb(s.image, root / "rgb" / f"{s.id}.png")
        write_depth(np.where(s.validity, s.gt_depth, 0.0), root / "depth" / f"{s.id}.tif")
        write_prior_csv(s.prior, root / "priors" / f"{s.id}.csv")


@dataclass
class SampleDescriptor:
    """Lazily loadable dataset entry; ``load()`` returns a DepthSample at the working size."""

    id: str
    rgb_path: Path
    depth_path: Path
    prior: SparsePrior
    size: tuple | None = None  # (width, height) to resize to
    prior_scale: tuple = field(default=(1.0, 1.0))

    def load(self) -> DepthSample:
        image = read_rgb(self.rgb_path)
        depth = read_depth(self.depth_path)
        if depth.shape != image.shape[1:]:
            raise ValueError(f"{self.id}: rgb {image.shape[1:]} and depth {depth.shape} differ")
        if self.size is not None and (depth.shape[1], depth.shape[0]) != tuple(self.size):
            w, h = self.size
            image = np.moveaxis(cv2.resize(np.moveaxis(image, 0, -1), (w, h),
                                           interpolation=cv2.INTER_AREA), -1, 0)
            depth = cv2.resize(depth, (w, h), interpolation=cv2.INTER_NEAREST)
        validity = np.isfinite(depth) & (depth > 0)
        depth = np.where(validity, depth, 0.0)
        sample = DepthSample(image.astype(np.float32), depth, validity, self.prior, self.id)
        sample.validate()
        return sample


def _rescale_prior(prior: SparsePrior, sx: float, sy: float, w: int, h: int) -> SparsePrior:
    if sx == 1.0 and sy == 1.0:
        return prior
    pts = prior.points.copy()
    pts[:, 0] = np.clip((pts[:, 0] + 0.5) * sx - 0.5, 0, w - 1)
    pts[:, 1] = np.clip((pts[:, 1] + 0.5) * sy - 0.5, 0, h - 1)
    return SparsePrior(pts, prior.source_image_id)


def load_dataset(root: str | Path, size: tuple | None = None, depth_png_mm: bool = False) -> list[SampleDescriptor]:
    """Index ``root/{rgb,depth,priors}`` by matching stems.

    Args:
        root: dataset directory.
        size: optional working ``(width, height)``; images and depth are
            resized on load and prior coordinates rescaled here.
        depth_png_mm: read ``depth/<stem>.png`` millimetre rasters instead of TIFF.

    Stems without depth are skipped with a warning; stems without a prior
    file get an empty prior. Malformed prior files raise PriorFormatError.
    """
    root = Path(root)
    rgb_files = sorted(p for p in (root / "rgb").glob("*") if p.suffix.lower() in RGB_EXTENSIONS)
    out = []
    for rgb in rgb_files:
        stem = rgb.stem
        depth_path = root / "depth" / (f"{stem}.png" if depth_png_mm else f"{stem}.tif")
        if not depth_path.exists():
            logger.warning("skipping %s: no depth file %s", stem, depth_path)
            continue
        prior_path = root / "priors" / f"{stem}.csv"
        prior = read_prior_csv(prior_path, stem) if prior_path.exists() else SparsePrior(source_image_id=stem)
        scale = (1.0, 1.0)
        if size is not None:
            h0, w0 = _image_shape(rgb)
            scale = (size[0] / w0, size[1] / h0)
            prior = _rescale_prior(prior, *scale, *size)
        out.append(SampleDescriptor(stem, rgb, depth_path, prior, size, scale))
    if not out:
        raise FileNotFoundError(f"no usable samples under {root}")
    return out


def _image_shape(path: Path) -> tuple[int, int]:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return img.shape[:2]


def load_samples(root: str | Path, size: tuple | None = None, depth_png_mm: bool = False) -> list[DepthSample]:
    return [d.load() for d in load_dataset(root, size, depth_png_mm)]


def prior_coverage(n_points: int, width: int, height: int) -> float:
    """Fraction of pixels carrying a prior point."""
    return n_points / float(width * height)
