"""Dense two-channel parameterization of a sparse depth prior.

Channel ``s1`` holds the depth of the nearest keypoint, ``s2`` a Gaussian of
the distance to it. Nearest keypoints are found with an exact separable
Euclidean distance transform that also propagates the keypoint index; ties
go to the lowest keypoint index so results match a brute-force scan bit for
bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .priors import SparsePrior

DEFAULT_SIGMA = 10.0
VALID_FACTORS = (1, 2, 4, 8, 16)


@dataclass
class NearestIndexMap:
    idx: np.ndarray      # (H, W) int64, index into the keypoint list
    sq_dist: np.ndarray  # (H, W) int64, squared pixel distance to that keypoint


@dataclass
class PriorMaps:
    s1: np.ndarray
    s2: np.ndarray
    sigma: float
    width: int
    height: int

    def stack(self) -> np.ndarray:
        """Channels-first (2, H, W) float32 array."""
        return np.stack([self.s1, self.s2]).astype(np.float32)


def snap_to_pixels(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Round (x, y) keypoints to the nearest integer pixel (half rounds up)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xs = np.floor(pts[:, 0] + 0.5).astype(np.int64)
    ys = np.floor(pts[:, 1] + 0.5).astype(np.int64)
    if np.any((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)):
        raise ValueError(f"keypoints outside {width}x{height} image")
    return np.column_stack([xs, ys])


def _column_pass(site: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per column, vertical distance to (and index of) the nearest site in that column."""
    h, w = site.shape
    big = np.iinfo(np.int64).max // 4
    none = np.int64(-1)

    up_row = np.full(w, -big, dtype=np.int64)
    up_idx = np.full(w, none)
    above_g = np.empty((h, w), dtype=np.int64)
    above_i = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        has = site[y] >= 0
        up_row[has] = y
        up_idx[has] = site[y, has]
        above_g[y] = y - up_row
        above_i[y] = up_idx

    dn_row = np.full(w, big, dtype=np.int64)
    dn_idx = np.full(w, none)
    g = np.empty((h, w), dtype=np.int64)
    gi = np.empty((h, w), dtype=np.int64)
    for y in range(h - 1, -1, -1):
        has = site[y] >= 0
        dn_row[has] = y
        dn_idx[has] = site[y, has]
        below = dn_row - y
        a, ai = above_g[y], above_i[y]
        take_below = (below < a) | ((below == a) & (dn_idx >= 0) & ((ai < 0) | (dn_idx < ai)))
        g[y] = np.where(take_below, below, a)
        gi[y] = np.where(take_below, dn_idx, ai)
    g[gi < 0] = -1
    return g, gi


def _row_envelope(g: np.ndarray, gi: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower envelope of the parabolas (x - c)^2 + g[c]^2, ordered by (distance, index)."""
    cols = [int(c) for c in np.flatnonzero(gi >= 0)]
    gg = [int(v) * int(v) for v in g]
    idx = [int(v) for v in gi]
    env: list[int] = []
    start: list[int] = []
    for q in cols:
        fq = q * q + gg[q]
        b = None
        while env:
            p = env[-1]
            num = fq - (p * p + gg[p])
            den = 2 * (q - p)
            fl = num // den
            # first integer x at which q wins (strictly closer, or tied with a lower index)
            b = fl if (num % den == 0 and idx[q] < idx[p]) else fl + 1
            if b <= start[-1]:
                env.pop()
                start.pop()
                b = None
                continue
            break
        if not env:
            env.append(q)
            start.append(-(1 << 62))
        else:
            env.append(q)
            start.append(b)

    out_d = np.empty(w, dtype=np.int64)
    out_i = np.empty(w, dtype=np.int64)
    k = 0
    for x in range(w):
        while k + 1 < len(env) and start[k + 1] <= x:
            k += 1
        c = env[k]
        out_d[x] = (x - c) * (x - c) + gg[c]
        out_i[x] = idx[c]
    return out_d, out_i


def nearest_index_map(points: np.ndarray, width: int, height: int) -> NearestIndexMap:
    """Exact Euclidean nearest keypoint for every pixel.

    Keypoints are snapped to integer pixels first. Runs a column sweep then a
    per-row lower-envelope pass, O(HW + K) overall.

    Raises:
        ValueError: empty point list ("empty prior") or points out of bounds.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty prior")
    px = snap_to_pixels(pts, width, height)
    site = np.full((height, width), np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(site, (px[:, 1], px[:, 0]), np.arange(len(px), dtype=np.int64))
    site[site == np.iinfo(np.int64).max] = -1

    g, gi = _column_pass(site)
    idx = np.empty((height, width), dtype=np.int64)
    d2 = np.empty((height, width), dtype=np.int64)
    for y in range(height):
        d2[y], idx[y] = _row_envelope(g[y], gi[y], width)
    return NearestIndexMap(idx, d2)


def gaussian_proximity(sq_dist: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-sq_dist / (2.0 * sigma * sigma)) / (sigma * math.sqrt(2.0 * math.pi))


def densify(prior: SparsePrior, width: int, height: int, sigma: float = DEFAULT_SIGMA) -> PriorMaps:
    """Nearest-keypoint depth map ``s1`` and Gaussian proximity map ``s2``.

    ``sigma`` is in pixels of the working resolution.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if len(prior) == 0:
        raise ValueError("empty prior")
    nim = nearest_index_map(prior.xy, width, height)
    s1 = prior.depths[nim.idx]
    s2 = gaussian_proximity(nim.sq_dist.astype(np.float64), sigma)
    return PriorMaps(s1, s2, float(sigma), width, height)


def zero_prior_maps(width: int, height: int, sigma: float = DEFAULT_SIGMA) -> PriorMaps:
    """All-zero channels: no prior evidence anywhere."""
    z = np.zeros((height, width))
    return PriorMaps(z, z.copy(), float(sigma), width, height)


def prior_maps(prior: SparsePrior | None, width: int, height: int,
               sigma: float = DEFAULT_SIGMA) -> PriorMaps:
    """``densify`` for a nonempty prior, ``zero_prior_maps`` otherwise."""
    if prior is None or len(prior) == 0:
        return zero_prior_maps(width, height, sigma)
    return densify(prior, width, height, sigma)


def downsample_prior(maps: PriorMaps, factor: int) -> PriorMaps:
    """Reduce resolution: top-left sample per block for ``s1``, block maximum for ``s2``."""
    if factor not in VALID_FACTORS:
        raise ValueError(f"factor must be one of {VALID_FACTORS}, got {factor}")
    h, w = maps.s1.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {w}x{h}")
    if factor == 1:
        return maps
    s1 = maps.s1[::factor, ::factor].copy()
    s2 = maps.s2.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
    return PriorMaps(s1, s2, maps.sigma, w // factor, h // factor)


def save_debug_images(maps: PriorMaps, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>_s1.png`` (millimetres) and ``<stem>_s2.png`` (scaled to peak) as 16-bit PNG."""
    stem = Path(stem)
    p1 = stem.with_name(stem.name + "_s1.png")
    p2 = stem.with_name(stem.name + "_s2.png")
    s1 = np.clip(np.rint(maps.s1 * 1000.0), 0, 65535).astype(np.uint16)
    peak = maps.s2.max()
    s2 = maps.s2 / peak if peak > 0 else maps.s2
    s2 = np.clip(np.rint(s2 * 65535.0), 0, 65535).astype(np.uint16)
    cv2.imwrite(str(p1), s1)
    cv2.imwrite(str(p2), s2)
    return p1, p2
