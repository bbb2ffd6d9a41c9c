"""Sparse depth priors from consecutive frame pairs.

Keypoints are detected on a regular grid, matched between two frames with a
mutual nearest-neighbour test, filtered against a RANSAC fundamental matrix
and finally given a metric depth by reading the ground-truth map.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

logger = logging.getLogger(__name__)

PRIOR_HEADER = ("x", "y", "depth")


class InsufficientCorrespondencesError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class PriorFormatError(ValueError):
    pass


@dataclass
class Keypoint:
    x: float
    y: float
    response: float
    descriptor: np.ndarray


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass
class FundamentalMatrix:
    """Rank-2 fundamental matrix with unit Frobenius norm.

    ``inliers`` is the RANSAC consensus mask over the correspondences the
    matrix was estimated from (None when constructed directly).
    """

    m: np.ndarray
    inliers: np.ndarray | None = None


@dataclass
class SparsePrior:
    """Pixel keypoints carrying a metric depth.

    ``points`` is a (K, 3) float array of ``(x, y, depth)`` rows, x being the
    pixel column and y the row.
    """

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    source_image_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 3))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"prior points must be (K, 3), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def depths(self) -> np.ndarray:
        return self.points[:, 2]

    def validate(self, width: int, height: int) -> None:
        """Raise ValueError unless every point is in bounds with a positive finite depth."""
        x, y, d = self.points.T
        if not np.all(np.isfinite(d) & (d > 0)):
            raise ValueError(f"prior {self.source_image_id!r} has non-positive or non-finite depths")
        if not np.all((x >= 0) & (x < width) & (y >= 0) & (y < height)):
            raise ValueError(f"prior {self.source_image_id!r} has points outside {width}x{height}")


DETECTOR_SIGMA = 0.8

Detector = Callable[[np.ndarray, int, int, int], list]


def _to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        # accept both HxWx3 and 3xHxW
        if image.shape[0] == 3 and image.shape[-1] != 3:
            image = np.moveaxis(image, 0, -1)
        image = image.mean(axis=-1)
    if image.dtype == np.uint8:
        return image
    if image.dtype.kind == "f":
        return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return np.clip(image, 0, 255).astype(np.uint8)


def detect_keypoints(image: np.ndarray, grid_rows: int = 8, grid_cols: int = 8,
                     per_cell: int = 8, sigma: float = DETECTOR_SIGMA) -> list[Keypoint]:
    """Detect SIFT keypoints and keep the strongest ``per_cell`` in each grid cell.

    Args:
        image: grayscale (H, W) image, float in [0, 1] or uint8. Colour input
            is averaged to gray.
        grid_rows, grid_cols: number of equal-size patches along each axis.
        per_cell: maximum keypoints retained per patch.
        sigma: blur of the base scale-space level. Smaller than the usual 1.6
            so that blobs of a few pixels at 64x48 are still extrema.

    Returns:
        Keypoints ordered by cell (row-major), then by decreasing response.
        A constant image yields an empty list.
    """
    if grid_rows < 1 or grid_cols < 1 or per_cell < 1:
        raise ValueError("grid dimensions and per_cell must be >= 1")
    gray = _to_uint8(image)
    h, w = gray.shape
    sift = cv2.SIFT_create(sigma=sigma)
    cv_kps, desc = sift.detectAndCompute(gray, None)
    if not cv_kps:
        return []

    xs = np.array([k.pt[0] for k in cv_kps])
    ys = np.array([k.pt[1] for k in cv_kps])
    resp = np.array([k.response for k in cv_kps])
    inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    cell_r = np.minimum((ys * grid_rows // h).astype(int), grid_rows - 1)
    cell_c = np.minimum((xs * grid_cols // w).astype(int), grid_cols - 1)
    cell = cell_r * grid_cols + cell_c

    # deterministic order: cell, -response, y, x
    order = np.lexsort((xs, ys, -resp, cell))
    out: list[Keypoint] = []
    taken = np.zeros(grid_rows * grid_cols, dtype=int)
    seen = set()
    for i in order:
        # SIFT repeats a location once per dominant orientation; keep the strongest
        loc = (xs[i], ys[i])
        if not inside[i] or taken[cell[i]] >= per_cell or loc in seen:
            continue
        seen.add(loc)
        taken[cell[i]] += 1
        out.append(Keypoint(float(xs[i]), float(ys[i]), float(resp[i]),
                            desc[i].astype(np.float64)))
    return out


def match_bidirectional(desc_a: Sequence[np.ndarray], desc_b: Sequence[np.ndarray]) -> list[Match]:
    """Mutual nearest-neighbour matching under squared Euclidean distance.

    Ties go to the lower index. The pair (i, j) is kept only when j is the
    nearest neighbour of a_i in b and i is the nearest neighbour of b_j in a.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    a = np.atleast_2d(np.asarray(desc_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(desc_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor lengths differ: {a.shape[1]} vs {b.shape[1]}")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    ab = np.argmin(d2, axis=1)
    ba = np.argmin(d2, axis=0)
    return [Match(i, int(j), float(d2[i, j])) for i, j in enumerate(ab) if ba[j] == i]


def _homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    # Hartley: centroid at origin, mean distance sqrt(2)
    mean = pts.mean(axis=0)
    dist = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])


def _normalize_f(f: np.ndarray) -> np.ndarray:
    f = f / np.linalg.norm(f)
    k = np.argmax(np.abs(f))
    return f * np.sign(f.flat[k])


def eight_point(pts1: np.ndarray, pts2: np.ndarray) -> np.ndarray:
    """Normalized eight-point estimate of F with ``x2^T F x1 = 0``, rank 2, unit norm."""
    t1 = _normalizing_transform(pts1)
    t2 = _normalizing_transform(pts2)
    p1 = _homogeneous(pts1) @ t1.T
    p2 = _homogeneous(pts2) @ t2.T
    a = np.einsum("ni,nj->nij", p2, p1).reshape(len(p1), 9)
    _, _, vt = np.linalg.svd(a)
    f = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(f)
    s[2] = 0.0
    f = u @ np.diag(s) @ vt
    return _normalize_f(t2.T @ f @ t1)


def epipolar_distance(pts1: np.ndarray, pts2: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Symmetric point-to-epipolar-line distance in pixels, averaged over both images."""
    f = f.m if isinstance(f, FundamentalMatrix) else np.asarray(f, dtype=np.float64)
    p1 = _homogeneous(np.asarray(pts1, dtype=np.float64))
    p2 = _homogeneous(np.asarray(pts2, dtype=np.float64))
    l2 = p1 @ f.T   # lines in image 2
    l1 = p2 @ f     # lines in image 1
    alg = np.abs(np.sum(p2 * l2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = alg / np.hypot(l2[:, 0], l2[:, 1])
        d1 = alg / np.hypot(l1[:, 0], l1[:, 1])
    return 0.5 * (d1 + d2)


def estimate_fundamental(pts1: np.ndarray, pts2: np.ndarray, ransac_iters: int = 2000,
                         inlier_tol_px: float = 2.0, seed: int = 0) -> FundamentalMatrix:
    """RANSAC over minimal eight-point samples, refit on the largest consensus set.

    Raises:
        InsufficientCorrespondencesError: fewer than 8 correspondences.
        DegenerateGeometryError: the best consensus set has fewer than 8 members.
    """
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    n = len(pts1)
    if n < 8 or len(pts2) != n:
        raise InsufficientCorrespondencesError(f"insufficient correspondences: {n} < 8")

    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    for _ in range(ransac_iters):
        idx = rng.choice(n, size=8, replace=False)
        try:
            f = eight_point(pts1[idx], pts2[idx])
        except np.linalg.LinAlgError:
            continue
        inl = epipolar_distance(pts1, pts2, f) <= inlier_tol_px
        if inl.sum() > best.sum():
            best = inl
            if best.all():
                break
    if best.sum() < 8:
        raise DegenerateGeometryError(f"degenerate geometry: consensus of {best.sum()} < 8")
    f = eight_point(pts1[best], pts2[best])
    return FundamentalMatrix(f, best)


def epipolar_filter(pts1: np.ndarray, pts2: np.ndarray, f: FundamentalMatrix | np.ndarray,
                    tol_px: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Keep the pairs whose symmetric epipolar distance is at most ``tol_px``."""
    if not tol_px > 0:
        raise ValueError("tol_px must be positive")
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    if np.isinf(tol_px):
        return pts1, pts2
    keep = epipolar_distance(pts1, pts2, f) <= tol_px
    return pts1[keep], pts2[keep]


def _nearest_pixel(coords: np.ndarray, size: int) -> np.ndarray:
    return np.clip(np.floor(coords + 0.5).astype(int), 0, size - 1)


def sample_prior_depths(keypoints: np.ndarray, depth: np.ndarray, validity: np.ndarray | None = None,
                        source_image_id: str = "") -> SparsePrior:
    """Attach ground-truth depth to keypoints, read at the nearest integer pixel.

    Keypoints landing on non-finite, non-positive or masked-out depth are dropped.
    The returned points keep their original sub-pixel coordinates.
    """
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    h, w = depth.shape
    if len(kps) == 0:
        return SparsePrior(np.zeros((0, 3)), source_image_id)
    c = _nearest_pixel(kps[:, 0], w)
    r = _nearest_pixel(kps[:, 1], h)
    d = depth[r, c].astype(np.float64)
    ok = np.isfinite(d) & (d > 0)
    if validity is not None:
        ok &= validity[r, c].astype(bool)
    return SparsePrior(np.column_stack([kps[ok], d[ok]]), source_image_id)


def subsample_prior(prior: SparsePrior, n: int, seed: int = 0) -> SparsePrior:
    """Uniform subset of ``min(n, len(prior))`` points without replacement, original order kept."""
    if n < 0:
        raise ValueError("n must be >= 0")
    k = min(n, len(prior))
    if k == len(prior):
        return SparsePrior(prior.points.copy(), prior.source_image_id)
    idx = np.sort(np.random.default_rng(seed).choice(len(prior), size=k, replace=False))
    return SparsePrior(prior.points[idx], prior.source_image_id)


@dataclass
class ExtractionConfig:
    grid_rows: int = 8
    grid_cols: int = 8
    per_cell: int = 8
    ransac_iters: int = 2000
    inlier_tol_px: float = 2.0
    seed: int = 0


def extract_prior(image_a: np.ndarray, image_b: np.ndarray, depth_a: np.ndarray,
                  validity_a: np.ndarray | None = None, config: ExtractionConfig | None = None,
                  source_image_id: str = "", detector: Detector = detect_keypoints) -> SparsePrior:
    """Full pair pipeline: detect, match, epipolar-filter, read depth for frame ``a``.

    Pairs with fewer than 8 matches (or degenerate geometry) give an empty
    prior and a logged warning.
    """
    cfg = config or ExtractionConfig()
    kp_a = detector(image_a, cfg.grid_rows, cfg.grid_cols, cfg.per_cell)
    kp_b = detector(image_b, cfg.grid_rows, cfg.grid_cols, cfg.per_cell)
    matches = match_bidirectional([k.descriptor for k in kp_a], [k.descriptor for k in kp_b])
    if len(matches) < 8:
        logger.warning("%s: only %d matches, writing empty prior", source_image_id, len(matches))
        return SparsePrior(np.zeros((0, 3)), source_image_id)
    pa = np.array([[kp_a[m.index_a].x, kp_a[m.index_a].y] for m in matches])
    pb = np.array([[kp_b[m.index_b].x, kp_b[m.index_b].y] for m in matches])
    try:
        f = estimate_fundamental(pa, pb, cfg.ransac_iters, cfg.inlier_tol_px, cfg.seed)
    except DegenerateGeometryError as exc:
        logger.warning("%s: %s, writing empty prior", source_image_id, exc)
        return SparsePrior(np.zeros((0, 3)), source_image_id)
    pa, _ = epipolar_filter(pa, pb, f, cfg.inlier_tol_px)
    return sample_prior_depths(pa, depth_a, validity_a, source_image_id)


def write_prior_csv(prior: SparsePrior, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRIOR_HEADER)
        for x, y, d in prior.points:
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(d))])


def read_prior_csv(path: str | Path, source_image_id: str | None = None) -> SparsePrior:
    """Parse an ``x,y,depth`` prior file; malformed records raise PriorFormatError with file and line."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if lineno == 1:
                if tuple(c.strip() for c in line.split(",")) != PRIOR_HEADER:
                    raise PriorFormatError(f"{path}:1: expected header 'x,y,depth', got {line!r}")
                continue
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 3:
                    raise ValueError
                x, y, d = (float(p) for p in parts)
            except ValueError:
                raise PriorFormatError(f"{path}:{lineno}: malformed prior record {line!r}") from None
            if not (np.isfinite(d) and d > 0):
                raise PriorFormatError(f"{path}:{lineno}: depth must be positive and finite")
            rows.append((x, y, d))
    return SparsePrior(np.array(rows).reshape(-1, 3),
                       path.stem if source_image_id is None else source_image_id)
