import numpy as np
import pytest
import torch


def brute_force_maps(points, width, height, sigma):
    """O(HWK) reference for the nearest-keypoint and proximity maps.

    Points are snapped to the nearest integer pixel; ties go to the lowest index
    because ``argmin`` returns the first minimum.
    """
    pts = np.floor(np.asarray(points, dtype=np.float64)[:, :2] + 0.5)
    pts[:, 0] = np.clip(pts[:, 0], 0, width - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, height - 1)
    ys, xs = np.mgrid[0:height, 0:width]
    d2 = (xs[..., None] - pts[:, 0]) ** 2 + (ys[..., None] - pts[:, 1]) ** 2
    idx = np.argmin(d2, axis=-1)
    r2 = np.take_along_axis(d2, idx[..., None], axis=-1)[..., 0]
    s2 = np.exp(-r2 / (2 * sigma**2)) / (sigma * np.sqrt(2 * np.pi))
    return idx, r2, s2, d2


def two_view(n, seed=0, width=320, height=240):
    """Random calibrated camera pair observing ``n`` points in front of both.

    Returns pixel coordinates in both views plus the true F (x2^T F x1 = 0).
    """
    rng = np.random.default_rng(seed)
    k = np.array([[250.0, 0, width / 2], [0, 250.0, height / 2], [0, 0, 1]])
    angle = rng.uniform(-0.15, 0.15, 3)
    rx, ry, rz = angle
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    r = (np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
         @ np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
         @ np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]]))
    t = np.array([1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2)])
    pts = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 10, n)])
    x1 = pts @ k.T
    x1 = x1[:, :2] / x1[:, 2:]
    cam2 = pts @ r.T + t
    x2 = cam2 @ k.T
    x2 = x2[:, :2] / x2[:, 2:]
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    kinv = np.linalg.inv(k)
    f = kinv.T @ tx @ r @ kinv
    return x1, x2, f / np.linalg.norm(f)


def point_line_distance(p, line):
    return abs(line[0] * p[0] + line[1] * p[1] + line[2]) / np.hypot(line[0], line[1])


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn`` at float64 tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x).detach())
        flat[i] = orig - h
        down = float(fn(x).detach())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_rel_error(fn, x, h=1e-6):
    """Relative L2 error between autograd and central differences."""
    xa = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(xa), xa)
    numeric = central_difference(fn, x, h)
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-12))
