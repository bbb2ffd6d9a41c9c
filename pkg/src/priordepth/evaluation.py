"""Range-capped depth error metrics and table-style CSV reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .densify import PriorMaps

DEFAULT_CAPS = (math.inf, 5.0, 1.0)
CSV_COLUMNS = ("image_id", "cap", "rmse_lin", "rmse_log", "rmse_silog", "mare", "n_pixels")
AGGREGATION_NOTE = "# aggregation: metrics computed per image, summary row is the mean over non-empty images"
SUMMARY_ID = "mean"


@dataclass
class MetricReport:
    rmse_lin: float
    rmse_log: float
    rmse_silog: float
    mare: float
    range_cap: float
    n_pixels: int
    alpha: float = math.nan  # mean(log gt - log pred), the scale-invariance offset

    @property
    def empty(self) -> bool:
        return self.n_pixels == 0

    def as_row(self, image_id: str) -> dict:
        return {"image_id": image_id, "cap": _fmt_cap(self.range_cap), "rmse_lin": self.rmse_lin,
                "rmse_log": self.rmse_log, "rmse_silog": self.rmse_silog, "mare": self.mare,
                "n_pixels": self.n_pixels}


def _fmt_cap(cap: float) -> str:
    return "inf" if math.isinf(cap) else repr(float(cap))


def _empty_report(cap: float) -> MetricReport:
    nan = math.nan
    return MetricReport(nan, nan, nan, nan, cap, 0)


def evaluate(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None,
             range_cap: float = math.inf) -> MetricReport:
    """Linear, log and scale-invariant log RMSE plus MARE over valid pixels with gt < cap.

    An empty selection yields a report with ``n_pixels == 0`` and NaN metrics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    sel = np.isfinite(gt) & (gt > 0) & (gt < range_cap)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    n = int(sel.sum())
    if n == 0:
        return _empty_report(range_cap)
    p, d = pred[sel], gt[sel]
    diff = p - d
    with np.errstate(divide="ignore", invalid="ignore"):
        log_diff = np.log(p) - np.log(d)
    alpha = -log_diff.mean()
    return MetricReport(
        rmse_lin=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean(log_diff ** 2))),
        rmse_silog=float(np.sqrt(np.mean((log_diff + alpha) ** 2))),
        mare=float(np.mean(np.abs(diff) / np.abs(d))),
        range_cap=float(range_cap),
        n_pixels=n,
        alpha=float(alpha),
    )


def evaluate_ranges(pred, gt, mask=None, caps: Sequence[float] = DEFAULT_CAPS) -> list[MetricReport]:
    if len(caps) == 0:
        raise ValueError("caps must be nonempty")
    return [evaluate(pred, gt, mask, c) for c in caps]


def evaluate_prior_standalone(prior_maps: PriorMaps, gt, mask=None, range_cap: float = math.inf) -> MetricReport:
    """Score the nearest-neighbour prior map as if it were the prediction."""
    return evaluate(prior_maps.s1, gt, mask, range_cap)


def mean_reports(reports: Iterable[MetricReport]) -> MetricReport:
    """Per-image mean of non-empty reports sharing one cap; ``n_pixels`` is summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports")
    cap = reports[0].range_cap
    full = [r for r in reports if not r.empty]
    if not full:
        return _empty_report(cap)
    m = {k: float(np.mean([getattr(r, k) for r in full])) for k in ("rmse_lin", "rmse_log", "rmse_silog", "mare")}
    return MetricReport(range_cap=cap, n_pixels=sum(r.n_pixels for r in full), **m)


def summarize(per_image: dict[str, list[MetricReport]]) -> list[MetricReport]:
    """Dataset-mean report per cap position, given ``image_id -> reports over caps``."""
    columns = list(zip(*per_image.values()))
    return [mean_reports(col) for col in columns]


def write_report_csv(per_image: dict[str, list[MetricReport]], path: str | Path) -> list[MetricReport]:
    """One row per (image, cap) followed by one summary row per cap; returns the summary."""
    summary = summarize(per_image)
    with open(path, "w", newline="") as fh:
        fh.write(AGGREGATION_NOTE + "\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for image_id, reports in per_image.items():
            for r in reports:
                writer.writerow(r.as_row(image_id))
        for r in summary:
            writer.writerow(r.as_row(SUMMARY_ID))
    return summary


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        rows.append({"image_id": row["image_id"], "cap": float(row["cap"]),
                     **{k: float(row[k]) for k in ("rmse_lin", "rmse_log", "rmse_silog", "mare")},
                     "n_pixels": int(row["n_pixels"])})
    return rows
