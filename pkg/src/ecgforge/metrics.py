"""Reconstruction and classification metrics, histograms and run aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHIFT = 10


class DegenerateRangeError(ValueError):
    """The reference signal is constant, so its range cannot normalise an error."""


def nrmse(y, y_hat) -> float:
    """RMSE between ``y`` and ``y_hat`` divided by the range of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shapes differ: {y.shape} vs {y_hat.shape}")
    span = y.max() - y.min()
    if span <= 0:
        raise DegenerateRangeError("reference is constant")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)) / span)


def unit_scale(x) -> np.ndarray:
    """Min-max map onto [0, 1]; a constant sequence maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    span = x.max() - x.min()
    return np.zeros_like(x) if span <= 0 else (x - x.min()) / span


def scaled_error(y, y_hat) -> float:
    # after unit scaling the normaliser is exactly 1
    return float(np.sqrt(np.mean((unit_scale(y) - unit_scale(y_hat)) ** 2)))


def nrmse_variants(segment_values, mask_start: int, y_hat, shift: int = SHIFT) -> dict[str, float]:
    """Raw, scaled, shifted and scaled+shifted errors of a 100-sample prediction.

    Shifted variants compare ``y_hat`` against the true segment translated by
    every s in [-shift, shift] and keep the best; shifts leaving the segment
    are skipped.
    """
    values = np.asarray(segment_values, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = y_hat.size
    y = values[mask_start : mask_start + n]
    out = {"raw": nrmse(y, y_hat), "scaled": scaled_error(y, y_hat)}
    shifted, scaled_shifted = [], []
    for s in range(-shift, shift + 1):
        a = mask_start + s
        if a < 0 or a + n > values.size:
            continue
        ref = values[a : a + n]
        try:
            shifted.append(nrmse(ref, y_hat))
        except DegenerateRangeError:
            pass
        scaled_shifted.append(scaled_error(ref, y_hat))
    if not shifted:
        raise DegenerateRangeError("no valid shift of the reference window")
    out["shifted"] = min(shifted)
    out["scaled_shifted"] = min(scaled_shifted)
    return out


# ---------------------------------------------------------------- classification


@dataclass
class MetricReport:
    overall_accuracy: float
    balanced_accuracy: float
    kappa: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "kappa": self.kappa,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(actual, predicted, n_classes: int = 17) -> np.ndarray:
    """Rows are actual classes, columns predicted."""
    actual = np.asarray(actual, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    for name, labels in (("actual", actual), ("predicted", predicted)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (actual, predicted), 1)
    return m


def report_from_confusion(m: np.ndarray) -> MetricReport:
    m = np.asarray(m, dtype=np.int64)
    total = m.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    support = m.sum(axis=1)
    present = support > 0
    recall = np.diag(m)[present] / support[present]
    p_o = np.trace(m) / total
    p_e = float(np.dot(support, m.sum(axis=0))) / float(total) ** 2
    if p_e == 1.0:
        if p_o != 1.0:
            raise ValueError("kappa undefined: chance agreement is 1 but observed agreement is not")
        kappa = 1.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return MetricReport(100.0 * p_o, 100.0 * float(recall.mean()), float(kappa), m)


def classification_metrics(actual, predicted, n_classes: int = 17) -> MetricReport:
    actual = np.asarray(actual)
    if actual.size == 0 or actual.shape != np.shape(predicted):
        raise ValueError("need equal-length nonempty label lists")
    return report_from_confusion(confusion_matrix(actual, predicted, n_classes))


# ---------------------------------------------------------------- histograms


def error_histogram(errors, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-width bins from 0 up to the bin boundary above the largest error."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to bin")
    bad = int(np.count_nonzero(~np.isfinite(e)))
    if bad:
        raise ValueError(f"{bad} non-finite errors")
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    # a small tolerance keeps values like 0.3/0.1 in the bin they print as
    idx = np.floor(e / bin_width + 1e-9).astype(np.int64)
    if idx.min() < 0:
        raise ValueError("errors must be nonnegative")
    counts = np.bincount(idx, minlength=idx.max() + 1)
    edges = np.arange(counts.size + 1) * bin_width
    return edges, counts


def write_histogram_csv(path, edges: np.ndarray, counts: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
    return path


def write_confusion_csv(path, m: np.ndarray, class_names: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["actual\\predicted", *class_names])
        for name, row in zip(class_names, np.asarray(m)):
            w.writerow([name, *map(int, row)])
    return path


# ---------------------------------------------------------------- aggregation


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def aggregate(reports: list[dict]) -> dict:
    """mean/std of every scalar metric across runs, plus the summed confusion matrix."""
    out: dict = {}
    keys = sorted({k for r in reports for k, v in r.items() if isinstance(v, (int, float))})
    for k in keys:
        mean, std = mean_std(r[k] for r in reports if k in r)
        out[k] = {"mean": mean, "std": std}
    mats = [np.asarray(r["confusion"]) for r in reports if "confusion" in r]
    if mats:
        out["confusion"] = np.sum(mats, axis=0).tolist()
    out["n_runs"] = len(reports)
    return out
