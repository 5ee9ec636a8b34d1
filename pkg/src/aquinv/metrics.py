"""
Surrogate-quality and data-fit statistics.

``r2`` and ``rmse`` treat each sample as one vector (all channels and pixels
together); the RMSE is the root mean squared per-sample norm, not a per-pixel
quantity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def _pair(truth, pred):
    y = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if y.shape != p.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {p.shape}")
    if y.ndim == 0:
        raise MetricError("need a sample axis")
    return y.reshape(len(y), -1), p.reshape(len(p), -1)


def r2(truth, pred) -> float:
    """``1 - sum ||y - p||^2 / sum ||y - mean(y)||^2`` over samples."""
    y, p = _pair(truth, pred)
    if len(y) < 2:
        raise MetricError("R^2 needs at least two samples")
    den = np.sum((y - y.mean(axis=0)) ** 2)
    if den == 0:
        raise MetricError("R^2 is undefined for constant truth")
    return float(1.0 - np.sum((y - p) ** 2) / den)


def rmse(truth, pred) -> float:
    """``sqrt(mean_n ||y_n - p_n||^2)``."""
    y, p = _pair(truth, pred)
    return float(np.sqrt(np.mean(np.sum((y - p) ** 2, axis=1))))


def sswr(model_obs, measured, sigma) -> float:
    """Sum of squared residuals weighted by the measurement standard deviations."""
    f = np.asarray(model_obs, dtype=np.float64)
    d = np.asarray(measured, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise MetricError("sigma must be positive")
    return float(np.sum(((f - d) / s) ** 2))


def sswr_many(model_obs, measured, sigma) -> np.ndarray:
    """Row-wise :func:`sswr` for ``model_obs (n, N_d)``."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise MetricError("sigma must be positive")
    r = (np.atleast_2d(model_obs) - np.asarray(measured)) / s
    return np.sum(r * r, axis=1)


def max_abs_error_per_field(truth_fields, pred_fields) -> np.ndarray:
    """Maximum absolute error of each field; inputs are ``(n_fields, ...)``."""
    y = np.asarray(truth_fields, dtype=np.float64)
    p = np.asarray(pred_fields, dtype=np.float64)
    if y.shape != p.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {p.shape}")
    if y.size == 0 or len(y) == 0:
        raise MetricError("no fields given")
    return np.abs(y - p).reshape(len(y), -1).max(axis=1)


@dataclass
class MetricReport:
    r2: float
    rmse: float
    sswr: float | None = None
    max_abs_errors: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.r2 > 1 + 1e-12 or self.rmse < 0 or (self.sswr is not None and self.sswr < 0):
            raise MetricError("metric values out of range")

    @property
    def emax_mean(self) -> float:
        return float(np.mean(self.max_abs_errors)) if self.max_abs_errors else float("nan")

    @property
    def emax_std(self) -> float:
        return float(np.std(self.max_abs_errors)) if self.max_abs_errors else float("nan")

    def to_dict(self) -> dict:
        return {"r2": self.r2, "rmse": self.rmse, "sswr": self.sswr,
                "emax_mean": self.emax_mean, "emax_std": self.emax_std,
                "n_fields": len(self.max_abs_errors)}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Per-field maximum absolute errors, one row each."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["field", "max_abs_error"])
            for i, e in enumerate(self.max_abs_errors):
                w.writerow([i, repr(float(e))])


def surrogate_report(truth_head, truth_conc, pred_head, pred_conc, n_release: int) -> MetricReport:
    """R^2 and RMSE over stacked ``(h, c_1..c_nt)`` outputs, plus per-field max
    errors over the release-time concentration fields."""
    y = np.concatenate([np.asarray(truth_head)[:, None], truth_conc], axis=1)
    p = np.concatenate([np.asarray(pred_head)[:, None], pred_conc], axis=1)
    tc = np.asarray(truth_conc)[:, :n_release]
    pc = np.asarray(pred_conc)[:, :n_release]
    e = max_abs_error_per_field(tc.reshape(-1, *tc.shape[2:]), pc.reshape(-1, *pc.shape[2:]))
    return MetricReport(r2(y, p), rmse(y, p), None, [float(v) for v in e])
