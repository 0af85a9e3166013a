"""Scalar diagnostics: Toeplitz-likeness of spatial weights and power-law fits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def toeplitzness(w: np.ndarray) -> float:
    """Fraction of the variance of ``w`` explained by its diagonal means.

    ``1 - sum((w_ij - mean of diagonal j-i)^2) / sum((w_ij - mean(w))^2)``,
    clamped to ``[0, 1]``. A constant matrix scores 1 by convention.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"toeplitzness needs a square matrix, got shape {w.shape}")
    n = w.shape[0]
    total = float(((w - w.mean()) ** 2).sum())
    if total == 0.0:
        return 1.0
    within = 0.0
    for d in range(-(n - 1), n):
        diag = np.diagonal(w, offset=d)
        within += float(((diag - diag.mean()) ** 2).sum())
    return float(min(1.0, max(0.0, 1.0 - within / total)))


@dataclass
class PowerLawFit:
    """``y ~= coefficient * x ** (-exponent)``; residual is the log-space sum of squares."""

    coefficient: float
    exponent: float
    residual: float

    def predict(self, x) -> np.ndarray:
        return self.coefficient * np.asarray(x, dtype=np.float64) ** (-self.exponent)


def fit_power_law(points) -> PowerLawFit:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be a sequence of (x, y) pairs")
    if pts.shape[0] < 2:
        raise ValueError("a power-law fit needs at least two points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("power-law fit needs finite, strictly positive x and y")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    design = np.column_stack([np.ones_like(lx), lx])
    (intercept, slope), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - (intercept + slope * lx)
    return PowerLawFit(float(np.exp(intercept)), float(-slope), float(resid @ resid))
