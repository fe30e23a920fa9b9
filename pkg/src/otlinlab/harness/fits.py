"""Least-squares power-law fits."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class ScalingFit:
    x_label: str
    y_label: str
    slope: float
    intercept: float
    rms: float
    n: int

    def to_dict(self):
        return asdict(self)


def fit_scaling(x, y, x_label: str = "x", y_label: str = "y") -> ScalingFit:
    """Fit log y = slope * log x + intercept; needs at least 3 points with positive ordinates."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    keep = (y > 0) & (x > 0) & np.isfinite(x) & np.isfinite(y)
    if keep.sum() < 3:
        raise ValueError("need at least 3 points with positive ordinates")
    lx, ly = np.log(x[keep]), np.log(y[keep])
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - (slope * lx + icpt)
    return ScalingFit(x_label, y_label, float(slope), float(icpt), float(np.sqrt(np.mean(res * res))), int(keep.sum()))
