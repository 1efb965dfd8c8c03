"""Forecast error metrics between observed counts and fitted means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

__all__ = ["FitMetrics", "compute_metrics"]


@dataclass(frozen=True)
class FitMetrics:
    mape: float
    rmse: float
    mad: float
    n: int
    mape_excluded: int = 0


def compute_metrics(actual: ArrayLike, predicted: ArrayLike) -> FitMetrics:
    """MAPE (percent), root mean squared error and mean absolute deviation.

    Zero actuals are left out of the MAPE and counted in ``mape_excluded``;
    MAPE is NaN when every actual is zero.
    """
    y = np.asarray(actual, dtype=float)
    m = np.asarray(predicted, dtype=float)
    if y.shape != m.shape:
        raise ValueError(f"actual {y.shape} and predicted {m.shape} are not aligned")
    err = y - m
    keep = y != 0
    mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(y[keep]))) if keep.any() else float("nan")
    return FitMetrics(
        mape=mape,
        rmse=float(np.sqrt(np.mean(err**2))),
        mad=float(np.mean(np.abs(err))),
        n=int(y.size),
        mape_excluded=int((~keep).sum()),
    )
