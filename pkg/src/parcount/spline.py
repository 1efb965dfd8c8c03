"""Cubic smoothing splines in Reinsch form.

The fitted function minimizes ``sum w_i (y_i - f(x_i))**2 + lam * int f''(x)**2 dx``
over natural cubic splines with knots at the distinct abscissae.  Writing
``g`` for the values at the knots and ``gamma`` for the interior second
derivatives, the minimizer solves the pentadiagonal system

    (R + lam * Q' W^-1 Q) gamma = Q' y,      g = y - lam * W^-1 Q gamma

(Green & Silverman, 1994, ch. 2).  Smoothing weights are chosen by
generalized cross-validation; the trace of the hat matrix comes from the
central band of the inverse of the pentadiagonal system (Hutchinson & de
Hoog, 1985), so each trial weight costs O(n).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import PPoly

__all__ = [
    "DegenerateInputError",
    "SplineFit",
    "collapse_ties",
    "fit_smoothing_spline",
    "gcv_grid",
    "spline_derivative_at",
]

AUTO = "auto"
N_GRID = 31
TIE_RTOL = 1e-9


class DegenerateInputError(ValueError):
    """Raised when fewer than four distinct abscissae are available."""


@numba.njit(cache=True)
def _ldl_penta(d0, d1, d2):
    # LDL' of a symmetric pentadiagonal matrix; returns D and the two
    # subdiagonals of the unit lower factor.
    m = d0.shape[0]
    D = np.empty(m)
    L1 = np.zeros(m)  # L1[i] = L[i+1, i]
    L2 = np.zeros(m)  # L2[i] = L[i+2, i]
    for i in range(m):
        di = d0[i]
        if i >= 1:
            di -= L1[i - 1] * L1[i - 1] * D[i - 1]
        if i >= 2:
            di -= L2[i - 2] * L2[i - 2] * D[i - 2]
        D[i] = di
        if i + 1 < m:
            v = d1[i]
            if i >= 1:
                v -= L2[i - 1] * L1[i - 1] * D[i - 1]
            L1[i] = v / di
        if i + 2 < m:
            L2[i] = d2[i] / di
    return D, L1, L2


@numba.njit(cache=True)
def _solve_ldl(D, L1, L2, b):
    m = D.shape[0]
    z = b.copy()
    for i in range(m):
        if i >= 1:
            z[i] -= L1[i - 1] * z[i - 1]
        if i >= 2:
            z[i] -= L2[i - 2] * z[i - 2]
    for i in range(m):
        z[i] /= D[i]
    for i in range(m - 1, -1, -1):
        if i + 1 < m:
            z[i] -= L1[i] * z[i + 1]
        if i + 2 < m:
            z[i] -= L2[i] * z[i + 2]
    return z


@numba.njit(cache=True)
def _inverse_band(D, L1, L2):
    # Central band (width 2) of the inverse from the LDL' factors.
    m = D.shape[0]
    S0 = np.zeros(m)
    S1 = np.zeros(m)  # S1[i] = S[i, i+1]
    S2 = np.zeros(m)  # S2[i] = S[i, i+2]
    for i in range(m - 1, -1, -1):
        a = L1[i] if i + 1 < m else 0.0
        b = L2[i] if i + 2 < m else 0.0
        s11 = S0[i + 1] if i + 1 < m else 0.0
        s12 = S1[i + 1] if i + 2 < m else 0.0
        s22 = S0[i + 2] if i + 2 < m else 0.0
        if i + 1 < m:
            S1[i] = -a * s11 - b * s12
        if i + 2 < m:
            S2[i] = -a * s12 - b * s22
        S0[i] = 1.0 / D[i] - a * S1[i] - b * S2[i]
    return S0, S1, S2


@numba.njit(cache=True)
def _reinsch_fit(h, ybar, w, lam, want_trace):
    """Fit for one smoothing weight.

    Returns (g, gamma_interior, trace); trace is -1 when not requested.
    """
    n = ybar.shape[0]
    m = n - 2
    # Q columns: q0 at row j, q1 at row j+1, q2 at row j+2
    q0 = np.empty(m)
    q1 = np.empty(m)
    q2 = np.empty(m)
    for j in range(m):
        q0[j] = 1.0 / h[j]
        q2[j] = 1.0 / h[j + 1]
        q1[j] = -q0[j] - q2[j]
    # P = Q' W^-1 Q (pentadiagonal)
    p0 = np.empty(m)
    p1 = np.zeros(m)
    p2 = np.zeros(m)
    for j in range(m):
        p0[j] = q0[j] ** 2 / w[j] + q1[j] ** 2 / w[j + 1] + q2[j] ** 2 / w[j + 2]
        if j + 1 < m:
            p1[j] = q1[j] * q0[j + 1] / w[j + 1] + q2[j] * q1[j + 1] / w[j + 2]
        if j + 2 < m:
            p2[j] = q2[j] * q0[j + 2] / w[j + 2]
    d0 = np.empty(m)
    d1 = np.zeros(m)
    d2 = np.zeros(m)
    for j in range(m):
        d0[j] = (h[j] + h[j + 1]) / 3.0 + lam * p0[j]
        if j + 1 < m:
            d1[j] = h[j + 1] / 6.0 + lam * p1[j]
        if j + 2 < m:
            d2[j] = lam * p2[j]
    D, L1, L2 = _ldl_penta(d0, d1, d2)
    rhs = np.empty(m)
    for j in range(m):
        rhs[j] = q0[j] * ybar[j] + q1[j] * ybar[j + 1] + q2[j] * ybar[j + 2]
    gamma = _solve_ldl(D, L1, L2, rhs)
    qg = np.zeros(n)
    for j in range(m):
        qg[j] += q0[j] * gamma[j]
        qg[j + 1] += q1[j] * gamma[j]
        qg[j + 2] += q2[j] * gamma[j]
    g = np.empty(n)
    for i in range(n):
        g[i] = ybar[i] - lam * qg[i] / w[i]
    tr = -1.0
    if want_trace:
        S0, S1, S2 = _inverse_band(D, L1, L2)
        acc = 0.0
        for j in range(m):
            acc += S0[j] * p0[j]
            if j + 1 < m:
                acc += 2.0 * S1[j] * p1[j]
            if j + 2 < m:
                acc += 2.0 * S2[j] * p2[j]
        tr = n - lam * acc
    return g, gamma, tr


def collapse_ties(
    x: ArrayLike, y: ArrayLike, rtol: float = TIE_RTOL
) -> tuple[NDArray, NDArray, NDArray, float, NDArray]:
    """Sort by ``x`` and merge replicate abscissae.

    Abscissae closer than ``rtol`` times the data range count as ties, which
    absorbs rounding noise in computed residuals.  Returns the distinct
    abscissae (group means), the mean response at each, the multiplicities,
    the within-group sum of squares that the merge drops, and the knot index
    of every input point.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    span = xs[-1] - xs[0] if xs.size else 0.0
    new_group = np.empty(xs.size, dtype=bool)
    new_group[:1] = True
    new_group[1:] = np.diff(xs) > rtol * span
    start = np.flatnonzero(new_group)
    counts = np.diff(np.append(start, xs.size))
    knots = np.add.reduceat(xs, start) / counts
    ybar = np.add.reduceat(ys, start) / counts
    within = float(np.sum((ys - np.repeat(ybar, counts)) ** 2))
    group = np.empty(xs.size, dtype=np.int64)
    group[order] = np.cumsum(new_group) - 1
    return knots, ybar, counts.astype(float), within, group


@dataclass(frozen=True)
class SplineFit:
    """A fitted natural cubic smoothing spline.

    Attributes
    ----------
    knots : ndarray
        Sorted distinct abscissae.
    values : ndarray
        Fitted function values at the knots.
    second_derivs : ndarray
        Second derivatives at the knots (zero at both ends).
    lam : float
        Penalty weight used for the fit.
    df : float
        Trace of the hat matrix (effective degrees of freedom).
    gcv : float
        GCV score at ``lam`` (NaN when not computed).
    fitted_values : ndarray
        Fitted values at the original inputs, in input order.
    knot_index : ndarray
        Knot each original input was merged into.
    """

    knots: NDArray
    values: NDArray
    second_derivs: NDArray
    lam: float
    df: float
    gcv: float
    fitted_values: NDArray
    knot_index: NDArray = field(repr=False)
    grid: NDArray | None = field(default=None, repr=False)
    grid_scores: NDArray | None = field(default=None, repr=False)

    @property
    def ppoly(self) -> PPoly:
        t, g, c2 = self.knots, self.values, self.second_derivs
        h = np.diff(t)
        a = (c2[1:] - c2[:-1]) / (6.0 * h)
        b = c2[:-1] / 2.0
        c = (g[1:] - g[:-1]) / h - h * (2.0 * c2[:-1] + c2[1:]) / 6.0
        return PPoly(np.vstack([a, b, c, g[:-1]]), t, extrapolate=True)

    def knot_derivatives(self) -> NDArray:
        """First derivative at every knot."""
        t, g, c2 = self.knots, self.values, self.second_derivs
        h = np.diff(t)
        slope = np.diff(g) / h
        left = slope - h * (2.0 * c2[:-1] + c2[1:]) / 6.0
        last = slope[-1] + h[-1] * (c2[-2] + 2.0 * c2[-1]) / 6.0
        return np.append(left, last)

    def __call__(self, x: ArrayLike) -> NDArray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.knots[0], self.knots[-1]
        d = self.knot_derivatives()
        out = self.ppoly(np.clip(x, lo, hi))
        # linear extrapolation beyond the boundary knots
        out = np.where(x < lo, self.values[0] + d[0] * (x - lo), out)
        return np.where(x > hi, self.values[-1] + d[-1] * (x - hi), out)

    def derivative(self, x: ArrayLike) -> NDArray:
        x = np.asarray(x, dtype=float)
        d = self.knot_derivatives()
        inner = self.ppoly.derivative()(np.clip(x, self.knots[0], self.knots[-1]))
        inner = np.where(x < self.knots[0], d[0], inner)
        return np.where(x > self.knots[-1], d[-1], inner)


def _fit_collapsed(knots, ybar, w, lam, want_trace=True):
    h = np.diff(knots)
    g, gamma, tr = _reinsch_fit(h, ybar, w, float(lam), want_trace)
    return g, gamma, tr


def _gcv_score(knots, ybar, w, within, n_obs, lam):
    g, _, tr = _fit_collapsed(knots, ybar, w, lam)
    rss = float(np.sum(w * (ybar - g) ** 2)) + within
    denom = (1.0 - tr / n_obs) ** 2
    return rss / n_obs / denom if denom > 0 else np.inf, tr


def _lam_for_df(knots, ybar, w, target, log_lo, log_hi, iters=40):
    # df(lam) decreases monotonically in lam; bisection on log(lam)
    h = np.diff(knots)
    for _ in range(iters):
        mid = 0.5 * (log_lo + log_hi)
        _, _, tr = _reinsch_fit(h, ybar, w, float(np.exp(mid)), True)
        if tr > target:
            log_lo = mid
        else:
            log_hi = mid
    return 0.5 * (log_lo + log_hi)


def gcv_grid(
    knots, w, n_obs: int | None = None, size: int = N_GRID, max_df: float | None = None
) -> NDArray:
    """Log-spaced penalty weights spanning roughly 2 to n/2 degrees of freedom.

    ``max_df`` lowers the rough end of the grid.
    """
    knots = np.asarray(knots, dtype=float)
    w = np.asarray(w, dtype=float)
    n = knots.shape[0]
    h = np.diff(knots)
    # natural scale: ratio of the roughness and data-fidelity matrices
    ref = np.log(np.sum((h[:-1] + h[1:]) / 3.0) / np.sum(
        (1.0 / h[:-1]) ** 2 / w[:-2] + (1.0 / h[:-1] + 1.0 / h[1:]) ** 2 / w[1:-1]
        + (1.0 / h[1:]) ** 2 / w[2:]
    ))
    lo, hi = ref - 40.0, ref + 40.0
    ybar = np.zeros(n)
    top = max(2.5, min(n, n_obs or n) / 2.0)
    if max_df is not None:
        top = max(2.5, min(top, float(max_df)))
    log_small = _lam_for_df(knots, ybar, w, top, lo, hi)
    log_large = _lam_for_df(knots, ybar, w, 2.05, lo, hi)
    return np.exp(np.linspace(log_small, log_large, size))


def fit_smoothing_spline(
    x: ArrayLike, y: ArrayLike, lam: float | str = AUTO, max_df: float | None = None
) -> SplineFit:
    """Fit a natural cubic smoothing spline.

    Parameters
    ----------
    x, y : array_like
        Abscissae and responses.  Replicate abscissae are merged to their
        mean response and carried as multiplicity weights.
    lam : float or "auto"
        Penalty weight.  ``"auto"`` picks the GCV minimizer over a 31-point
        logarithmic grid.
    max_df : float, optional
        Upper end of the GCV grid in effective degrees of freedom
        (default: half the number of observations).

    Raises
    ------
    DegenerateInputError
        If fewer than four distinct abscissae remain after merging ties.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input to spline fit")
    knots, ybar, w, within, group = collapse_ties(x, y)
    if knots.shape[0] < 4:
        raise DegenerateInputError(
            f"need at least 4 distinct abscissae, got {knots.shape[0]}"
        )
    n_obs = x.shape[0]
    grid = scores = None
    if isinstance(lam, str):
        if lam != AUTO:
            raise ValueError(f"unknown smoothing rule {lam!r}")
        grid = gcv_grid(knots, w, n_obs, max_df=max_df)
        scores = np.array([_gcv_score(knots, ybar, w, within, n_obs, g)[0] for g in grid])
        lam_val = float(grid[int(np.argmin(scores))])
    else:
        lam_val = float(lam)
        if lam_val < 0 or not np.isfinite(lam_val):
            raise ValueError("smoothing weight must be finite and nonnegative")
    g, gamma, tr = _fit_collapsed(knots, ybar, w, lam_val)
    rss = float(np.sum(w * (ybar - g) ** 2)) + within
    denom = (1.0 - tr / n_obs) ** 2
    gcv = rss / n_obs / denom if denom > 1e-300 else np.inf
    second = np.concatenate([[0.0], gamma, [0.0]])
    fitted = g[group]
    return SplineFit(
        knots=knots,
        values=g,
        second_derivs=second,
        lam=lam_val,
        df=float(tr),
        gcv=float(gcv),
        fitted_values=fitted,
        knot_index=group,
        grid=grid,
        grid_scores=scores,
    )


def spline_derivative_at(fit: SplineFit, x0: float) -> float:
    """Analytic first derivative of the fitted spline at ``x0``."""
    if not np.isfinite(x0):
        raise ValueError("derivative requested at a non-finite point")
    return float(fit.derivative(np.array([x0]))[0])
