"""Hybrid backfitting estimator for a single PAR(p) series.

The additive form ``m_t = f1(Y_{t-1}, ..., Y_{t-p}) + f2(X_t)`` separates the
autoregressive part, estimated by the average slope of a cubic smoothing
spline, from the covariate part, estimated by log-link Poisson regression.
The two are refit in turn on each other's residuals until the parameters
settle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .glm import fit_poisson_log_link
from .metrics import FitMetrics, compute_metrics
from .model import CountSeries, CovariatePanel, MeanPath, ParParams, dynamic_mean
from .spline import AUTO, DegenerateInputError, fit_smoothing_spline

__all__ = [
    "HybridConfig",
    "ParFit",
    "estimate_rho_from_spline",
    "fit_par_hybrid",
    "lag_slopes",
    "one_step_means",
]

log = logging.getLogger(__name__)

STATIONARY_MARGIN = 1e-6

RESPONSE_RULES = {
    "keep": lambda r: r,
    "abs": np.abs,
    "clamp": lambda r: np.maximum(r, 0.0),
}


class EstimationError(RuntimeError):
    """The estimator could not produce a fit."""


@dataclass(frozen=True)
class HybridConfig:
    """Settings for :func:`fit_par_hybrid`.

    ``abscissa`` selects what the autoregressive spline is a function of:
    the lagged observed counts (``"count"``, default) or the lagged working
    residuals (``"residual"``).  With ``lam="auto"`` the penalty weight is
    chosen by GCV on the first ``gcv_passes`` spline fits and then held, which
    keeps the outer iteration a continuous map.
    """

    tol: float = 1e-6
    max_iter: int = 500
    lam: float | str = AUTO
    abscissa: str = "count"
    gcv_passes: int = 5
    # rough end of the GCV grid; None means half the sample size
    max_df: float | None = 5.0
    warm_start: bool = True
    # hold rho at these values and skip the spline steps
    fixed_rho: tuple[float, ...] | None = None
    inner_tol: float = 1e-8
    inner_max_iter: int = 200
    # how negative working responses enter the covariate GLM
    negative_responses: str = "abs"

    def __post_init__(self):
        if self.abscissa not in ("count", "residual"):
            raise ValueError(f"abscissa must be 'count' or 'residual', got {self.abscissa!r}")
        if self.negative_responses not in RESPONSE_RULES:
            raise ValueError(f"negative_responses must be one of {sorted(RESPONSE_RULES)}")


@dataclass(frozen=True)
class ParFit:
    params: ParParams
    delta0_star: float
    iterations: int
    converged: bool
    projected: bool
    history: NDArray
    mean_path: MeanPath
    metrics: FitMetrics
    initial_delta: NDArray = field(repr=False)
    first_refit_delta: NDArray = field(repr=False)
    fallbacks: int = 0

    @property
    def rho(self) -> NDArray:
        return self.params.rho

    @property
    def delta(self) -> NDArray:
        return self.params.delta


def _design(covariates: CovariatePanel) -> NDArray:
    return np.column_stack([np.ones(len(covariates)), covariates.rows])


def _lag_matrix(values: NDArray, p: int) -> NDArray:
    # column i holds values[t - 1 - i] for t = p..T-1
    T = values.shape[0]
    return np.column_stack([values[p - 1 - i : T - 1 - i] for i in range(p)])


def _ols_line(x: NDArray, y: NDArray) -> tuple[float, float]:
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean()) / sxx) if sxx > 0 else 0.0
    return slope, float(y.mean() - slope * x.mean())


def _smooth_slope(x: NDArray, y: NDArray, lam, max_df=None) -> tuple[float, NDArray, float, bool]:
    """Mean analytic spline slope over the data abscissae.

    Returns (slope, fitted values, penalty weight used, fell back to OLS).
    """
    try:
        fit = fit_smoothing_spline(x, y, lam, max_df)
    except DegenerateInputError:
        slope, icept = _ols_line(x, y)
        return slope, icept + slope * x, float("inf"), True
    d = fit.knot_derivatives()[fit.knot_index]
    return float(np.mean(d)), fit.fitted_values, fit.lam, False


@dataclass(frozen=True)
class LagSlopes:
    slopes: NDArray
    lams: tuple[float, ...]
    fell_back: bool


def lag_slopes(
    residuals: ArrayLike,
    p: int,
    lam: float | str | Sequence[float] = AUTO,
    lagged: ArrayLike | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    max_df: float | None = None,
) -> LagSlopes:
    """Average spline derivatives of ``R_t`` on each lag.

    The abscissae are the lags of ``lagged`` when given (for instance the
    observed counts) and of ``residuals`` otherwise.  For ``p == 1`` this is a
    single smoothing spline.  For ``p > 1`` the lag components are fitted
    additively: each lag's spline is refit on the partial residual of the
    others until the average slopes move by less than ``tol``.  Penalty
    weights chosen by GCV on the first sweep are held fixed afterwards, so
    the inner loop is a fixed linear smoother and converges.
    """
    r = np.asarray(residuals, dtype=float)
    if r.shape[0] < p + 4:
        raise ValueError(f"need at least p + 4 = {p + 4} residuals, got {r.shape[0]}")
    src = r if lagged is None else np.asarray(lagged, dtype=float)
    if src.shape != r.shape:
        raise ValueError("lagged series must align with the residuals")
    y = r[p:]
    lags = _lag_matrix(src, p)
    lams = list(lam) if not isinstance(lam, (str, float, int)) else [lam] * p
    if len(lams) != p:
        raise ValueError("one penalty weight per lag is required")

    if p == 1:
        slope, _, used, fb = _smooth_slope(lags[:, 0], y, lams[0], max_df)
        return LagSlopes(np.array([slope]), (used,), fb)

    alpha = float(y.mean())
    # start from the joint linear fit; lags along a near-deterministic path
    # are concurve and a zero start would hand everything to the first lag
    centred = lags - lags.mean(axis=0)
    coef, *_ = np.linalg.lstsq(centred, y - alpha, rcond=None)
    comps = centred * coef
    slopes = np.full(p, np.nan)
    fell_back = False
    for sweep in range(max_iter):
        prev = slopes.copy()
        for i in range(p):
            partial = y - alpha - comps.sum(axis=1) + comps[:, i]
            slopes[i], fitted, used, fb = _smooth_slope(lags[:, i], partial, lams[i], max_df)
            lams[i] = used
            fell_back |= fb
            comps[:, i] = fitted - fitted.mean()
        if sweep > 0 and np.max(np.abs(slopes - prev)) < tol:
            break
    return LagSlopes(slopes, tuple(float(v) for v in lams), fell_back)


def estimate_rho_from_spline(
    residuals: ArrayLike,
    p: int,
    lam: float | str = AUTO,
    lagged: ArrayLike | None = None,
) -> NDArray:
    """Autoregressive coefficients as the mean analytic spline slope per lag."""
    return lag_slopes(residuals, p, lam, lagged).slopes


def _project(rho: NDArray) -> tuple[NDArray, bool]:
    rho = np.maximum(rho, 0.0)
    cap = 1.0 - STATIONARY_MARGIN
    total = float(rho.sum())
    if total >= cap:
        return rho * (cap / total), True
    return rho, False


def one_step_means(params: ParParams, series: CountSeries, covariates: CovariatePanel) -> MeanPath:
    """In-sample one-step dynamic means for t = p+1..T at the given parameters."""
    y = series.values.astype(float)
    p = params.p
    X = covariates.rows
    if X.shape[0] != y.shape[0]:
        raise ValueError("covariates must align with the series")
    lags = _lag_matrix(y, p)
    m = np.array([dynamic_mean(params, lags[t], X[p + t]) for t in range(lags.shape[0])])
    return MeanPath(m, offset=p)


def fit_par_hybrid(
    series: CountSeries,
    covariates: CovariatePanel | None,
    p: int = 1,
    config: HybridConfig | None = None,
) -> ParFit:
    """Estimate PAR(p) parameters by hybrid spline/GLM backfitting.

    Parameters
    ----------
    series : CountSeries
        Observed counts.
    covariates : CovariatePanel or None
        Regressor rows aligned with ``series``.
    p : int
        Lag order.
    config : HybridConfig, optional
        Convergence tolerance (max relative parameter change), iteration
        cap, smoothing rule and warm-start policy.

    Returns
    -------
    ParFit
        Final parameters with ``delta0`` rescaled from the additive-form
        intercept, the iteration trace, the one-step mean path and its
        error metrics.  A fit that hits the iteration cap or ends with the
        stationarity projection active has ``converged=False``.
    """
    cfg = config or HybridConfig()
    y = series.values.astype(float)
    T = y.shape[0]
    covariates = covariates if covariates is not None else CovariatePanel.empty(T)
    k = covariates.k
    if len(covariates) != T:
        raise ValueError("covariates must align with the series")
    if p < 1:
        raise ValueError("lag order must be positive")
    if T < max(20, 5 * (p + k)):
        raise ValueError(f"series too short for p={p}, k={k}: T={T}")
    X = _design(covariates)
    lags = _lag_matrix(y, p)
    lagged = y if cfg.abscissa == "count" else None

    # covariate model ignoring the autoregression
    glm = fit_poisson_log_link(y, X)
    beta = glm.coefficients
    initial_delta = beta[1:].copy()
    fallbacks = 0
    lam = cfg.lam
    passes = 0

    def ar_step(resid):
        nonlocal lam, passes, fallbacks
        est = lag_slopes(resid, p, lam, lagged, cfg.inner_tol, cfg.inner_max_iter, cfg.max_df)
        passes += 1
        fallbacks += est.fell_back
        if isinstance(cfg.lam, str) and passes >= cfg.gcv_passes and not est.fell_back:
            lam = est.lams
        return _project(est.slopes)

    zero_rho = False
    if cfg.fixed_rho is not None:
        rho = np.asarray(cfg.fixed_rho, dtype=float)
        if rho.shape != (p,):
            raise ValueError("fixed_rho must have p entries")
        rho, projected = _project(rho)
        zero_rho = not np.any(rho)
    else:
        # spline slope of the first-stage residual
        rho, projected = ar_step(y - glm.fitted_values)

    theta = np.concatenate([rho, beta])
    history = [theta]
    converged = False
    first_refit_delta = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # covariate model on the AR-adjusted counts
        if not zero_rho:
            # with rho held at zero the first-stage fit already is this fit
            response = RESPONSE_RULES[cfg.negative_responses](y[p:] - lags @ rho)
            glm = fit_poisson_log_link(response, X[p:], start=beta if cfg.warm_start else None)
            beta = glm.coefficients
        if first_refit_delta is None:
            first_refit_delta = beta[1:].copy()
        # spline slope of the covariate-adjusted residual
        if cfg.fixed_rho is None:
            rho, projected = ar_step(y - np.exp(X @ beta))
        new_theta = np.concatenate([rho, beta])
        history.append(new_theta)
        change = np.abs(new_theta - theta) / np.maximum(np.abs(theta), 1e-8)
        theta = new_theta
        if not np.all(np.isfinite(change)):
            log.warning("non-finite parameter change at iteration %d", it)
            break
        if float(change.max()) < cfg.tol:
            converged = True
            break
    converged = converged and not projected

    params = ParParams.from_additive(rho, beta[0], beta[1:])
    path = one_step_means(params, series, covariates)
    metrics = compute_metrics(series.values[p:], path.means)
    return ParFit(
        params=params,
        delta0_star=float(beta[0]),
        iterations=it,
        converged=converged,
        projected=projected,
        history=np.array(history),
        mean_path=path,
        metrics=metrics,
        initial_delta=initial_delta,
        first_refit_delta=first_refit_delta if first_refit_delta is not None else initial_delta,
        fallbacks=int(fallbacks),
    )
