"""Multiple PAR(1): shared autoregression and covariate effects, per-series levels.

Each of N independent count series follows

    m_it = rho * Y_i,t-1 + (1 - rho) * exp(delta0_i + X_it' delta)

The estimator runs the single-series backfitting steps on every series and
pools after each half-step: covariate slopes by their plain average, the
per-series autoregressive slopes by a bootstrap mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .glm import SingularDesignError, fit_poisson_log_link
from .hybrid import RESPONSE_RULES, HybridConfig, ParFit, _project, fit_par_hybrid, lag_slopes
from .metrics import FitMetrics, compute_metrics
from .model import CountSeries, CovariatePanel, MultiParParams

__all__ = ["MultiParConfig", "MultiParFit", "bootstrap_pool", "fit_multi_par", "pooled_mean"]

log = logging.getLogger(__name__)

N_BOOT = 500


class MultiParError(RuntimeError):
    """Too few usable series for a pooled fit."""


@dataclass(frozen=True)
class MultiParConfig:
    """Settings for :func:`fit_multi_par`.

    ``hybrid`` carries the per-series backfitting settings.  The pooled
    estimator fits the autoregressive spline on lagged working residuals by
    default.  The bootstrap draws one resampling pattern from ``seed`` and
    reuses it at every pooling step.
    """

    hybrid: HybridConfig = field(default_factory=lambda: HybridConfig(abscissa="residual"))
    n_boot: int = N_BOOT
    seed: int = 0
    length_weighted: bool = False


@dataclass(frozen=True)
class MultiParFit:
    params: MultiParParams
    labels: tuple[str, ...]
    per_series_rho: NDArray
    delta0_star_by_series: NDArray
    iterations: int
    converged: bool
    projected: bool
    history: NDArray
    metrics: FitMetrics
    series_metrics: tuple[FitMetrics, ...]
    excluded: tuple[str, ...] = ()

    @property
    def rho(self) -> float:
        return self.params.rho

    @property
    def delta(self) -> NDArray:
        return self.params.delta


def pooled_mean(values: ArrayLike, weights: ArrayLike | None = None) -> NDArray:
    """Mean along axis 0; exact when every row is identical."""
    v = np.asarray(values, dtype=float)
    if np.all(v == v[0]):
        return v[0].copy()
    if weights is None:
        return v.mean(axis=0)
    w = np.asarray(weights, dtype=float)
    return np.tensordot(w / w.sum(), v, axes=1)


def bootstrap_pool(values: ArrayLike, B: int = N_BOOT, seed=0) -> float:
    """Mean of ``B`` bootstrap-resample means of ``values``."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 1 or B < 1:
        raise ValueError("need at least one value and one resample")
    if np.all(v == v[0]):
        return float(v[0])
    idx = np.random.default_rng(seed).integers(0, v.size, size=(B, v.size))
    return float(v[idx].mean(axis=1).mean())


@dataclass
class _SeriesState:
    # mutable per-series working state for one fit
    label: str
    y: NDArray
    X: NDArray
    beta: NDArray
    lam: object
    passes: int = 0
    rho: float = math.nan


def _wrap_single(fit: ParFit, series: CountSeries) -> MultiParFit:
    params = MultiParParams(rho=float(fit.rho[0]), delta=fit.delta, delta0_by_series=[fit.params.delta0])
    return MultiParFit(
        params=params,
        labels=(series.label,),
        per_series_rho=fit.rho.copy(),
        delta0_star_by_series=np.array([fit.delta0_star]),
        iterations=fit.iterations,
        converged=fit.converged,
        projected=fit.projected,
        history=fit.history,
        metrics=fit.metrics,
        series_metrics=(fit.metrics,),
    )


def fit_multi_par(
    panel: Sequence[CountSeries],
    covariates: Sequence[CovariatePanel | None],
    config: MultiParConfig | None = None,
) -> MultiParFit:
    """Fit the multiple PAR(1) model by pooled hybrid backfitting.

    Parameters
    ----------
    panel : sequence of CountSeries
        The N series.  Lengths may differ.
    covariates : sequence of CovariatePanel or None
        One panel per series, aligned with it.  All panels need the same
        number of columns.
    config : MultiParConfig, optional

    Returns
    -------
    MultiParFit
        Shared ``rho`` and ``delta``, per-series reversion intercepts
        rescaled at the shared ``rho``, and pooled plus per-series metrics.
        Series whose design is singular are dropped with a warning and
        listed in ``excluded``.

    Notes
    -----
    With a single series the call is forwarded to :func:`fit_par_hybrid`
    with ``config.hybrid``.
    """
    cfg = config or MultiParConfig()
    hc = cfg.hybrid
    if len(panel) != len(covariates):
        raise ValueError("need one covariate panel per series")
    if len(panel) == 0:
        raise ValueError("empty panel")
    labels = [s.label for s in panel]
    if len(set(labels)) != len(labels):
        raise ValueError("series labels must be unique")
    if len(panel) == 1:
        return _wrap_single(fit_par_hybrid(panel[0], covariates[0], 1, hc), panel[0])

    ks = {c.k if c is not None else 0 for c in covariates}
    if len(ks) != 1:
        raise ValueError("every covariate panel needs the same columns")
    rule = RESPONSE_RULES[hc.negative_responses]

    states: list[_SeriesState] = []
    excluded = []
    for s, c in zip(panel, covariates):
        y = s.values.astype(float)
        T = y.size
        c = c if c is not None else CovariatePanel.empty(T)
        if len(c) != T:
            raise ValueError(f"covariates for {s.label!r} do not align with the series")
        if T < max(20, 5 * (1 + c.k)):
            raise ValueError(f"series {s.label!r} too short: T={T}")
        X = np.column_stack([np.ones(T), c.rows])
        try:
            # covariate model ignoring the autoregression
            glm = fit_poisson_log_link(y, X)
        except SingularDesignError:
            log.warning("series %r has a singular design and is excluded", s.label)
            excluded.append(s.label)
            continue
        states.append(_SeriesState(s.label, y, X, glm.coefficients, hc.lam))
    if len(states) < 2:
        raise MultiParError("fewer than two series survive the covariate fits")

    # pool in label order so the result does not depend on input order
    order = np.argsort([st.label for st in states], kind="stable")
    weights = np.array([st.y.size for st in states], float)[order] if cfg.length_weighted else None
    lagged_source = hc.abscissa == "count"

    def pool_slopes():
        return pooled_mean(np.array([st.beta[1:] for st in states])[order], weights)

    def ar_step(delta):
        for st in states:
            resid = st.y - np.exp(st.X @ np.concatenate([st.beta[:1], delta]))
            est = lag_slopes(
                resid, 1, st.lam, st.y if lagged_source else None,
                hc.inner_tol, hc.inner_max_iter, hc.max_df,
            )
            st.passes += 1
            if isinstance(hc.lam, str) and st.passes >= hc.gcv_passes and not est.fell_back:
                st.lam = est.lams
            st.rho = float(est.slopes[0])
        per = np.array([st.rho for st in states])
        pooled = bootstrap_pool(per[order], cfg.n_boot, cfg.seed)
        rho, projected = _project(np.array([pooled]))
        return rho, projected

    def theta(rho, delta):
        return np.concatenate([rho, delta, [st.beta[0] for st in states]])

    delta = pool_slopes()
    rho, projected = ar_step(delta)
    cur = theta(rho, delta)
    history = [cur]
    converged = False
    it = 0
    for it in range(1, hc.max_iter + 1):
        # per-series covariate fits on AR-adjusted counts
        for st in states:
            response = rule(st.y[1:] - rho[0] * st.y[:-1])
            st.beta = fit_poisson_log_link(
                response, st.X[1:], start=st.beta if hc.warm_start else None
            ).coefficients
        delta = pool_slopes()
        rho, projected = ar_step(delta)
        new = theta(rho, delta)
        history.append(new)
        change = np.abs(new - cur) / np.maximum(np.abs(cur), 1e-8)
        cur = new
        if not np.all(np.isfinite(change)):
            log.warning("non-finite parameter change at iteration %d", it)
            break
        if float(change.max()) < hc.tol:
            converged = True
            break
    converged = converged and not projected

    r = float(rho[0])
    d0_star = np.array([st.beta[0] for st in states])
    params = MultiParParams(rho=r, delta=delta, delta0_by_series=d0_star - math.log1p(-r))
    actual, predicted, per_metrics = [], [], []
    for st, d0 in zip(states, d0_star):
        m = r * st.y[:-1] + np.exp(st.X[1:] @ np.concatenate([[d0], delta]))
        per_metrics.append(compute_metrics(st.y[1:], m))
        actual.append(st.y[1:])
        predicted.append(m)
    return MultiParFit(
        params=params,
        labels=tuple(st.label for st in states),
        per_series_rho=np.array([st.rho for st in states]),
        delta0_star_by_series=d0_star,
        iterations=it,
        converged=converged,
        projected=projected,
        history=np.array(history),
        metrics=compute_metrics(np.concatenate(actual), np.concatenate(predicted)),
        series_metrics=tuple(per_metrics),
        excluded=tuple(excluded),
    )
