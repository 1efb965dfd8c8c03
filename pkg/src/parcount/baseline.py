"""Likelihood baseline: negative binomial one-step predictive MLE.

A gamma prior on the dynamic mean, conjugate to the Poisson measurement,
makes the one-step-ahead distribution of ``Y_t`` negative binomial.  This
module uses that predictive with the PAR(p) transition for its mean and a
single static dispersion ``kappa`` (variance ``m + m**2 / kappa``), and
maximizes the resulting likelihood with a derivative-free simplex search
from several starts.  It is the comparator for the hybrid estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logit

from .model import CountSeries, CovariatePanel, ParParams

__all__ = [
    "BaselineConfig",
    "BaselineFit",
    "FilterState",
    "gamma_prior_state",
    "negbin_logpmf",
    "negbin_predictive_loglik",
    "fit_par_filter_mle",
    "pack",
    "unpack",
]

RHO_EPS = 1e-6


@dataclass(frozen=True)
class FilterState:
    """Gamma prior on the dynamic mean, ``m_t | Y_{t-1} ~ Gamma(shape, rate)``."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("gamma shape and rate must be positive")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def variance(self) -> float:
        return self.shape / self.rate**2


def gamma_prior_state(mean: float, dispersion: float) -> FilterState:
    """Prior with the given mean whose Poisson mixture has size ``dispersion``."""
    return FilterState(shape=dispersion, rate=dispersion / mean)


@dataclass(frozen=True)
class BaselineConfig:
    n_starts: int = 5
    max_evals: int = 2000
    fatol: float = 1e-8
    jitter: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class BaselineFit:
    params: ParParams | None
    dispersion: float
    loglik: float
    optimizer_evals: int
    converged: bool
    start_logliks: tuple[float, ...] = ()
    start_results: tuple[float, ...] = ()


def _log_rising(y: NDArray, size) -> NDArray:
    """``log Gamma(y + size) - log Gamma(size) - y * log(size)``, stable for large size."""
    size = np.float64(size)
    with np.errstate(invalid="ignore", over="ignore"):
        direct = gammaln(y + size) - gammaln(size) - y * np.log(size)
    big = size > 1e4 * np.maximum(y, 1.0)
    if not np.any(big):
        return direct
    # sum_{j<y} log1p(j / size) expanded in power sums of j
    n = y - 1.0
    s1 = n * (n + 1.0) / 2.0
    s2 = n * (n + 1.0) * (2.0 * n + 1.0) / 6.0
    s4 = s2 * (3.0 * n * n + 3.0 * n - 1.0) / 5.0
    with np.errstate(over="ignore"):
        series = s1 / size - s2 / (2.0 * size**2) + s1 * s1 / (3.0 * size**3) - s4 / (4.0 * size**4)
    return np.where(big, series, direct)


def negbin_logpmf(y: NDArray, mean: NDArray, size: float) -> NDArray:
    """Log pmf of the negative binomial with given mean and size.

    Accurate into the Poisson limit (size up to the float range).
    """
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    return _log_rising(y, size) - gammaln(y + 1.0) + y * np.log(mean) - (size + y) * np.log1p(mean / size)


def _means(rho: NDArray, delta0: float, delta: NDArray, y: NDArray, X: NDArray) -> NDArray:
    p = rho.size
    T = y.shape[0]
    lags = np.column_stack([y[p - 1 - i : T - 1 - i] for i in range(p)])
    with np.errstate(over="ignore", invalid="ignore"):
        eta = delta0 + (X[p:] @ delta if delta.size else 0.0)
        return lags @ rho + (1.0 - rho.sum()) * np.exp(eta)


def _loglik(rho, delta0, delta, kappa, y, X) -> float:
    p = rho.size
    m = _means(rho, delta0, delta, y, X)
    with np.errstate(all="ignore"):
        ll = float(np.sum(negbin_logpmf(y[p:], m, kappa)))
    return ll if math.isfinite(ll) else -math.inf


def negbin_predictive_loglik(
    params: ParParams,
    dispersion: float,
    series: CountSeries,
    covariates: CovariatePanel | None,
) -> float:
    """Sum of one-step negative binomial log predictives for t = p+1..T.

    Returns ``-inf`` when any term is not finite.
    """
    if not dispersion > 0:
        raise ValueError("dispersion must be positive")
    y = series.values.astype(float)
    X = covariates.rows if covariates is not None else np.zeros((y.size, 0))
    return _loglik(params.rho, params.delta0, params.delta, float(dispersion), y, X)


def _rho_to_free(rho: NDArray) -> NDArray:
    span = 1.0 - 2.0 * RHO_EPS if rho.size == 1 else 1.0 - (rho.size + 1) * RHO_EPS
    if rho.size == 1:
        return logit((rho - RHO_EPS) / span)
    share = (rho - RHO_EPS) / span
    rest = 1.0 - share.sum()
    return np.log(share) - np.log(rest)


def _free_to_rho(z: NDArray) -> NDArray:
    if z.size == 1:
        return RHO_EPS + (1.0 - 2.0 * RHO_EPS) * expit(z)
    shift = max(0.0, float(z.max()))
    e = np.exp(z - shift)
    share = e / (math.exp(-shift) + e.sum())
    return RHO_EPS + (1.0 - (z.size + 1) * RHO_EPS) * share


def pack(params: ParParams, dispersion: float) -> NDArray:
    """Map natural parameters to the unconstrained optimizer coordinates."""
    return np.concatenate([_rho_to_free(params.rho), [params.delta0], params.delta, [math.log(dispersion)]])


def unpack(theta: NDArray, p: int) -> tuple[NDArray, float, NDArray, float]:
    """Inverse of :func:`pack`: ``(rho, delta0, delta, dispersion)``."""
    theta = np.asarray(theta, dtype=float)
    rho = _free_to_rho(theta[:p])
    return rho, float(theta[p]), theta[p + 1 : -1].copy(), float(np.exp(min(theta[-1], 700.0)))


def _default_start(y: NDArray, p: int, k: int) -> tuple[ParParams, float]:
    level = max(float(np.mean(y)), 1e-3)
    return ParParams(rho=np.full(p, 0.5 / p), delta0=math.log(level), delta=np.zeros(k)), 10.0


def fit_par_filter_mle(
    series: CountSeries,
    covariates: CovariatePanel | None,
    p: int = 1,
    config: BaselineConfig | None = None,
    warm_start: ParParams | None = None,
) -> BaselineFit:
    """Maximize the negative binomial predictive likelihood.

    Nelder-Mead runs from ``n_starts`` points: the warm start (for instance a
    hybrid fit) when supplied, or a moment-based default, plus jittered
    copies.  The best finite optimum is returned.  The fit counts as
    converged when at least one start terminated on the objective-spread
    tolerance within its evaluation budget, away from the nonstationary
    edge.
    """
    cfg = config or BaselineConfig()
    y = series.values.astype(float)
    T = y.size
    X = covariates.rows if covariates is not None else np.zeros((T, 0))
    k = X.shape[1]
    if T < max(20, 5 * (p + k)):
        raise ValueError(f"series too short for p={p}, k={k}: T={T}")

    if warm_start is not None:
        base = pack(ParParams(np.clip(warm_start.rho, 0.01, None) * min(1.0, 0.98 / max(np.sum(warm_start.rho), 1e-12)),
                              warm_start.delta0, warm_start.delta), 10.0)
    else:
        base = pack(*_default_start(y, p, k))
    rng = np.random.default_rng(cfg.seed)
    starts = [base]
    for _ in range(cfg.n_starts - 1):
        jit = rng.normal(0.0, cfg.jitter, size=base.size)
        jit[-1] *= 5.0
        starts.append(base + jit)

    def objective(theta):
        rho, d0, d, kappa = unpack(theta, p)
        ll = _loglik(rho, d0, d, kappa, y, X)
        return -ll if math.isfinite(ll) else 1e300

    best = None
    evals = 0
    any_ok = False
    start_ll, end_ll = [], []
    for s in starts:
        f0 = objective(s)
        start_ll.append(-f0 if f0 < 1e300 else -math.inf)
        res = minimize(
            objective,
            s,
            method="Nelder-Mead",
            options={"maxfev": cfg.max_evals, "fatol": cfg.fatol, "xatol": np.inf},
        )
        evals += int(res.nfev)
        fval = float(res.fun)
        end_ll.append(-fval if fval < 1e300 else -math.inf)
        if fval >= 1e300:
            continue
        rho = unpack(res.x, p)[0]
        edge = float(rho.sum()) > 1.0 - 1e-4
        if res.success and not edge:
            any_ok = True
        if best is None or fval < best.fun:
            best = res
    if best is None:
        return BaselineFit(None, math.nan, -math.inf, evals, False, tuple(start_ll), tuple(end_ll))
    rho, d0, d, kappa = unpack(best.x, p)
    params = ParParams(rho=rho, delta0=d0, delta=d)
    return BaselineFit(
        params=params,
        dispersion=kappa,
        loglik=-float(best.fun),
        optimizer_evals=evals,
        converged=any_ok,
        start_logliks=tuple(start_ll),
        start_results=tuple(end_ll),
    )
