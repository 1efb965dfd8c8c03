"""PAR(p) model types, the dynamic-mean recursion, and data simulators.

The Poisson autoregression of order p draws

    Y_t ~ Poisson(m_t),
    m_t = sum_i rho_i Y_{t-i} + (1 - sum_i rho_i) exp(delta0 + X_t' delta),

which is a convex combination of the lagged counts and a covariate-driven
reversion level.  Absorbing the convex weight into the intercept,
``delta0_star = log(1 - sum(rho)) + delta0``, gives the additive form
``m_t = sum_i rho_i Y_{t-i} + exp(delta0_star + X_t' delta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "COVARIATE_LAWS",
    "CountSeries",
    "CovariatePanel",
    "DomainError",
    "MeanPath",
    "MultiParParams",
    "NonStationaryError",
    "ParParams",
    "StructuralChangeSpec",
    "change_window",
    "draw_covariates",
    "dynamic_mean",
    "dynamic_mean_additive",
    "simulate_multi_par",
    "simulate_par",
    "simulate_par_with_change",
]

BURN_IN = 100
COVARIATE_LAWS = ("uniform", "normal", "poisson")


class DomainError(ArithmeticError):
    """A dynamic mean could not be evaluated (overflow or non-positive)."""


class NonStationaryError(ValueError):
    """Autoregressive coefficients outside the stationary region."""


def _check_rho(rho: NDArray) -> None:
    if np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise NonStationaryError(f"autoregressive coefficients must be >= 0, got {rho}")
    if float(np.sum(rho)) >= 1.0:
        raise NonStationaryError(f"sum of autoregressive coefficients must be < 1, got {rho}")


@dataclass(frozen=True)
class ParParams:
    """Parameters of a PAR(p) model.

    ``rho`` holds the p autoregressive coefficients, ``delta0`` the log
    reversion level and ``delta`` the covariate effects.
    """

    rho: NDArray
    delta0: float
    delta: NDArray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "delta0", float(self.delta0))
        if rho.ndim != 1 or rho.size < 1:
            raise ValueError("rho must hold at least one coefficient")
        _check_rho(rho)
        level = math.exp(self.delta0) if self.delta0 < 700 else math.inf
        if not (np.isfinite(self.delta0) and 0 < level < math.inf):
            raise ValueError(f"reversion level exp(delta0) must be finite, got delta0={self.delta0}")

    @property
    def p(self) -> int:
        return int(self.rho.size)

    @property
    def k(self) -> int:
        return int(self.delta.size)

    @property
    def delta0_star(self) -> float:
        """Intercept of the additive form, ``log(1 - sum(rho)) + delta0``."""
        return math.log1p(-float(np.sum(self.rho))) + self.delta0

    @classmethod
    def from_additive(cls, rho, delta0_star: float, delta=()) -> "ParParams":
        """Build from the additive-form intercept by undoing the convex weight."""
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        return cls(rho=rho, delta0=delta0_star - math.log1p(-float(np.sum(rho))), delta=delta)

    def as_vector(self) -> NDArray:
        return np.concatenate([self.rho, [self.delta0], self.delta])


@dataclass(frozen=True)
class MultiParParams:
    """Shared-coefficient multiple PAR(1) model with per-series intercepts."""

    rho: float
    delta: NDArray
    delta0_by_series: NDArray

    def __post_init__(self):
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))
        object.__setattr__(
            self, "delta0_by_series", np.atleast_1d(np.asarray(self.delta0_by_series, dtype=float))
        )
        if not 0.0 <= self.rho < 1.0:
            raise NonStationaryError(f"shared rho must lie in [0, 1), got {self.rho}")
        if not np.all(np.isfinite(np.exp(self.delta0_by_series))):
            raise ValueError("every reversion level exp(delta0_i) must be finite")

    @property
    def n_series(self) -> int:
        return int(self.delta0_by_series.size)

    def series_params(self, i: int) -> ParParams:
        return ParParams(rho=[self.rho], delta0=self.delta0_by_series[i], delta=self.delta)


@dataclass(frozen=True)
class CountSeries:
    values: NDArray
    label: str = "y"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ValueError("count series must be one-dimensional")
        if v.size and (np.any(v < 0) or np.any(v != np.round(v))):
            raise ValueError(f"series {self.label!r} must hold nonnegative integers")
        object.__setattr__(self, "values", v.astype(np.int64))

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class CovariatePanel:
    """Covariate rows aligned index-for-index with a count series."""

    rows: NDArray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        if r.ndim != 2:
            raise ValueError("covariate rows must form a 2-d array")
        if not np.all(np.isfinite(r)):
            raise ValueError("covariate panel contains non-finite entries")
        object.__setattr__(self, "rows", r)
        names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(r.shape[1]))
        if len(names) != r.shape[1]:
            raise ValueError("one name per covariate column is required")
        object.__setattr__(self, "names", names)

    @classmethod
    def empty(cls, T: int) -> "CovariatePanel":
        return cls(np.zeros((T, 0)))

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    @property
    def k(self) -> int:
        return int(self.rows.shape[1])


@dataclass(frozen=True)
class MeanPath:
    """One-step dynamic means m_t for t = p+1..T (stored from index p)."""

    means: NDArray
    offset: int

    def __post_init__(self):
        m = np.asarray(self.means, dtype=float)
        if np.any(~(m > 0)):
            raise DomainError("dynamic means must be strictly positive")
        object.__setattr__(self, "means", m)


@dataclass(frozen=True)
class StructuralChangeSpec:
    """Temporary switch of the autoregressive coefficients in a centered window."""

    rho_during: NDArray
    window_fraction: float

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho_during, dtype=float))
        _check_rho(rho)
        object.__setattr__(self, "rho_during", rho)
        if not 0.0 <= self.window_fraction < 1.0:
            raise ValueError("window fraction must lie in [0, 1)")


def change_window(T: int, fraction: float) -> tuple[int, int]:
    """1-based inclusive bounds of the centered change window.

    ``L = round(fraction * T)`` and ``start = floor((T - L) / 2) + 1``; an
    empty window is returned as ``(start, start - 1)``.
    """
    L = int(round(fraction * T))
    start = (T - L) // 2 + 1
    return start, start + L - 1


def dynamic_mean(params: ParParams, lagged_counts: ArrayLike, covariate_row: ArrayLike = ()) -> float:
    """Evaluate ``m_t`` in the convex-combination form.

    ``lagged_counts[i]`` is ``Y_{t-1-i}``.
    """
    lags = np.asarray(lagged_counts, dtype=float)
    x = np.asarray(covariate_row, dtype=float)
    if lags.shape != (params.p,):
        raise ValueError(f"expected {params.p} lagged counts, got shape {lags.shape}")
    if x.shape != (params.k,):
        raise ValueError(f"expected {params.k} covariates, got shape {x.shape}")
    eta = params.delta0 + float(x @ params.delta)
    try:
        level = math.exp(eta)
    except OverflowError:
        raise DomainError(f"linear predictor {eta!r} overflows exp") from None
    w = float(np.sum(params.rho))
    m = float(params.rho @ lags) + (1.0 - w) * level
    if not (math.isfinite(m) and m > 0):
        raise DomainError(f"dynamic mean {m!r} is not finite and positive (eta={eta!r})")
    return m


def dynamic_mean_additive(params: ParParams, lagged_counts: ArrayLike, covariate_row: ArrayLike = ()) -> float:
    """Evaluate ``m_t`` in the additive form with ``delta0_star``."""
    lags = np.asarray(lagged_counts, dtype=float)
    x = np.asarray(covariate_row, dtype=float)
    eta = params.delta0_star + float(x @ params.delta)
    try:
        level = math.exp(eta)
    except OverflowError:
        raise DomainError(f"linear predictor {eta!r} overflows exp") from None
    return float(params.rho @ lags) + level


def draw_covariates(law: str, n: int, rng: np.random.Generator, k: int = 1) -> NDArray:
    """Draw an ``(n, k)`` block of i.i.d. covariates from a named law."""
    law = law.lower()
    if law == "uniform":
        return rng.uniform(0.0, 1.0, size=(n, k))
    if law == "normal":
        return rng.standard_normal(size=(n, k))
    if law == "poisson":
        return rng.poisson(5.0, size=(n, k)).astype(float)
    raise ValueError(f"unknown covariate law {law!r}; expected one of {COVARIATE_LAWS}")


def _burn_rows(covariates: CovariatePanel, T: int, burn_in: int) -> NDArray:
    rows = covariates.rows
    if rows.shape[0] == T + burn_in:
        return rows
    if rows.shape[0] == T:
        first = np.repeat(rows[:1], burn_in, axis=0)
        return np.vstack([first, rows])
    raise ValueError(f"covariates must supply T={T} or T+burn_in={T + burn_in} rows, got {rows.shape[0]}")


def _simulate(
    rho_path: NDArray,
    delta0: float,
    delta: NDArray,
    rows: NDArray,
    T: int,
    burn_in: int,
    rng: np.random.Generator,
) -> tuple[NDArray, NDArray]:
    # rho_path: (burn_in + T, p) coefficients in force at each step
    p = rho_path.shape[1]
    total = burn_in + T
    eta = delta0 + rows @ delta if delta.size else np.full(total, delta0)
    if np.any(eta > 700):
        raise DomainError(f"linear predictor {eta.max()!r} overflows exp")
    level = np.exp(eta)
    y = np.empty(p + total, dtype=np.int64)
    y[:p] = round(math.exp(delta0))
    m = np.empty(total)
    for t in range(total):
        r = rho_path[t]
        lags = y[t : t + p][::-1]
        mt = float(r @ lags) + (1.0 - float(r.sum())) * level[t]
        m[t] = mt
        y[p + t] = rng.poisson(mt)
    return y[p + burn_in :], m[burn_in:]


def simulate_par(
    params: ParParams,
    covariates: CovariatePanel | None,
    T: int,
    seed: int | np.random.SeedSequence | np.random.Generator,
    burn_in: int = BURN_IN,
) -> tuple[CountSeries, MeanPath]:
    """Simulate a PAR(p) series of length ``T``.

    The ``p`` pre-sample counts start at ``round(exp(delta0))`` and
    ``burn_in`` steps are discarded.  ``covariates`` supplies either
    ``T + burn_in`` rows (burn-in rows first) or ``T`` rows, in which case the
    first row is recycled through the burn-in.
    """
    return _simulate_with_path(params, None, covariates, T, seed, burn_in)


def simulate_par_with_change(
    params: ParParams,
    change: StructuralChangeSpec,
    covariates: CovariatePanel | None,
    T: int,
    seed: int | np.random.SeedSequence | np.random.Generator,
    burn_in: int = BURN_IN,
) -> tuple[CountSeries, MeanPath]:
    """Simulate with ``change.rho_during`` in force inside the centered window."""
    if change.rho_during.size != params.p:
        raise ValueError("replacement coefficients must match the lag order")
    return _simulate_with_path(params, change, covariates, T, seed, burn_in)


def _simulate_with_path(params, change, covariates, T, seed, burn_in):
    if T < 1 or burn_in < 0:
        raise ValueError("T must be positive and burn_in nonnegative")
    _check_rho(params.rho)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if covariates is None:
        covariates = CovariatePanel.empty(T)
    if covariates.k != params.k:
        raise ValueError(f"params expect {params.k} covariates, panel has {covariates.k}")
    rows = _burn_rows(covariates, T, burn_in)
    rho_path = np.tile(params.rho, (burn_in + T, 1))
    if change is not None:
        start, stop = change_window(T, change.window_fraction)
        if stop >= start:
            rho_path[burn_in + start - 1 : burn_in + stop] = change.rho_during
    y, m = _simulate(rho_path, params.delta0, params.delta, rows, T, burn_in, rng)
    return CountSeries(y), MeanPath(m, offset=0)


def simulate_multi_par(
    params: MultiParParams,
    covariates: Sequence[CovariatePanel | None],
    T: int,
    seed: int | np.random.SeedSequence,
    burn_in: int = BURN_IN,
) -> list[CountSeries]:
    """Simulate N independent series sharing ``rho`` and ``delta``.

    Series ``i`` uses its own child of ``seed``, so adding series never
    changes the earlier ones.
    """
    N = params.n_series
    if len(covariates) != N:
        raise ValueError(f"need one covariate panel per series ({N}), got {len(covariates)}")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    out = []
    for i, (child, cov) in enumerate(zip(ss.spawn(N), covariates)):
        y, _ = simulate_par(params.series_params(i), cov, T, np.random.default_rng(child), burn_in)
        out.append(CountSeries(y.values, label=f"series{i + 1}"))
    return out
