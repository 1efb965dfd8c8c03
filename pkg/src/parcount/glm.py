"""Log-link Poisson regression by iteratively reweighted least squares.

Responses need not be counts.  The backfitting steps regress working
residuals, which may be fractional or slightly negative; the IRLS update
``z = eta + (y - mu) / mu`` with weights ``mu`` is defined for any real
response, and its fixed point solves the Poisson score equations
``X'(y - mu) = 0``.  Step halving monitors the quasi log-likelihood
``sum(y * eta - exp(eta))``, which is concave in the coefficients for any
real ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = ["GlmFit", "SingularDesignError", "fit_poisson_log_link", "quasi_loglik"]

ETA_LIMIT = 50.0
TOL = 1e-10
MAX_ITER = 100
MAX_HALVING = 30


class SingularDesignError(np.linalg.LinAlgError):
    """The design matrix is rank deficient."""


@dataclass(frozen=True)
class GlmFit:
    coefficients: NDArray
    iterations: int
    converged: bool
    fitted_values: NDArray

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> NDArray:
        return self.coefficients[1:]


def quasi_loglik(y: NDArray, eta: NDArray) -> float:
    """Poisson log-likelihood kernel, dropping the ``log y!`` term."""
    return float(np.sum(y * eta - np.exp(eta)))


def _initial_eta(y: NDArray) -> NDArray:
    ybar = float(np.mean(y))
    floor = ybar / 10.0 if ybar > 0 else max(float(np.max(np.abs(y))), 1.0) * 1e-3
    return np.log(np.maximum(y, floor))


def fit_poisson_log_link(
    responses: ArrayLike,
    design: ArrayLike,
    start: ArrayLike | None = None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> GlmFit:
    """Fit ``E[y] = exp(design @ beta)`` by IRLS.

    Parameters
    ----------
    responses : array_like, shape (T,)
        Real responses.  Negative values are allowed (see module notes).
    design : array_like, shape (T, k + 1)
        Design matrix; the first column is conventionally the intercept.
    start : array_like, optional
        Warm-start coefficients.  Without one, the linear predictor is
        initialized at ``log(max(y, mean(y) / 10))``.
    tol : float
        Convergence threshold on the largest absolute coefficient change.
    max_iter : int
        Iteration cap.  Hitting it is reported through ``converged``.

    Raises
    ------
    SingularDesignError
        If the design does not have full column rank.
    """
    y = np.asarray(responses, dtype=float)
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("design must be a (T, k+1) matrix aligned with responses")
    T, q = X.shape
    if T <= q:
        raise ValueError(f"need more observations ({T}) than coefficients ({q})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in GLM inputs")
    if np.linalg.matrix_rank(X) < q:
        raise SingularDesignError("design matrix is rank deficient")

    if start is None:
        eta = _initial_eta(y)
        mu = np.exp(eta)
        beta = _wls(X, mu, eta + (y - mu) / mu)
    else:
        beta = np.asarray(start, dtype=float).copy()
    eta = np.clip(X @ beta, -ETA_LIMIT, ETA_LIMIT)
    beta = beta if np.all(np.abs(X @ beta) <= ETA_LIMIT) else _wls(X, np.exp(eta), eta)
    eta = X @ beta
    ll = quasi_loglik(y, eta)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        proposal = _wls(X, mu, z)
        step = proposal - beta
        new_beta, new_eta, new_ll = proposal, X @ proposal, None
        halvings = 0
        while True:
            if np.all(np.abs(new_eta) <= ETA_LIMIT):
                new_ll = quasi_loglik(y, new_eta)
                if new_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                    break
            if halvings >= MAX_HALVING:
                new_ll = None
                break
            step = step / 2.0
            new_beta = beta + step
            new_eta = X @ new_beta
            halvings += 1
        if new_ll is None:
            break
        change = float(np.max(np.abs(new_beta - beta)))
        beta, eta, ll = new_beta, new_eta, new_ll
        if change < tol:
            converged = True
            break
    return GlmFit(
        coefficients=beta,
        iterations=it,
        converged=converged,
        fitted_values=np.exp(eta),
    )


def _wls(X: NDArray, w: NDArray, z: NDArray) -> NDArray:
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
    return coef
