import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import poisson

from parcount.baseline import (
    BaselineConfig,
    FilterState,
    fit_par_filter_mle,
    gamma_prior_state,
    negbin_logpmf,
    negbin_predictive_loglik,
    pack,
    unpack,
)
from parcount.hybrid import one_step_means
from parcount.model import CountSeries, CovariatePanel, ParParams, draw_covariates, simulate_par

# reference log pmf values from an independent negative binomial implementation
NB_REFERENCE = [-0.8411805915530323, -1.963930431995951, -2.9617963996717114, -5.334950067410661]


def simulated(rho=0.2, delta=0.25, T=500, seed=0):
    rng = np.random.default_rng(seed)
    X = draw_covariates("normal", T + 100, rng)
    truth = ParParams([rho], math.log(100.0), [delta])
    y, _ = simulate_par(truth, CovariatePanel(X), T, rng)
    return truth, y, CovariatePanel(X[100:])


def test_logpmf_reference_values():
    got = negbin_logpmf([0, 3, 10, 120], [1.0, 4.0, 8.0, 100.0], 2.5)
    assert np.allclose(got, NB_REFERENCE, atol=1e-12)


def test_logpmf_geometric_case():
    assert float(negbin_logpmf(0, 1.0, 1.0)) == pytest.approx(-math.log(2.0), abs=1e-12)


def test_poisson_limit():
    truth, y, X = simulated(T=100, seed=1)
    ll = negbin_predictive_loglik(truth, 1e8, y, X)
    means = one_step_means(truth, y, X).means
    pois = float(np.sum(poisson.logpmf(y.values[1:], means)))
    assert ll == pytest.approx(pois, abs=1e-3)


def test_perturbed_rho_lowers_likelihood():
    truth, y, X = simulated(seed=2)
    base = negbin_predictive_loglik(truth, 1e4, y, X)
    for shift in (-0.2, 0.2):
        moved = ParParams(truth.rho + shift, truth.delta0, truth.delta)
        assert negbin_predictive_loglik(moved, 1e4, y, X) < base


def test_nonfinite_loglik_is_minus_infinity():
    params = ParParams([0.2], 1.0, [400.0])
    y = CountSeries(np.arange(30))
    X = CovariatePanel(np.linspace(0, 5, 30))
    assert negbin_predictive_loglik(params, 5.0, y, X) == -math.inf
    with pytest.raises(ValueError):
        negbin_predictive_loglik(params, 0.0, y, X)


class TestFilterState:
    def test_moments(self):
        s = FilterState(shape=4.0, rate=2.0)
        assert s.mean == 2.0 and s.variance == 1.0

    def test_prior_from_mean(self):
        s = gamma_prior_state(mean=50.0, dispersion=5.0)
        assert s.mean == pytest.approx(50.0)
        assert s.variance == pytest.approx(50.0**2 / 5.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            FilterState(0.0, 1.0)


@given(st.integers(1, 4), st.integers(0, 3), st.data())
def test_pack_roundtrip(p, k, data):
    w = np.array(data.draw(st.lists(st.floats(0.05, 1.0), min_size=p + 1, max_size=p + 1)))
    rho = 0.95 * w[:p] / w.sum()
    params = ParParams(rho, data.draw(st.floats(-3, 6)), data.draw(st.lists(st.floats(-2, 2), min_size=k, max_size=k)))
    kappa = data.draw(st.floats(1e-3, 1e6))
    r, d0, d, kap = unpack(pack(params, kappa), p)
    assert np.allclose(r, params.rho, atol=1e-8)
    assert d0 == pytest.approx(params.delta0, abs=1e-12)
    assert np.allclose(d, params.delta, atol=1e-12)
    assert kap == pytest.approx(kappa, rel=1e-8)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=4))
def test_unpack_stays_stationary(z):
    rho = unpack(np.array(z + [0.0, 0.0]), len(z))[0]
    assert np.all(rho >= 1e-6 * 0.99) and rho.sum() < 1.0


class TestFit:
    def test_recovers_and_is_consistent(self):
        truth, y, X = simulated(seed=3)
        fit = fit_par_filter_mle(y, X, 1, warm_start=truth)
        assert fit.converged
        assert fit.params.rho[0] == pytest.approx(0.2, abs=0.08)
        assert fit.params.delta[0] == pytest.approx(0.25, abs=0.05)
        assert fit.loglik == pytest.approx(negbin_predictive_loglik(fit.params, fit.dispersion, y, X), abs=1e-9)

    @given(st.integers(0, 500))
    def test_never_worse_than_any_start(self, seed):
        _, y, X = simulated(T=100, seed=seed)
        fit = fit_par_filter_mle(y, X, 1, BaselineConfig(max_evals=400, seed=seed))
        assert len(fit.start_logliks) == 5
        assert fit.loglik >= max(fit.start_logliks) - 1e-9
        assert fit.loglik >= max(fit.start_results) - 1e-9

    def test_equidispersed_data_pushes_dispersion_up(self):
        big = 0
        for seed in range(20):
            _, y, X = simulated(T=200, seed=100 + seed)
            fit = fit_par_filter_mle(y, X, 1, BaselineConfig(seed=seed))
            big += fit.dispersion > 50
        assert big >= 18

    def test_default_start_without_warm_start(self):
        truth = ParParams([0.3], math.log(20.0))
        y, _ = simulate_par(truth, None, 300, 4)
        fit = fit_par_filter_mle(y, None, 1)
        assert fit.params.rho[0] == pytest.approx(0.3, abs=0.12)
        assert fit.optimizer_evals > 0

    def test_seeded_jitter_is_deterministic(self):
        _, y, X = simulated(T=100, seed=5)
        a = fit_par_filter_mle(y, X, 1, BaselineConfig(seed=9))
        b = fit_par_filter_mle(y, X, 1, BaselineConfig(seed=9))
        assert a.loglik == b.loglik and np.array_equal(a.params.as_vector(), b.params.as_vector())

    def test_too_short(self):
        with pytest.raises(ValueError):
            fit_par_filter_mle(CountSeries(np.arange(10)), None, 1)
