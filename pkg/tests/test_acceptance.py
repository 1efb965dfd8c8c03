"""Acceptance criteria 1-10 at master seed 1.

Each test records a PASS/FAIL line; the lines are printed together at the
end of the session.  Scenario runs are cached so criteria sharing a grid
cell reuse its records.
"""

import datetime as dt
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.stats import norm, poisson

from parcount.baseline import negbin_predictive_loglik
from parcount.cli import main
from parcount.dataio import DailyQuoteRecord, ingest_daily_to_monthly_counts, read_covariate_daily, read_quotes
from parcount.glm import fit_poisson_log_link
from parcount.harness import (
    ScenarioSpec,
    _row_key,
    records_table,
    reference_values,
    run_scenario,
    table_scenarios,
)
from parcount.hybrid import fit_par_hybrid, one_step_means
from parcount.model import (
    BURN_IN,
    CovariatePanel,
    ParParams,
    draw_covariates,
    dynamic_mean,
    dynamic_mean_additive,
    simulate_par,
)
from parcount.multi import MultiParConfig, fit_multi_par
from parcount.spline import fit_smoothing_spline, spline_derivative_at

pytestmark = pytest.mark.acceptance

SEED = 1
FIXTURES = Path(__file__).parent / "fixtures"
RESULTS: dict[str, str] = {}
STATIONARY = [(r, d, T) for r in (0.2, 0.6) for d in (0.25, 0.5) for T in (100, 200, 500)]
FULL_GRID = [(r, d, T) for r in (0.2, 0.6, 0.95) for d in (0.25, 0.5) for T in (100, 200, 500)]

_CACHE: dict = {}


def quote(day, market, o, c):
    return DailyQuoteRecord(dt.date.fromisoformat(day), market, o, c)


def run(spec: ScenarioSpec):
    key = (spec.key, spec.estimators, spec.replicates)
    if key not in _CACHE:
        _CACHE[key] = run_scenario(spec, SEED)
    return _CACHE[key]


def cell(law, rho, delta, T, estimators=("hybrid",)):
    return run(ScenarioSpec(rho, delta, law, T, 200, estimators))


def verdict(name: str, failures: list[str], detail: str = "") -> None:
    """Record one line for the session summary, then assert."""
    line = f"criterion {name}: {'PASS' if not failures else 'FAIL'}"
    if failures:
        line += " - " + "; ".join(failures)
    elif detail:
        line += f" ({detail})"
    RESULTS[name] = line
    print(line)
    assert not failures, line


def within(label, got, want, tol, failures):
    if not abs(got - want) <= tol:
        failures.append(f"{label}: {got:.4f} vs {want} +- {tol}")


def stationary_checks(law, tables, rows, failures):
    t_rho, t_delta, t_pred = (reference_values(t) for t in tables)
    for r, d, T in rows:
        s = cell(law, r, d, T).summary()
        tag = f"{law} {r}/{d}/{T}"
        within(f"{tag} rho", s.rho_mean, t_rho[(r, d, T)]["hybrid_est"], 0.015, failures)
        within(f"{tag} delta", s.delta_mean, t_delta[(r, d, T)]["hybrid_est"], 0.02, failures)
        within(f"{tag} MAPE", s.mape, t_pred[(r, d, T)]["hybrid_mape"], 0.5, failures)
        within(f"{tag} rMSE", s.rmse, t_pred[(r, d, T)]["hybrid_rmse"], 0.5, failures)
        if s.conv_rate < 98:
            failures.append(f"{tag} convergence {s.conv_rate:.1f}%")


def test_criterion_1_normal_stationary_rows():
    failures = []
    stationary_checks("normal", ("T2", "T3", "T4"), STATIONARY, failures)
    verdict("1", failures, f"{len(STATIONARY)} rows")


def test_criterion_2_near_nonstationary_attenuation():
    s = cell("normal", 0.95, 0.25, 500).summary()
    failures = [] if 0.03 <= s.delta_mean <= 0.12 else [f"delta {s.delta_mean:.4f} outside [0.03, 0.12]"]
    verdict("2", failures, f"delta {s.delta_mean:.4f}, relative bias {s.delta_rb:.2f}")


def test_criterion_3_uniform_parity():
    failures = []
    stationary_checks("uniform", ("T5", "T6", "T7"), STATIONARY, failures)
    for r, d, T in FULL_GRID:
        s = cell("uniform", r, d, T).summary()
        if s.conv_rate < 98 and r == 0.95:
            failures.append(f"uniform {r}/{d}/{T} convergence {s.conv_rate:.1f}%")
    verdict("3", failures, "18 rows")


def _poisson(r, d, T):
    ests = ("hybrid", "baseline") if (r, d) == (0.2, 0.5) else ("hybrid",)
    return cell("poisson", r, d, T, ests)


def test_criterion_4a_poisson_hybrid():
    ref = reference_values("T10")
    failures = []
    for r, d, T in FULL_GRID:
        s = _poisson(r, d, T).summary("hybrid")
        tag = f"poisson {r}/{d}/{T}"
        within(f"{tag} MAPE", s.mape, ref[(r, d, T)]["hybrid_mape"], 0.5, failures)
        if s.conv_rate < 98:
            failures.append(f"{tag} convergence {s.conv_rate:.1f}%")
    verdict("4a", failures, "18 rows")


@pytest.mark.xfail(
    strict=True,
    reason="the static-dispersion likelihood stand-in converges on every replicate; "
    "the published filter breakdown is not reproduced",
)
def test_criterion_4b_poisson_baseline_breakdown():
    failures, rates = [], []
    for T in (100, 200, 500):
        s = _poisson(0.2, 0.5, T).summary("baseline")
        rates.append(f"{s.conv_rate:.0f}%")
        if not s.conv_rate < 60:
            failures.append(f"baseline 0.2/0.5/{T} convergence {s.conv_rate:.1f}% (needs < 60%)")
    verdict("4b", failures, "baseline convergence " + ", ".join(rates))


def test_criterion_5_structural_change():
    ref12, ref13 = reference_values("T12"), reference_values("T13")
    failures = []
    by_key = {_row_key(spec): run(spec) for spec in table_scenarios("T12")}
    s = by_key[(0.8, 0.95, 0.1, 500)].summary()
    within("0.8->0.95 10% 500 rho", s.rho_mean, 0.8172, 0.02, failures)
    if not s.rho_rb <= 6:
        failures.append(f"0.8->0.95 relative bias {s.rho_rb:.2f} > 6")
    s = by_key[(0.2, 0.95, 0.25, 500)].summary()
    if not s.rho_rb >= 120:
        failures.append(f"0.2->0.95 25% 500 relative bias {s.rho_rb:.2f} < 120")
    fail_rb = s.rho_rb
    for key, rep in by_key.items():
        within(f"{key} MAPE", rep.summary().mape, ref13[key]["hybrid_mape"], 0.6, failures)
    assert set(by_key) == set(ref12)
    verdict("5", failures, f"failure-mode relative bias {fail_rb:.2f}")


def test_criterion_6_multiple_series():
    spec = next(s for s in table_scenarios("T14") if _row_key(s) == (50, 100, 10.0))
    s = run(spec).summary()
    failures = []
    within("rho", s.rho_mean, 0.5693, 0.015, failures)
    within("delta", s.delta_mean, 0.4626, 0.02, failures)
    within("SE(rho)", s.rho_se, 0.0096, 0.004, failures)
    # one series: the pooled fit is the single-series fit
    truth = ParParams([0.6], math.log(100.0), [0.5])
    rng = np.random.default_rng([SEED, 6])
    X = draw_covariates("normal", 150 + BURN_IN, rng)
    series, _ = simulate_par(truth, CovariatePanel(X), 150, rng)
    cov = CovariatePanel(X[BURN_IN:])
    cfg = MultiParConfig()
    multi = fit_multi_par([series], [cov], cfg)
    single = fit_par_hybrid(series, cov, 1, cfg.hybrid)
    exact = (multi.rho == float(single.rho[0]) and np.array_equal(multi.delta, single.delta)
             and multi.params.delta0_by_series[0] == single.params.delta0 and multi.metrics == single.metrics)
    if not exact:
        failures.append("N=1 fit differs from the single-series fit")
    verdict("6", failures, f"rho {s.rho_mean:.4f}, delta {s.delta_mean:.4f}, SE {s.rho_se:.4f}")


def _folded_mean(bias, sd):
    # E|Z| for Z ~ Normal(bias, sd)
    return sd * math.sqrt(2 / math.pi) * math.exp(-bias**2 / (2 * sd**2)) + bias * (1 - 2 * norm.cdf(-bias / sd))


def test_criterion_7_kernel_properties():
    failures = []
    rng = np.random.default_rng([SEED, 7])

    x = np.sort(rng.uniform(-10, 10, 60))
    for lam in (0.0, 1e-2, 1.0, 1e4):
        fit = fit_smoothing_spline(x, 3 * x - 2, lam)
        if not (np.abs(fit.fitted_values - (3 * x - 2)).max() <= 1e-9
                and abs(spline_derivative_at(fit, 0.3) - 3) <= 1e-9):
            failures.append(f"spline linear reproduction at lambda {lam}")

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(10, 80))
        xs = rng.uniform(-5, 5, n)
        fit = fit_smoothing_spline(xs, np.sin(xs) + rng.normal(0, 0.3, n), "auto")
        q = rng.uniform(xs.min(), xs.max(), 50)
        fd = (fit(q + 1e-5) - fit(q - 1e-5)) / 2e-5
        worst = max(worst, float(np.abs(fit.derivative(q) - fd).max()))
    if worst > 1e-4:
        failures.append(f"spline derivative vs finite differences {worst:.2e}")

    for _ in range(50):
        y = rng.poisson(rng.uniform(0.5, 200), int(rng.integers(2, 60))).astype(float)
        if y.sum() == 0:
            continue
        fit = fit_poisson_log_link(y, np.ones((y.size, 1)))
        if abs(fit.intercept - math.log(y.mean())) > 1e-10:
            failures.append("GLM intercept-only closed form")
            break

    worst = 0.0
    for _ in range(1000):
        p, k = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        rho = rng.dirichlet(np.ones(p + 1))[:p] * 0.98
        params = ParParams(rho, rng.uniform(-2, 6), rng.uniform(-1, 1, k))
        lags, row = rng.integers(0, 500, p), rng.uniform(-3, 3, k)
        a, b = dynamic_mean(params, lags, row), dynamic_mean_additive(params, lags, row)
        worst = max(worst, abs(a - b) / a)
    if worst > 1e-12:
        failures.append(f"mean forms differ by {worst:.2e} relative")

    converged = 0
    for i in range(100):
        r = (0.2, 0.6)[i % 2]
        g = np.random.default_rng([SEED, 70, i])
        X = draw_covariates(("normal", "uniform", "poisson")[i % 3], 200 + BURN_IN, g)
        series, _ = simulate_par(ParParams([r], math.log(100.0), [0.5]), CovariatePanel(X), 200, g)
        fit = fit_par_hybrid(series, CovariatePanel(X[BURN_IN:]))
        if fit.converged:
            converged += 1
            gap = fit.delta0_star - (math.log(1 - float(np.sum(fit.rho))) + fit.params.delta0)
            if abs(gap) > 1e-10:
                failures.append(f"intercept rescaling off by {gap:.1e}")
                break

    # mean absolute deviation should match the folded normal implied by the
    # estimates' own mean and SE; 10% is about two Monte Carlo SDs at 200 draws
    for r, d, T in STATIONARY:
        s = cell("normal", r, d, T).summary()
        for name, truth, mean, sd, rb in (("rho", r, s.rho_mean, s.rho_se, s.rho_rb),
                                          ("delta", d, s.delta_mean, s.delta_se, s.delta_rb)):
            expected = 100 * _folded_mean(mean - truth, sd) / truth
            if abs(rb / expected - 1) > 0.10:
                failures.append(f"{name} relative bias {rb:.2f} vs folded normal {expected:.2f} at {r}/{d}/{T}")
    verdict("7", failures, f"rescaling checked on {converged} converged fits")


def test_criterion_8_baseline_sanity():
    failures = []
    truth = ParParams([0.2], math.log(100.0), [0.25])
    rng = np.random.default_rng([SEED, 8])
    X = draw_covariates("normal", 100 + BURN_IN, rng)
    series, _ = simulate_par(truth, CovariatePanel(X), 100, rng)
    cov = CovariatePanel(X[BURN_IN:])
    ll = negbin_predictive_loglik(truth, 1e8, series, cov)
    pois = float(np.sum(poisson.logpmf(series.values[1:], one_step_means(truth, series, cov).means)))
    if abs(ll - pois) > 1e-3:
        failures.append(f"kappa=1e8 log-likelihood {ll:.6f} vs Poisson {pois:.6f}")

    truth = ParParams([0.6], math.log(100.0), [0.5])
    drops = 0
    for i in range(100):
        g = np.random.default_rng([SEED, 80, i])
        X = draw_covariates("normal", 200 + BURN_IN, g)
        series, _ = simulate_par(truth, CovariatePanel(X), 200, g)
        cov = CovariatePanel(X[BURN_IN:])
        base = negbin_predictive_loglik(truth, 1e8, series, cov)
        moved = [negbin_predictive_loglik(ParParams([0.6 + s], truth.delta0, truth.delta), 1e8, series, cov)
                 for s in (-0.2, 0.2)]
        drops += all(m < base for m in moved)
    if drops < 95:
        failures.append(f"likelihood dropped in {drops} of 100 replicates")
    verdict("8", failures, f"perturbation drop in {drops}/100")


def test_criterion_9_market_pipeline(tmp_path):
    failures = []
    panel = ingest_daily_to_monthly_counts(
        read_quotes(FIXTURES / "daily_quotes.tsv"), read_covariate_daily(FIXTURES / "daily_fx.tsv"), "fx"
    )

    def count(market, month):
        return int(panel.counts[market].values[panel.periods[market].index(month)])

    for market, month, want in (("east", "2011-03", 23), ("north", "2012-06", 0), ("south", "2014-02", 11)):
        if count(market, month) != want:
            failures.append(f"{market} {month} count {count(market, month)} != {want}")
    ties = ingest_daily_to_monthly_counts(
        [quote("2015-03-02", "m", 10.0, 10.5), quote("2015-03-03", "m", 10.5, 10.5),
         quote("2015-03-04", "m", 10.5, 10.2), quote("2015-03-05", "m", 10.2, 10.9)],
        [(dt.date(2015, 3, 2), 1.0)],
    )
    if ties.counts["m"].values.tolist() != [2]:
        failures.append("unchanged close counted as an increase")

    runner = CliRunner()
    out = tmp_path / "ingest"
    ingest = runner.invoke(main, ["ingest", "--quotes", str(FIXTURES / "daily_quotes.tsv"), "--covariate",
                               str(FIXTURES / "daily_fx.tsv"), "--covariate-name", "fx", "--out", str(out)])
    markets = ("east", "north", "south", "west")
    args = ["fit-multi", "--covariates", str(out / "covariates.tsv"), "--out", str(tmp_path / "fit")]
    for m in markets:
        args += ["--series", str(out / f"{m}.tsv")]
    fit = runner.invoke(main, args) if ingest.exit_code == 0 else ingest
    if fit.exit_code != 0:
        failures.append("ingest or fit-multi failed")
    else:
        shared = dict(line.split("\t") for line in (tmp_path / "fit" / "fit.tsv").read_text().splitlines())
        rows = (tmp_path / "fit" / "series_fits.tsv").read_text().splitlines()[1:]
        per = {r.split("\t")[0]: [float(v) for v in r.split("\t")[1:]] for r in rows}
        if not ({"rho", "mape", "rmse", "mad"} <= set(shared) and set(per) == set(markets)
                and all(len(v) == 5 and all(map(math.isfinite, v)) for v in per.values())):
            failures.append("fit-multi output is missing shared or per-market values")
    verdict("9", failures)


def test_criterion_10_determinism():
    failures = []
    for r, d, T in STATIONARY:
        first = cell("normal", r, d, T)
        again = run_scenario(first.spec, SEED)
        if records_table(again) != records_table(first) or repr(again.records) != repr(first.records):
            failures.append(f"{r}/{d}/{T} rerun differs")
    verdict("10", failures, f"{len(STATIONARY)} scenarios rerun")

