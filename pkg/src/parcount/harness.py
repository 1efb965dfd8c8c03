"""Monte Carlo experiment runner for parameter-recovery studies.

A :class:`ScenarioSpec` fixes the data-generating process and the
estimators to run.  :func:`run_scenario` simulates independent replicates,
fits each one and aggregates over the convergent replicates.  Every
replicate draws from its own seed, derived from the master seed, a stable
hash of the scenario and the replicate index, so results do not depend on
execution order or on how many replicates are requested.

:func:`run_table` runs one of the named scenario grids and sets the
measured aggregates beside the published reference values.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable

import numpy as np

from .baseline import BaselineConfig, fit_par_filter_mle
from .hybrid import fit_par_hybrid
from .metrics import compute_metrics
from .model import (
    BURN_IN,
    COVARIATE_LAWS,
    CovariatePanel,
    MultiParParams,
    ParParams,
    StructuralChangeSpec,
    draw_covariates,
    simulate_multi_par,
    simulate_par,
    simulate_par_with_change,
)
from .multi import MultiParConfig, fit_multi_par

__all__ = [
    "ESTIMATORS",
    "TABLE_IDS",
    "EstimatorSummary",
    "MultiBlock",
    "ReplicateRecord",
    "ScenarioReport",
    "ScenarioSpec",
    "TableReport",
    "format_table",
    "reference_values",
    "relative_bias",
    "run_replicate",
    "run_scenario",
    "raw_one_step_means",
    "run_table",
    "table_scenarios",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("hybrid", "baseline")
LEVEL = 100.0
MIN_LEVEL = 10.0

GRID_RHO = (0.2, 0.6, 0.8, 0.95)
GRID_DELTA = (0.25, 0.5)
GRID_T = (50, 100, 200, 300, 500)
GRID_FRACTION = (0.1, 0.25)
GRID_N = (10, 20, 50)
GRID_SD = (5.0, 10.0, 20.0)


class UndefinedMetricError(ValueError):
    """Relative bias requested for a zero true value."""


def relative_bias(estimates: Iterable[float], truth: float) -> float:
    """Mean absolute deviation from ``truth`` as a percentage of ``|truth|``."""
    est = np.asarray(list(estimates), dtype=float)
    if truth == 0:
        raise UndefinedMetricError("relative bias is undefined for a zero true value")
    if est.size == 0:
        raise ValueError("need at least one estimate")
    return float(100.0 * np.mean(np.abs(est - truth)) / abs(truth))


@dataclass(frozen=True)
class MultiBlock:
    n_series: int
    level_sd: float


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of a simulation design.

    Values outside the standard grids must be flagged ``custom=True``.
    """

    rho: float
    delta: float
    covariate_law: str = "normal"
    T: int = 100
    replicates: int = 200
    estimators: tuple[str, ...] = ("hybrid",)
    change: StructuralChangeSpec | None = None
    multi: MultiBlock | None = None
    level: float = LEVEL
    custom: bool = False

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.covariate_law not in COVARIATE_LAWS:
            raise ValueError(f"unknown covariate law {self.covariate_law!r}")
        if not self.estimators or not set(self.estimators) <= set(ESTIMATORS):
            raise ValueError(f"estimators must be drawn from {ESTIMATORS}")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.multi is not None and self.estimators != ("hybrid",):
            raise ValueError("multi-series scenarios run the hybrid estimator only")
        if self.multi is not None and self.change is not None:
            raise ValueError("structural change is defined for single series only")
        if not self.custom and not self._on_grid():
            raise ValueError(f"scenario {self.key} is off the standard grid; set custom=True")

    def _on_grid(self) -> bool:
        ok = (
            self.rho in GRID_RHO
            and self.delta in GRID_DELTA
            and self.T in GRID_T
            and self.level == LEVEL
        )
        if self.change is not None:
            ok &= self.change.window_fraction in GRID_FRACTION
            ok &= float(self.change.rho_during[0]) in (0.6, 0.95)
        if self.multi is not None:
            ok &= self.multi.n_series in GRID_N and float(self.multi.level_sd) in GRID_SD
        return bool(ok)

    @property
    def key(self) -> str:
        """Canonical text identifying the data-generating process."""
        parts = [
            f"rho={self.rho!r}",
            f"delta={self.delta!r}",
            f"law={self.covariate_law}",
            f"T={self.T}",
            f"level={self.level!r}",
        ]
        if self.change is not None:
            during = ",".join(repr(float(r)) for r in self.change.rho_during)
            parts.append(f"change={during}@{self.change.window_fraction!r}")
        if self.multi is not None:
            parts.append(f"multi={self.multi.n_series}x{float(self.multi.level_sd)!r}")
        return "|".join(parts)

    def replicate_seed(self, master_seed: int, index: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([int(master_seed), zlib.crc32(self.key.encode()), int(index)])


@dataclass(frozen=True)
class ReplicateRecord:
    index: int
    estimator: str
    converged: bool
    rho: float
    delta: float
    delta0: float
    mape: float
    rmse: float
    mad: float
    iterations: int
    error: str = ""


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    replicates: int
    converged: int
    conv_rate: float
    rho_mean: float
    rho_se: float
    rho_rb: float
    delta_mean: float
    delta_se: float
    delta_rb: float
    mape: float
    rmse: float


@dataclass(frozen=True)
class ScenarioReport:
    spec: ScenarioSpec
    master_seed: int
    summaries: dict
    records: tuple[ReplicateRecord, ...] = field(repr=False)

    def summary(self, estimator: str = "hybrid") -> EstimatorSummary:
        return self.summaries[estimator]


def _failed(index: int, estimator: str, exc: Exception) -> ReplicateRecord:
    nan = math.nan
    return ReplicateRecord(index, estimator, False, nan, nan, nan, nan, nan, nan, 0, f"{type(exc).__name__}: {exc}")


def _single_replicate(spec: ScenarioSpec, ss: np.random.SeedSequence, index: int) -> list[ReplicateRecord]:
    data_ss, jitter_ss = ss.spawn(2)
    rng = np.random.default_rng(data_ss)
    truth = ParParams(rho=[spec.rho], delta0=math.log(spec.level), delta=[spec.delta])
    X = draw_covariates(spec.covariate_law, spec.T + BURN_IN, rng)
    if spec.change is None:
        series, _ = simulate_par(truth, CovariatePanel(X), spec.T, rng)
    else:
        series, _ = simulate_par_with_change(truth, spec.change, CovariatePanel(X), spec.T, rng)
    cov = CovariatePanel(X[BURN_IN:])

    out = []
    hyb = None
    try:
        hyb = fit_par_hybrid(series, cov, 1)
    except Exception as exc:  # estimator failures never abort a scenario
        log.warning("hybrid fit failed on replicate %d: %s", index, exc)
        if "hybrid" in spec.estimators:
            out.append(_failed(index, "hybrid", exc))
    if hyb is not None and "hybrid" in spec.estimators:
        m = hyb.metrics
        out.append(ReplicateRecord(
            index, "hybrid", bool(hyb.converged), float(hyb.rho[0]), float(hyb.delta[0]),
            float(hyb.params.delta0), m.mape, m.rmse, m.mad, int(hyb.iterations),
        ))
    if "baseline" in spec.estimators:
        try:
            cfg = BaselineConfig(seed=int(jitter_ss.generate_state(1)[0]))
            fit = fit_par_filter_mle(series, cov, 1, cfg, warm_start=hyb.params if hyb is not None else None)
            if fit.params is None:
                raise ArithmeticError("no finite optimum")
            means = raw_one_step_means(fit.params, series, cov)
            m = compute_metrics(series.values[1:], means)
            out.append(ReplicateRecord(
                index, "baseline", bool(fit.converged), float(fit.params.rho[0]),
                float(fit.params.delta[0]), float(fit.params.delta0), m.mape, m.rmse, m.mad,
                int(fit.optimizer_evals),
            ))
        except Exception as exc:
            out.append(_failed(index, "baseline", exc))
    return out


def raw_one_step_means(params: ParParams, series, cov) -> np.ndarray:
    """One-step means without the positivity check; blow-ups stay as they are."""
    y = series.values.astype(float)
    p = params.p
    lags = np.column_stack([y[p - 1 - i : y.size - 1 - i] for i in range(p)])
    eta = params.delta0 + (cov.rows[p:] @ params.delta if params.k else 0.0)
    with np.errstate(over="ignore"):
        return lags @ params.rho + (1.0 - params.rho.sum()) * np.exp(eta)


def _multi_replicate(spec: ScenarioSpec, ss: np.random.SeedSequence, index: int) -> list[ReplicateRecord]:
    data_ss, sim_ss, boot_ss = ss.spawn(3)
    rng = np.random.default_rng(data_ss)
    N = spec.multi.n_series
    levels = rng.normal(spec.level, spec.multi.level_sd, N)
    while np.any(levels < MIN_LEVEL):
        low = levels < MIN_LEVEL
        levels[low] = rng.normal(spec.level, spec.multi.level_sd, int(low.sum()))
    covs = [CovariatePanel(draw_covariates(spec.covariate_law, spec.T + BURN_IN, rng)) for _ in range(N)]
    truth = MultiParParams(rho=spec.rho, delta=[spec.delta], delta0_by_series=np.log(levels))
    panel = simulate_multi_par(truth, covs, spec.T, sim_ss)
    try:
        fit = fit_multi_par(
            panel,
            [CovariatePanel(c.rows[BURN_IN:]) for c in covs],
            MultiParConfig(seed=int(boot_ss.generate_state(1)[0])),
        )
    except Exception as exc:
        return [_failed(index, "hybrid", exc)]
    m = fit.metrics
    return [ReplicateRecord(
        index, "hybrid", bool(fit.converged), float(fit.rho), float(fit.delta[0]),
        float(np.mean(fit.params.delta0_by_series)), m.mape, m.rmse, m.mad, int(fit.iterations),
    )]


def run_replicate(spec: ScenarioSpec, master_seed: int, index: int) -> list[ReplicateRecord]:
    """Simulate and fit a single replicate; one record per requested estimator."""
    ss = spec.replicate_seed(master_seed, index)
    if spec.multi is not None:
        return _multi_replicate(spec, ss, index)
    return _single_replicate(spec, ss, index)


def _summarize(spec: ScenarioSpec, estimator: str, records: list[ReplicateRecord]) -> EstimatorSummary:
    ok = [r for r in records if r.converged]
    n, k = len(records), len(ok)

    def agg(vals, truth):
        v = np.array(vals, dtype=float)
        if v.size == 0:
            return math.nan, math.nan, math.nan
        se = float(np.std(v, ddof=1)) if v.size > 1 else math.nan
        rb = relative_bias(v, truth) if truth != 0 else math.nan
        return float(np.mean(v)), se, rb

    rho = agg([r.rho for r in ok], spec.rho)
    delta = agg([r.delta for r in ok], spec.delta)
    return EstimatorSummary(
        estimator=estimator,
        replicates=n,
        converged=k,
        conv_rate=100.0 * k / n if n else math.nan,
        rho_mean=rho[0], rho_se=rho[1], rho_rb=rho[2],
        delta_mean=delta[0], delta_se=delta[1], delta_rb=delta[2],
        mape=float(np.mean([r.mape for r in ok])) if k else math.nan,
        rmse=float(np.mean([r.rmse for r in ok])) if k else math.nan,
    )


def run_scenario(
    spec: ScenarioSpec,
    master_seed: int,
    progress: Callable[[int, int], None] | None = None,
) -> ScenarioReport:
    """Run every replicate of ``spec`` and aggregate per estimator.

    Aggregates use convergent replicates only; the convergence rate keeps
    the full count.  Raw records are retained in replicate order.
    """
    records: list[ReplicateRecord] = []
    for i in range(spec.replicates):
        records.extend(run_replicate(spec, master_seed, i))
        if progress is not None:
            progress(i + 1, spec.replicates)
    summaries = {
        est: _summarize(spec, est, [r for r in records if r.estimator == est])
        for est in spec.estimators
    }
    return ScenarioReport(spec, int(master_seed), summaries, tuple(records))


# ---------------------------------------------------------------- tables

TABLE_IDS = ("T2", "T3", "T4", "T5", "T6", "T7", "T8", "T9", "T10", "T12", "T13", "T14")

_TABLE_LAW = {
    "T2": "normal", "T3": "normal", "T4": "normal",
    "T5": "uniform", "T6": "uniform", "T7": "uniform",
    "T8": "poisson", "T9": "poisson", "T10": "poisson",
}
_TABLE_TITLES = {
    "T2": "rho estimates, normal covariate",
    "T3": "delta estimates, normal covariate",
    "T4": "predictive ability and convergence, normal covariate",
    "T5": "rho estimates, uniform covariate",
    "T6": "delta estimates, uniform covariate",
    "T7": "predictive ability and convergence, uniform covariate",
    "T8": "rho estimates, Poisson(5) covariate",
    "T9": "delta estimates, Poisson(5) covariate",
    "T10": "predictive ability and convergence, Poisson(5) covariate",
    "T12": "rho estimates under temporary structural change",
    "T13": "predictive ability under temporary structural change",
    "T14": "multiple-series estimates",
}
CHANGE_PAIRS = ((0.2, 0.6), (0.2, 0.95), (0.6, 0.95), (0.8, 0.95))


def _check_table(table_id: str) -> str:
    tid = table_id.upper()
    if tid not in TABLE_IDS:
        raise ValueError(f"unknown table id {table_id!r}; expected one of {', '.join(TABLE_IDS)}")
    return tid


def _row_key(spec: ScenarioSpec) -> tuple:
    if spec.multi is not None:
        return (spec.multi.n_series, spec.T, float(spec.multi.level_sd))
    if spec.change is not None:
        return (spec.rho, float(spec.change.rho_during[0]), spec.change.window_fraction, spec.T)
    return (spec.rho, spec.delta, spec.T)


def table_scenarios(table_id: str, replicates: int = 200, estimators=None) -> list[ScenarioSpec]:
    """Scenario grid of a named table, in published row order."""
    tid = _check_table(table_id)
    if tid in _TABLE_LAW:
        est = tuple(estimators) if estimators else ESTIMATORS
        return [
            ScenarioSpec(rho, delta, _TABLE_LAW[tid], T, replicates, est)
            for rho in (0.2, 0.6, 0.95)
            for delta in GRID_DELTA
            for T in (100, 200, 500)
        ]
    if tid in ("T12", "T13"):
        # covariate law and effect are fixed choices for the change grid
        return [
            ScenarioSpec(r0, 0.25, "normal", T, replicates, ("hybrid",),
                         change=StructuralChangeSpec([r1], frac))
            for r0, r1 in CHANGE_PAIRS
            for frac in GRID_FRACTION
            for T in (100, 300, 500)
        ]
    return [
        ScenarioSpec(0.6, 0.5, "normal", T, replicates, ("hybrid",), multi=MultiBlock(N, sd))
        for sd in GRID_SD
        for T in (50, 100)
        for N in GRID_N
    ]


@lru_cache(maxsize=None)
def _load_reference() -> tuple:
    text = resources.files("parcount").joinpath("data/reference_tables.tsv").read_text()
    return tuple(csv.DictReader(io.StringIO(text), delimiter="\t"))


def reference_values(table_id: str) -> dict[tuple, dict[str, float]]:
    """Published values of a table keyed like :func:`table_scenarios` rows."""
    tid = _check_table(table_id)
    out: dict[tuple, dict[str, float]] = {}
    for row in _load_reference():
        if row["table"] != tid:
            continue
        if tid == "T14":
            key = (int(row["N"]), int(row["T"]), float(row["sd"]))
        elif tid in ("T12", "T13"):
            key = (float(row["rho"]), float(row["rho_during"]), float(row["fraction"]), int(row["T"]))
        else:
            key = (float(row["rho"]), float(row["delta"]), int(row["T"]))
        out.setdefault(key, {})[row["quantity"]] = float(row["value"])
    return out


def _measure(tid: str, report: ScenarioReport) -> dict[str, float]:
    out = {}
    for est, s in report.summaries.items():
        if tid in ("T2", "T5", "T8", "T12"):
            out.update({f"{est}_est": s.rho_mean, f"{est}_se": s.rho_se, f"{est}_rb": s.rho_rb})
        elif tid in ("T3", "T6", "T9"):
            out.update({f"{est}_est": s.delta_mean, f"{est}_se": s.delta_se, f"{est}_rb": s.delta_rb})
        elif tid == "T13":
            out.update({f"{est}_mape": s.mape, f"{est}_rmse": s.rmse})
        elif tid == "T14":
            out.update({
                "rho_est": s.rho_mean, "rho_se": s.rho_se, "rho_rb": s.rho_rb,
                "delta_est": s.delta_mean, "delta_se": s.delta_se, "delta_rb": s.delta_rb,
                "mape": s.mape, "rmse": s.rmse,
            })
        else:
            out.update({f"{est}_mape": s.mape, f"{est}_rmse": s.rmse, f"{est}_conv": s.conv_rate})
    return out


@dataclass(frozen=True)
class TableRow:
    spec: ScenarioSpec
    measured: dict
    published: dict


@dataclass(frozen=True)
class TableReport:
    table_id: str
    title: str
    master_seed: int
    scale_factor: float
    rows: tuple[TableRow, ...]
    reports: tuple[ScenarioReport, ...] = field(repr=False)


def run_table(
    table_id: str,
    master_seed: int,
    scale_factor: float = 1.0,
    estimators=None,
    progress: Callable[[str], None] | None = None,
) -> TableReport:
    """Run a named scenario grid at ``scale_factor`` times 200 replicates."""
    tid = _check_table(table_id)
    if not 0.0 < scale_factor <= 1.0:
        raise ValueError("scale_factor must lie in (0, 1]")
    reps = max(1, int(round(200 * scale_factor)))
    ref = reference_values(tid)
    rows, reports = [], []
    for spec in table_scenarios(tid, reps, estimators):
        rep = run_scenario(spec, master_seed)
        reports.append(rep)
        rows.append(TableRow(spec, _measure(tid, rep), ref.get(_row_key(spec), {})))
        if progress is not None:
            progress(spec.key)
    return TableReport(tid, _TABLE_TITLES[tid], int(master_seed), float(scale_factor), tuple(rows), tuple(reports))


def _scenario_columns(tid: str) -> list[str]:
    if tid == "T14":
        return ["N", "T", "sd"]
    if tid in ("T12", "T13"):
        return ["rho", "rho_during", "fraction", "T"]
    return ["rho", "delta", "T"]


def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    a = abs(v)
    if a != 0 and (a >= 1e6 or a < 1e-3):
        return f"{v:.4g}"
    return f"{v:.4f}"


def format_table(report: TableReport) -> str:
    """Tab-separated rendering with measured and published columns side by side."""
    quantities: list[str] = []
    for row in report.rows:
        for q in list(row.measured) + list(row.published):
            if q not in quantities:
                quantities.append(q)
    head = _scenario_columns(report.table_id) + ["replicates"]
    for q in quantities:
        head += [q, f"{q}_published"]
    lines = [f"# {report.table_id}: {report.title} (seed {report.master_seed}, scale {report.scale_factor:g})",
             "\t".join(head)]
    for row in report.rows:
        cells = [str(v) for v in _row_key(row.spec)] + [str(row.spec.replicates)]
        for q in quantities:
            cells += [_fmt(row.measured.get(q, math.nan)), _fmt(row.published.get(q, math.nan))]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def records_table(report: ScenarioReport) -> str:
    """Raw replicate records as tab-separated text."""
    names = list(ReplicateRecord.__dataclass_fields__)
    lines = ["\t".join(names)]
    for r in report.records:
        d = asdict(r)
        lines.append("\t".join(repr(d[n]) if isinstance(d[n], float) else str(d[n]) for n in names))
    return "\n".join(lines) + "\n"
