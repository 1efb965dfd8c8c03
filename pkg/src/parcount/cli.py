"""Command-line interface.

Every command that takes ``--out DIR`` writes its files there together with
``manifest.json``; ``parcount report DIR --replay`` reruns the recorded
command and checks the outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 data error, 4 estimation failure.
"""

from __future__ import annotations

import functools
import logging
import math
import sys
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Callable

import click
import numpy as np

from .baseline import BaselineConfig, fit_par_filter_mle
from .dataio import (
    DataError,
    RunManifest,
    align,
    file_digest,
    covariate_dataset,
    ingest_daily_to_monthly_counts,
    read_config,
    read_covariate_daily,
    read_dataset,
    read_quotes,
    series_dataset,
    write_dataset,
    write_monthly_panel,
)
from .glm import SingularDesignError
from .harness import (
    ESTIMATORS,
    MultiBlock,
    ScenarioSpec,
    format_table,
    records_table,
    run_scenario,
    raw_one_step_means,
    run_table,
)
from .hybrid import EstimationError, fit_par_hybrid
from .model import (
    BURN_IN,
    COVARIATE_LAWS,
    CovariatePanel,
    DomainError,
    ParParams,
    StructuralChangeSpec,
    draw_covariates,
    simulate_par,
    simulate_par_with_change,
)
from .metrics import compute_metrics
from .multi import MultiParConfig, MultiParError, fit_multi_par

EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 2, 3, 4
ESTIMATION_ERRORS = (EstimationError, MultiParError, SingularDesignError, DomainError, np.linalg.LinAlgError)

log = logging.getLogger("parcount")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class FloatList(click.ParamType):
    """Comma-separated reals, e.g. ``0.3,0.2``."""

    name = "floats"

    def convert(self, value, param, ctx):
        if isinstance(value, (list, tuple)):
            return [float(v) for v in value]
        try:
            return [float(t) for t in str(value).split(",") if t.strip()]
        except ValueError:
            self.fail(f"{value!r} is not a comma-separated list of numbers", param, ctx)


FLOATS = FloatList()


def _load_config(ctx: click.Context, param, value):
    # eager: runs before the other options so config values become their defaults
    if value is None:
        return None
    try:
        cfg = read_config(value)
    except DataError as exc:
        raise click.BadParameter(str(exc), ctx, param) from None
    known = {p.name for p in ctx.command.params}
    ctx.default_map = {k.replace("-", "_"): v for k, v in cfg.items() if k.replace("-", "_") in known}
    return value


config_option = click.option(
    "--config", type=click.Path(dir_okay=False), is_eager=True, expose_value=False,
    callback=_load_config, help="Flat key = value file; explicit flags override it.",
)
seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Master seed.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")


def _guard(fn: Callable) -> Callable:
    """Map library errors onto exit codes with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except ESTIMATION_ERRORS as exc:
            click.echo(f"estimation failed: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_ESTIMATION)
        except ValueError as exc:
            raise click.UsageError(str(exc)) from None

    return wrapper


def _prepare_out(out: str | None) -> Path | None:
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish(command: str, cfg: dict, out: Path | None, outputs: list[str], inputs: list[str]) -> None:
    if out is None:
        return
    manifest = RunManifest(tool_version(), command, cfg, cfg.get("seed"))
    for path in inputs:
        manifest.add_input(path)
    for name in outputs:
        manifest.add_output(out, name)
    manifest.write(out)


def _kv_lines(pairs: list[tuple[str, object]]) -> str:
    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
    return "".join(f"{k}\t{fmt(v)}\n" for k, v in pairs)


# ---------------------------------------------------------------- runners
# Each runner takes the resolved config and an output directory and returns
# (output file names, input paths).  Replay calls them directly.

def run_simulate(cfg: dict, out: Path | None, echo=click.echo):
    rho = cfg["rho"] or [0.0]
    delta = cfg["delta"] or []
    T = cfg["T"]
    truth = ParParams(rho=rho, delta0=cfg["delta0"], delta=delta)
    rng = np.random.default_rng(cfg["seed"])
    X = draw_covariates(cfg["covariate_law"], T + BURN_IN, rng, k=len(delta)) if delta else np.zeros((T + BURN_IN, 0))
    panel = CovariatePanel(X)
    if cfg["change_rho"]:
        change = StructuralChangeSpec(cfg["change_rho"], cfg["change_fraction"])
        series, _ = simulate_par_with_change(truth, change, panel, T, rng)
    else:
        series, _ = simulate_par(truth, panel, T, rng)
    if out is None:
        echo(" ".join(str(v) for v in series.values))
        return [], []
    outputs = ["series.tsv"]
    write_dataset(out / "series.tsv", series_dataset(series))
    if delta:
        write_dataset(out / "covariates.tsv", covariate_dataset(CovariatePanel(X[BURN_IN:])))
        outputs.append("covariates.tsv")
    echo(f"wrote {', '.join(outputs)} to {out}")
    return outputs, []


def _load_pair(series_path: str, cov_path: str | None):
    ds = read_dataset(series_path)
    cov = read_dataset(cov_path) if cov_path else None
    ds, cov = align(ds, cov)
    series = ds.count_series()
    panel = cov.covariate_panel() if cov is not None else None
    return series, panel


def run_fit(cfg: dict, out: Path | None, echo=click.echo):
    series, panel = _load_pair(cfg["series"], cfg["covariates"])
    p = cfg["p"]
    ests = ESTIMATORS if cfg["estimator"] == "both" else (cfg["estimator"],)
    pairs: list[tuple[str, object]] = [("series", series.label), ("T", len(series))]
    hyb = fit_par_hybrid(series, panel, p)
    fits = {}
    if "hybrid" in ests:
        fits["hybrid"] = (hyb.params, hyb.converged, ("iterations", hyb.iterations), hyb.metrics)
    if "baseline" in ests:
        b = fit_par_filter_mle(series, panel, p, BaselineConfig(seed=cfg["seed"]), warm_start=hyb.params)
        if b.params is None:
            raise EstimationError("baseline likelihood has no finite optimum")
        cov = panel if panel is not None else CovariatePanel.empty(len(series))
        m = compute_metrics(series.values[p:], raw_one_step_means(b.params, series, cov))
        fits["baseline"] = (b.params, b.converged, ("evaluations", b.optimizer_evals), m)
        pairs.append(("baseline_dispersion", b.dispersion))
    for name, (params, conv, (work, count), m) in fits.items():
        pairs += [(f"{name}_rho{i + 1}", r) for i, r in enumerate(params.rho)]
        pairs.append((f"{name}_delta0", params.delta0))
        pairs.append((f"{name}_delta0_star", params.delta0_star))
        names = panel.names if panel is not None else ()
        pairs += [(f"{name}_delta_{n}", d) for n, d in zip(names, params.delta)]
        pairs += [(f"{name}_converged", conv), (f"{name}_{work}", count)]
        if m is not None:
            pairs += [(f"{name}_mape", m.mape), (f"{name}_rmse", m.rmse), (f"{name}_mad", m.mad)]
        if not conv:
            log.warning("%s fit did not converge", name)
    text = _kv_lines(pairs)
    echo(text, nl=False)
    inputs = [cfg["series"]] + ([cfg["covariates"]] if cfg["covariates"] else [])
    if out is None:
        return [], inputs
    (out / "fit.tsv").write_text(text)
    return ["fit.tsv"], inputs


def run_fit_multi(cfg: dict, out: Path | None, echo=click.echo):
    series_paths, cov_paths = cfg["series"], cfg["covariates"]
    if len(series_paths) < 1:
        raise ValueError("give at least one --series file")
    if cov_paths and len(cov_paths) not in (1, len(series_paths)):
        raise ValueError("give one shared --covariates file or one per series")
    panel, covs = [], []
    for i, sp in enumerate(series_paths):
        cp = (cov_paths[0] if len(cov_paths) == 1 else cov_paths[i]) if cov_paths else None
        s, c = _load_pair(sp, cp)
        panel.append(s)
        covs.append(c)
    fit = fit_multi_par(panel, covs, MultiParConfig(seed=cfg["seed"]))
    pairs: list[tuple[str, object]] = [("series", len(fit.labels)), ("rho", fit.rho)]
    names = covs[0].names if covs[0] is not None else ()
    pairs += [(f"delta_{n}", d) for n, d in zip(names, fit.delta)]
    pairs += [("converged", fit.converged), ("iterations", fit.iterations)]
    pairs += [("mape", fit.metrics.mape), ("rmse", fit.metrics.rmse), ("mad", fit.metrics.mad)]
    text = _kv_lines(pairs)
    rows = ["label\tdelta0\tdelta0_star\tmape\trmse\tmad"]
    for lab, d0, d0s, m in zip(fit.labels, fit.params.delta0_by_series, fit.delta0_star_by_series, fit.series_metrics):
        rows.append("\t".join([lab] + [repr(float(v)) for v in (d0, d0s, m.mape, m.rmse, m.mad)]))
    table = "\n".join(rows) + "\n"
    for lab in fit.excluded:
        echo(f"excluded\t{lab}")
    echo(text + table, nl=False)
    if not fit.converged:
        log.warning("pooled fit did not converge")
    inputs = list(series_paths) + list(cov_paths)
    if out is None:
        return [], inputs
    (out / "fit.tsv").write_text(text)
    (out / "series_fits.tsv").write_text(table)
    return ["fit.tsv", "series_fits.tsv"], inputs


def _summary_table(report) -> str:
    fields = ["estimator", "replicates", "converged", "conv_rate", "rho_mean", "rho_se", "rho_rb",
              "delta_mean", "delta_se", "delta_rb", "mape", "rmse"]
    lines = ["\t".join(fields)]
    for s in report.summaries.values():
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in (getattr(s, f) for f in fields)))
    return f"# {report.spec.key} seed={report.master_seed}\n" + "\n".join(lines) + "\n"


def run_experiment(cfg: dict, out: Path | None, echo=click.echo):
    rho = cfg["rho"]
    delta = cfg["delta"]
    if len(rho) != 1 or len(delta) != 1:
        raise ValueError("experiment takes a single --rho and a single --delta")
    change = StructuralChangeSpec(cfg["change_rho"], cfg["change_fraction"]) if cfg["change_rho"] else None
    multi = MultiBlock(cfg["n_series"], cfg["level_sd"]) if cfg["n_series"] else None
    ests = ESTIMATORS if cfg["estimator"] == "both" else (cfg["estimator"],)
    spec = ScenarioSpec(rho[0], delta[0], cfg["covariate_law"], cfg["T"], cfg["replicates"], ests,
                        change=change, multi=multi, custom=True)
    report = run_scenario(spec, cfg["seed"])
    summary = _summary_table(report)
    echo(summary, nl=False)
    if out is None:
        return [], []
    (out / "summary.tsv").write_text(summary)
    (out / "records.tsv").write_text(records_table(report))
    return ["summary.tsv", "records.tsv"], []


def run_run_table(cfg: dict, out: Path | None, echo=click.echo):
    ests = None if cfg["estimator"] == "both" else (cfg["estimator"],)
    report = run_table(cfg["table"], cfg["seed"], cfg["scale"], ests,
                       progress=lambda key: click.echo(f"done {key}", err=True))
    text = format_table(report)
    echo(text, nl=False)
    if out is None:
        return [], []
    (out / "table.tsv").write_text(text)
    recs = []
    for rep in report.reports:
        body = records_table(rep).splitlines()
        if not recs:
            recs.append("scenario\t" + body[0])
        recs += [f"{rep.spec.key}\t{line}" for line in body[1:]]
    (out / "records.tsv").write_text("\n".join(recs) + "\n")
    return ["table.tsv", "records.tsv"], []


def run_ingest(cfg: dict, out: Path | None, echo=click.echo):
    quotes = read_quotes(cfg["quotes"])
    cov = read_covariate_daily(cfg["covariate"])
    panel = ingest_daily_to_monthly_counts(quotes, cov, cfg["covariate_name"])
    if out is None:
        raise ValueError("ingest needs --out")
    outputs = write_monthly_panel(panel, out)
    for market, s in panel.counts.items():
        echo(f"{market}\t{len(s)} months\t{int(s.values.sum())} up days")
    return outputs, [cfg["quotes"], cfg["covariate"]]


RUNNERS = {
    "simulate": run_simulate,
    "fit": run_fit,
    "fit-multi": run_fit_multi,
    "experiment": run_experiment,
    "run-table": run_run_table,
    "ingest": run_ingest,
}


PATH_KEYS = ("series", "covariates", "quotes", "covariate")


def _absolute(value):
    if isinstance(value, (list, tuple)):
        return [str(Path(v).resolve()) for v in value]
    return str(Path(value).resolve()) if value else value


def _execute(command: str, cfg: dict, out: str | None) -> None:
    # absolute input paths keep the manifest replayable from any directory
    cfg = {k: _absolute(v) if k in PATH_KEYS else v for k, v in cfg.items()}
    cfg["out"] = out
    path = _prepare_out(out)
    outputs, inputs = RUNNERS[command](cfg, path)
    _finish(command, cfg, path, outputs, inputs)


# ---------------------------------------------------------------- commands

@click.group()
@click.version_option(tool_version(), prog_name="parcount")
@click.option("-v", "--verbose", is_flag=True, help="Log progress and warnings.")
def main(verbose: bool):
    """Estimation and simulation tools for Poisson autoregressive count series."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


law_option = click.option("--covariate-law", type=click.Choice(COVARIATE_LAWS), default="normal", show_default=True)
estimator_option = click.option("--estimator", type=click.Choice(["hybrid", "baseline", "both"]),
                                default="hybrid", show_default=True)


@main.command()
@config_option
@click.option("--rho", type=FLOATS, default="0", show_default=True, help="Autoregressive coefficients, comma-separated.")
@click.option("--delta", type=FLOATS, default="", help="Covariate effects, comma-separated; empty for none.")
@click.option("--delta0", type=float, default=math.log(100.0), show_default=True, help="Reversion log-level.")
@click.option("--T", "T", type=click.IntRange(1), default=100, show_default=True)
@law_option
@click.option("--change-rho", type=FLOATS, default="", help="Coefficients in force inside the change window.")
@click.option("--change-fraction", type=click.FloatRange(0, 1, max_open=True), default=0.0)
@seed_option
@out_option
@_guard
def simulate(out, **cfg):
    """Simulate one series (and its covariates)."""
    _execute("simulate", cfg, out)


@main.command()
@config_option
@click.option("--series", type=click.Path(dir_okay=False), required=True)
@click.option("--covariates", type=click.Path(dir_okay=False), default=None)
@click.option("--p", type=click.IntRange(1), default=1, show_default=True)
@estimator_option
@seed_option
@out_option
@_guard
def fit(out, **cfg):
    """Fit one series with the hybrid and/or likelihood estimator."""
    _execute("fit", cfg, out)


@main.command("fit-multi")
@config_option
@click.option("--series", type=click.Path(dir_okay=False), multiple=True, required=True)
@click.option("--covariates", type=click.Path(dir_okay=False), multiple=True)
@seed_option
@out_option
@_guard
def fit_multi(out, series, covariates, seed):
    """Fit several series sharing autoregression and covariate effects."""
    _execute("fit-multi", {"series": list(series), "covariates": list(covariates), "seed": seed}, out)


@main.command()
@config_option
@click.option("--rho", type=FLOATS, required=True)
@click.option("--delta", type=FLOATS, required=True)
@click.option("--T", "T", type=click.IntRange(1), default=100, show_default=True)
@law_option
@click.option("--replicates", type=click.IntRange(1), default=200, show_default=True)
@estimator_option
@click.option("--change-rho", type=FLOATS, default="")
@click.option("--change-fraction", type=click.FloatRange(0, 1, max_open=True), default=0.0)
@click.option("--n-series", type=click.IntRange(0), default=0, help="Series per replicate; 0 for a single series.")
@click.option("--level-sd", type=click.FloatRange(0), default=10.0, show_default=True)
@seed_option
@out_option
@_guard
def experiment(out, **cfg):
    """Run one Monte Carlo scenario."""
    _execute("experiment", cfg, out)


@main.command("run-table")
@config_option
@click.argument("table")
@click.option("--scale", type=click.FloatRange(0, 1, min_open=True), default=1.0, show_default=True,
              help="Fraction of the 200 replicates per row.")
@click.option("--estimator", type=click.Choice(["hybrid", "baseline", "both"]), default="both", show_default=True)
@seed_option
@out_option
@_guard
def run_table_cmd(out, table, **cfg):
    """Run a named scenario grid and compare with the published values."""
    _execute("run-table", {"table": table, **cfg}, out)


@main.command()
@config_option
@click.option("--quotes", type=click.Path(dir_okay=False), required=True, help="Daily date/market/open/close file.")
@click.option("--covariate", type=click.Path(dir_okay=False), required=True, help="Daily date/value file.")
@click.option("--covariate-name", default="x1", show_default=True)
@out_option
@_guard
def ingest(out, **cfg):
    """Build monthly up-day counts per market and the monthly covariate."""
    _execute("ingest", cfg, out)


@main.command()
@click.argument("directory", type=click.Path(file_okay=False, exists=True))
@click.option("--replay", is_flag=True, help="Rerun the recorded command and compare outputs.")
@_guard
def report(directory, replay):
    """Print a run directory's outputs after checking their digests."""
    directory = Path(directory)
    manifest = RunManifest.read(directory)
    stale = manifest.verify(directory)
    if stale:
        raise DataError(f"outputs changed since the run: {', '.join(stale)}")
    click.echo(f"# {manifest.command} (parcount {manifest.tool_version}, seed {manifest.master_seed}, "
               f"finished {manifest.finished})")
    for name in manifest.outputs:
        if name.endswith(".tsv") and name != "records.tsv":
            click.echo(f"## {name}")
            click.echo((directory / name).read_text(), nl=False)
    if not replay:
        return
    if manifest.command not in RUNNERS:
        raise DataError(f"manifest command {manifest.command!r} cannot be replayed")
    moved = [p for p, d in manifest.inputs.items() if not Path(p).exists() or file_digest(p) != d]
    if moved:
        raise DataError(f"inputs missing or changed since the run: {', '.join(moved)}")
    with tempfile.TemporaryDirectory() as tmp:
        cfg = {**manifest.config, "out": tmp}
        RUNNERS[manifest.command](cfg, Path(tmp), echo=lambda *a, **k: None)
        fresh = RunManifest(manifest.tool_version, manifest.command, cfg, manifest.master_seed)
        for name in manifest.outputs:
            fresh.add_output(Path(tmp), name)
    diff = [n for n in manifest.outputs if fresh.outputs[n] != manifest.outputs[n]]
    if diff:
        raise DataError(f"replay differs in {', '.join(diff)}")
    click.echo(f"replay identical: {len(manifest.outputs)} outputs")


if __name__ == "__main__":
    main()
