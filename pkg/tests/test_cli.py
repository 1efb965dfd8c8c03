import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from parcount.cli import EXIT_DATA, EXIT_ESTIMATION, EXIT_USAGE, main

FIXTURES = Path(__file__).parent / "fixtures"
MARKETS = ("east", "north", "south", "west")


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args])


def kv(text):
    return dict(line.split("\t", 1) for line in text.splitlines() if "\t" in line)


def count_file(path, values):
    path.write_text("t:index\ty:count\n" + "".join(f"{i + 1}\t{v}\n" for i, v in enumerate(values)))
    return path


class TestSimulate:
    def test_deterministic_given_seed(self, runner):
        args = ("simulate", "--rho", "0", "--delta0", "4.60517", "--T", "100", "--seed", "7")
        a, b = invoke(runner, *args), invoke(runner, *args)
        assert a.exit_code == 0 and a.output == b.output
        values = [int(v) for v in a.output.split()]
        assert len(values) == 100 and 80 < sum(values) / 100 < 120
        assert invoke(runner, *args[:-1], "8").output != a.output

    def test_writes_series_and_covariates(self, runner, tmp_path):
        res = invoke(runner, "simulate", "--rho", "0.3", "--delta", "0.5", "--T", "50", "--out", tmp_path)
        assert res.exit_code == 0
        assert (tmp_path / "series.tsv").read_text().count("\n") == 51
        assert (tmp_path / "covariates.tsv").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert set(manifest["outputs"]) == {"series.tsv", "covariates.tsv"}

    def test_config_file_and_flag_override(self, runner, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("rho = 0.5\nT = 5\n")
        base = invoke(runner, "simulate", "--T", "5", "--seed", "7").output
        from_cfg = invoke(runner, "simulate", "--config", cfg, "--seed", "7")
        assert from_cfg.exit_code == 0
        assert len(from_cfg.output.split()) == 5 and from_cfg.output != base
        overridden = invoke(runner, "simulate", "--config", cfg, "--rho", "0", "--seed", "7")
        assert overridden.output == base


class TestExitCodes:
    def test_usage(self, runner):
        assert invoke(runner, "simulate", "--rho", "x").exit_code == EXIT_USAGE
        assert invoke(runner, "fit").exit_code == EXIT_USAGE

    def test_short_series_is_usage(self, runner, tmp_path):
        res = invoke(runner, "fit", "--series", count_file(tmp_path / "s.tsv", [3, 4]))
        assert res.exit_code == EXIT_USAGE and "too short" in res.output

    def test_data(self, runner, tmp_path):
        res = invoke(runner, "fit", "--series", tmp_path / "missing.tsv")
        assert res.exit_code == EXIT_DATA and "no such file" in res.output
        bad = tmp_path / "bad.tsv"
        bad.write_text("t:index\ty:count\n1\t-4\n")
        assert invoke(runner, "fit", "--series", bad).exit_code == EXIT_DATA
        cfg = tmp_path / "c.cfg"
        cfg.write_text("speed = 3\n")
        assert invoke(runner, "simulate", "--config", cfg).exit_code == EXIT_USAGE

    def test_estimation(self, runner, tmp_path):
        series = count_file(tmp_path / "s.tsv", [5 if i % 2 else 0 for i in range(40)])
        cov = tmp_path / "c.tsv"
        # a constant covariate duplicates the intercept
        cov.write_text("t:index\tx:covariate\n" + "".join(f"{i + 1}\t1.0\n" for i in range(40)))
        res = invoke(runner, "fit", "--series", series, "--covariates", cov)
        assert res.exit_code == EXIT_ESTIMATION
        assert "SingularDesignError" in res.output


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    res = CliRunner().invoke(main, ["simulate", "--rho", "0.3", "--delta", "0.5", "--T", "100", "--seed", "3",
                                    "--out", str(out)])
    assert res.exit_code == 0
    return out


class TestFit:
    def test_both_estimators(self, runner, simulated):
        res = invoke(runner, "fit", "--series", simulated / "series.tsv", "--covariates", simulated / "covariates.tsv",
                     "--estimator", "both")
        assert res.exit_code == 0
        out = kv(res.output)
        for est in ("hybrid", "baseline"):
            assert 0 <= float(out[f"{est}_rho1"]) < 1
            assert float(out[f"{est}_delta_x1"]) == pytest.approx(0.5, abs=0.25)
            assert float(out[f"{est}_mape"]) > 0
            assert out[f"{est}_converged"] == "True"
        assert float(out["baseline_dispersion"]) > 0

    def test_report_and_replay(self, runner, simulated, tmp_path):
        run = tmp_path / "run"
        res = invoke(runner, "fit", "--series", simulated / "series.tsv", "--covariates", simulated / "covariates.tsv",
                     "--out", run)
        assert res.exit_code == 0
        rep = invoke(runner, "report", run, "--replay")
        assert rep.exit_code == 0
        assert "## fit.tsv" in rep.output and "replay identical: 1 outputs" in rep.output
        (run / "fit.tsv").write_text("tampered\n")
        assert invoke(runner, "report", run).exit_code == EXIT_DATA


@pytest.fixture(scope="module")
def ingested(tmp_path_factory):
    out = tmp_path_factory.mktemp("ingest")
    res = CliRunner().invoke(main, ["ingest", "--quotes", str(FIXTURES / "daily_quotes.tsv"),
                                    "--covariate", str(FIXTURES / "daily_fx.tsv"), "--covariate-name", "fx",
                                    "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out, res.output


class TestMarketPipeline:
    def test_ingest_summary(self, ingested):
        out, text = ingested
        assert "west\t71 months" in text
        assert {p.name for p in out.iterdir()} >= {f"{m}.tsv" for m in MARKETS} | {"covariates.tsv", "manifest.json"}

    def test_fit_multi_reports_shared_and_per_market_values(self, runner, ingested, tmp_path):
        out, _ = ingested
        args = ["fit-multi"]
        for m in MARKETS:
            args += ["--series", out / f"{m}.tsv"]
        args += ["--covariates", out / "covariates.tsv", "--out", tmp_path / "fit"]
        res = invoke(runner, *args)
        assert res.exit_code == 0, res.output
        shared = kv((tmp_path / "fit" / "fit.tsv").read_text())
        assert 0 <= float(shared["rho"]) < 1
        assert {"delta_fx", "mape", "rmse", "mad"} <= set(shared)
        rows = (tmp_path / "fit" / "series_fits.tsv").read_text().splitlines()
        assert rows[0].split("\t") == ["label", "delta0", "delta0_star", "mape", "rmse", "mad"]
        assert [r.split("\t")[0] for r in rows[1:]] == list(MARKETS)
        assert invoke(runner, "report", tmp_path / "fit", "--replay").exit_code == 0

    def test_mismatched_covariate_count(self, runner, ingested):
        out, _ = ingested
        args = ["fit-multi", "--series", out / "east.tsv", "--series", out / "west.tsv", "--series", out / "north.tsv",
                "--covariates", out / "covariates.tsv", "--covariates", out / "covariates.tsv"]
        assert invoke(runner, *args).exit_code == EXIT_USAGE


class TestExperiments:
    def test_experiment_summary(self, runner, tmp_path):
        res = invoke(runner, "experiment", "--rho", "0.2", "--delta", "0.25", "--replicates", "3",
                     "--estimator", "both", "--seed", "4", "--out", tmp_path)
        assert res.exit_code == 0
        lines = (tmp_path / "summary.tsv").read_text().splitlines()
        assert lines[0].startswith("# ") and "seed=4" in lines[0]
        assert [ln.split("\t")[0] for ln in lines[2:]] == ["hybrid", "baseline"]
        assert (tmp_path / "records.tsv").read_text().count("\n") == 7
        assert invoke(runner, "report", tmp_path, "--replay").exit_code == 0

    def test_experiment_rejects_vectors(self, runner):
        assert invoke(runner, "experiment", "--rho", "0.2,0.1", "--delta", "0.25").exit_code == EXIT_USAGE

    def test_run_table_small_scale(self, runner, tmp_path):
        res = invoke(runner, "run-table", "T13", "--scale", "0.005", "--estimator", "hybrid", "--out", tmp_path)
        assert res.exit_code == 0
        table = (tmp_path / "table.tsv").read_text().splitlines()
        assert table[0].startswith("# T13") and len(table) == 26
        recs = (tmp_path / "records.tsv").read_text().splitlines()
        assert recs[0].startswith("scenario\t") and len(recs) == 25

    def test_run_table_unknown(self, runner):
        assert invoke(runner, "run-table", "T1", "--scale", "0.005").exit_code == EXIT_USAGE
