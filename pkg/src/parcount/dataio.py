"""File formats: datasets, configuration, run manifests and daily-quote ingestion.

Datasets are tab-separated text with a one-line typed header of
``name:role`` cells.  Roles:

``index``      integer time index
``period``     text period key such as ``2014-07``
``count``      nonnegative integer counts (one per series file)
``covariate``  real-valued regressor
``aux``        carried along, ignored by the estimators

Floats are written in shortest round-trip form, so write, read, write is
byte-identical.  The full grammar is in ``docs/formats.md``.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import CountSeries, CovariatePanel

__all__ = [
    "CONFIG_SCHEMA",
    "DataError",
    "Dataset",
    "DailyQuoteRecord",
    "MonthlyPanel",
    "RunManifest",
    "file_digest",
    "ingest_daily_to_monthly_counts",
    "read_config",
    "read_covariate_daily",
    "read_dataset",
    "read_quotes",
    "write_dataset",
]

log = logging.getLogger(__name__)

ROLES = ("index", "period", "count", "covariate", "aux")
KEY_ROLES = ("index", "period")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _fmt_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Dataset:
    """Columns of a typed tab-separated file, in file order."""

    names: list[str]
    roles: list[str]
    columns: list[list]

    def __post_init__(self):
        if not (len(self.names) == len(self.roles) == len(self.columns)):
            raise ValueError("names, roles and columns must align")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate column names")
        for r in self.roles:
            if r not in ROLES:
                raise DataError(f"unknown column role {r!r}")
        if sum(r in KEY_ROLES for r in self.roles) > 1:
            raise DataError("at most one index or period column is allowed")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise ValueError("columns differ in length")

    def __len__(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    def column(self, name: str) -> list:
        return self.columns[self.names.index(name)]

    def by_role(self, role: str) -> list[str]:
        return [n for n, r in zip(self.names, self.roles) if r == role]

    @property
    def key(self) -> list | None:
        keys = [n for n, r in zip(self.names, self.roles) if r in KEY_ROLES]
        return self.column(keys[0]) if keys else None

    def count_series(self, name: str | None = None) -> CountSeries:
        counts = self.by_role("count")
        if not counts:
            raise DataError("dataset has no count column")
        name = name or counts[0]
        if name not in counts:
            raise DataError(f"no count column named {name!r}")
        return CountSeries(np.array(self.column(name), dtype=np.int64), label=name)

    def covariate_panel(self) -> CovariatePanel:
        names = self.by_role("covariate")
        rows = np.array([self.column(n) for n in names], dtype=float).T if names else np.zeros((len(self), 0))
        return CovariatePanel(rows.reshape(len(self), len(names)), tuple(names))

    def subset(self, keys: Sequence) -> "Dataset":
        """Rows whose key is in ``keys``, in the order of ``keys``."""
        pos = {k: i for i, k in enumerate(self.key or [])}
        missing = [k for k in keys if k not in pos]
        if missing:
            raise DataError(f"keys {missing[:5]} missing from dataset")
        idx = [pos[k] for k in keys]
        return Dataset(list(self.names), list(self.roles), [[c[i] for i in idx] for c in self.columns])


def _parse_cell(text: str, role: str, lineno: int, name: str):
    try:
        if role == "index":
            return int(text)
        if role == "count":
            v = int(text)
            if v < 0:
                raise ValueError("negative count")
            return v
        if role == "covariate":
            v = float(text)
            if not math.isfinite(v):
                raise ValueError("non-finite value")
            return v
        if role == "period" and not text:
            raise ValueError("empty period")
        return text
    except ValueError as exc:
        raise DataError(f"line {lineno}: column {name!r}: {exc}") from None


def read_dataset(path: str | Path) -> Dataset:
    """Read a typed dataset; all malformed rows are reported together."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    lines = path.read_text().splitlines()
    header_seen = False
    names: list[str] = []
    roles: list[str] = []
    columns: list[list] = []
    problems: list[str] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if not header_seen:
            for c in cells:
                name, sep, role = c.rpartition(":")
                if not sep or not name:
                    raise DataError(f"{path}: line {lineno}: header cell {c!r} is not name:role")
                names.append(name)
                roles.append(role)
            columns = [[] for _ in names]
            header_seen = True
            continue
        if len(cells) != len(names):
            problems.append(f"line {lineno}: expected {len(names)} fields, got {len(cells)}")
            continue
        try:
            parsed = [_parse_cell(c, r, lineno, n) for c, r, n in zip(cells, roles, names)]
        except DataError as exc:
            problems.append(str(exc))
            continue
        for col, v in zip(columns, parsed):
            col.append(v)
    if not header_seen:
        raise DataError(f"{path}: missing header")
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems))
    ds = Dataset(names, roles, columns)
    key = ds.key
    if key is not None and len(set(key)) != len(key):
        raise DataError(f"{path}: duplicate keys in the index column")
    return ds


def write_dataset(path: str | Path, ds: Dataset) -> None:
    head = "\t".join(f"{n}:{r}" for n, r in zip(ds.names, ds.roles))
    rows = ["\t".join(_fmt_value(c[i]) for c in ds.columns) for i in range(len(ds))]
    Path(path).write_text("\n".join([head, *rows]) + "\n")


def series_dataset(series: CountSeries, keys: Sequence | None = None) -> Dataset:
    keys = list(keys) if keys is not None else list(range(1, len(series) + 1))
    role = "index" if all(isinstance(k, (int, np.integer)) for k in keys) else "period"
    return Dataset(["t" if role == "index" else "period", series.label], [role, "count"],
                   [[k if role == "period" else int(k) for k in keys], [int(v) for v in series.values]])


def covariate_dataset(panel: CovariatePanel, keys: Sequence | None = None) -> Dataset:
    keys = list(keys) if keys is not None else list(range(1, len(panel) + 1))
    role = "index" if all(isinstance(k, (int, np.integer)) for k in keys) else "period"
    cols = [[float(v) for v in panel.rows[:, j]] for j in range(panel.k)]
    return Dataset(["t" if role == "index" else "period", *panel.names], [role] + ["covariate"] * panel.k,
                   [[k if role == "period" else int(k) for k in keys], *cols])


def align(series_ds: Dataset, cov_ds: Dataset | None) -> tuple[Dataset, Dataset | None]:
    """Restrict a covariate file to the series' keys, in series order."""
    if cov_ds is None:
        return series_ds, None
    if series_ds.key is None or cov_ds.key is None:
        if len(series_ds) != len(cov_ds):
            raise DataError("series and covariates differ in length and carry no key column")
        return series_ds, cov_ds
    return series_ds, cov_ds.subset(series_ds.key)


# ---------------------------------------------------------------- config

CONFIG_SCHEMA: dict[str, str] = {
    "rho": "floats",
    "delta": "floats",
    "delta0": "float",
    "p": "int",
    "T": "int",
    "seed": "int",
    "covariate-law": "str",
    "replicates": "int",
    "scale": "float",
    "estimator": "str",
    "change-rho": "floats",
    "change-fraction": "float",
    "n-series": "int",
    "level-sd": "float",
    "covariate-name": "str",
    "out": "str",
}


def _convert(kind: str, text: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "floats":
        return [float(t) for t in text.split(",") if t.strip()]
    return text


def read_config(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file into typed values.

    Blank lines and lines starting with ``#`` are skipped.  Keys are the
    long CLI flag names without dashes; lists are comma-separated.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such config file")
    out: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise DataError(f"{path}: line {lineno}: expected key = value")
        if key not in CONFIG_SCHEMA:
            raise DataError(f"{path}: line {lineno}: unknown key {key!r}")
        if key in out:
            raise DataError(f"{path}: line {lineno}: duplicate key {key!r}")
        try:
            out[key] = _convert(CONFIG_SCHEMA[key], value)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: {key} expects {CONFIG_SCHEMA[key]}, got {value!r}") from None
    return out


# ---------------------------------------------------------------- manifest

def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything needed to replay a command: its resolved config and inputs."""

    tool_version: str
    command: str
    config: dict
    master_seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = field(default_factory=_utc_now)
    finished: str = ""

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(Path(path).resolve())] = file_digest(path)

    def add_output(self, directory: Path, name: str) -> None:
        self.outputs[name] = file_digest(directory / name)

    def write(self, directory: str | Path) -> Path:
        self.finished = _utc_now()
        target = Path(directory) / "manifest.json"
        target.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return target

    @classmethod
    def read(cls, directory: str | Path) -> "RunManifest":
        path = Path(directory) / "manifest.json"
        if not path.exists():
            raise DataError(f"{path}: no manifest")
        try:
            data = json.loads(path.read_text())
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from None

    def verify(self, directory: str | Path) -> list[str]:
        """Names of outputs whose current digest differs from the recorded one."""
        bad = []
        for name, digest in self.outputs.items():
            p = Path(directory) / name
            if not p.exists() or file_digest(p) != digest:
                bad.append(name)
        return bad


# ---------------------------------------------------------------- ingestion

@dataclass(frozen=True)
class DailyQuoteRecord:
    date: dt.date
    market: str
    open: float
    close: float

    def __post_init__(self):
        if not (self.open > 0 and self.close > 0):
            raise ValueError("open and close must be positive")


def _read_rows(path: Path, expected: Sequence[str]) -> Iterable[tuple[int, list[str]]]:
    if not path.exists():
        raise DataError(f"{path}: no such file")
    lines = path.read_text().splitlines()
    header_at = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split("\t")]
        if header_at is None:
            if cells != list(expected):
                raise DataError(f"{path}: line {lineno}: header must be {' '.join(expected)}")
            header_at = lineno
            continue
        yield lineno, cells
    if header_at is None:
        raise DataError(f"{path}: missing header")


def read_quotes(path: str | Path) -> list[DailyQuoteRecord]:
    """Read ``date market open close`` rows; bad rows are reported by line."""
    path = Path(path)
    out, problems = [], []
    for lineno, cells in _read_rows(path, ("date", "market", "open", "close")):
        try:
            if len(cells) != 4:
                raise ValueError(f"expected 4 fields, got {len(cells)}")
            if not cells[1]:
                raise ValueError("empty market label")
            out.append(DailyQuoteRecord(dt.date.fromisoformat(cells[0]), cells[1], float(cells[2]), float(cells[3])))
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems))
    return out


def read_covariate_daily(path: str | Path) -> list[tuple[dt.date, float]]:
    """Read ``date value`` rows of a daily covariate."""
    path = Path(path)
    out, problems = [], []
    for lineno, cells in _read_rows(path, ("date", "value")):
        try:
            if len(cells) != 2:
                raise ValueError(f"expected 2 fields, got {len(cells)}")
            v = float(cells[1])
            if not math.isfinite(v):
                raise ValueError("non-finite value")
            out.append((dt.date.fromisoformat(cells[0]), v))
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems))
    return out


def _month(d: dt.date) -> str:
    return f"{d.year:04d}-{d.month:02d}"


def _month_range(first: str, last: str) -> list[str]:
    y, m = map(int, first.split("-"))
    out = []
    while f"{y:04d}-{m:02d}" <= last:
        out.append(f"{y:04d}-{m:02d}")
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


@dataclass(frozen=True)
class MonthlyPanel:
    periods: dict[str, list[str]]
    counts: dict[str, CountSeries]
    trading_days: dict[str, list[int]]
    covariate_periods: list[str]
    covariate: CovariatePanel

    def covariates_for(self, market: str) -> CovariatePanel:
        pos = {p: i for i, p in enumerate(self.covariate_periods)}
        idx = [pos[p] for p in self.periods[market]]
        return CovariatePanel(self.covariate.rows[idx], self.covariate.names)


def ingest_daily_to_monthly_counts(
    quotes: Sequence[DailyQuoteRecord],
    covariate_daily: Sequence[tuple[dt.date, float]],
    covariate_name: str = "x1",
) -> MonthlyPanel:
    """Monthly counts of up days (close strictly above open) per market.

    Months inside a market's span with no trading days are dropped with a
    warning, as are months with no covariate observation.  The covariate is
    the plain mean of its daily values in each calendar month.
    """
    if not quotes:
        raise DataError("no quotes to ingest")
    days: dict[tuple[str, str], int] = defaultdict(int)
    ups: dict[tuple[str, str], int] = defaultdict(int)
    seen: set[tuple[str, dt.date]] = set()
    for q in quotes:
        if (q.market, q.date) in seen:
            raise DataError(f"duplicate quote for {q.market} on {q.date}")
        seen.add((q.market, q.date))
        key = (q.market, _month(q.date))
        days[key] += 1
        ups[key] += q.close > q.open
    cov_values: dict[str, list[float]] = defaultdict(list)
    for d, v in covariate_daily:
        cov_values[_month(d)].append(v)
    cov_month = {m: math.fsum(v) / len(v) for m, v in cov_values.items()}

    periods, counts, tdays = {}, {}, {}
    used: set[str] = set()
    for market in sorted({q.market for q in quotes}):
        months = sorted(m for (mk, m) in days if mk == market)
        keep = []
        for m in _month_range(months[0], months[-1]):
            if days.get((market, m), 0) == 0:
                log.warning("%s: no trading days in %s; month dropped", market, m)
            elif m not in cov_month:
                log.warning("%s: no covariate observations in %s; month dropped", market, m)
            else:
                keep.append(m)
        if not keep:
            raise DataError(f"market {market!r} has no complete month")
        periods[market] = keep
        counts[market] = CountSeries(np.array([ups[(market, m)] for m in keep]), label=market)
        tdays[market] = [days[(market, m)] for m in keep]
        used.update(keep)
    cov_periods = sorted(used)
    cov = CovariatePanel(np.array([[cov_month[m]] for m in cov_periods]), (covariate_name,))
    return MonthlyPanel(periods, counts, tdays, cov_periods, cov)


def write_monthly_panel(panel: MonthlyPanel, directory: str | Path) -> list[str]:
    """Write one series file per market plus ``covariates.tsv``; returns file names."""
    directory = Path(directory)
    names = []
    for market, series in panel.counts.items():
        ds = Dataset(
            ["period", market, "trading_days"],
            ["period", "count", "aux"],
            [list(panel.periods[market]), [int(v) for v in series.values], list(panel.trading_days[market])],
        )
        name = f"{market}.tsv"
        write_dataset(directory / name, ds)
        names.append(name)
    write_dataset(directory / "covariates.tsv", covariate_dataset(panel.covariate, panel.covariate_periods))
    names.append("covariates.tsv")
    return names
