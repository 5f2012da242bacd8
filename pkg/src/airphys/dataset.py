"""City-day panel data: parsing, station aggregation, imputation, synthesis.

Raw input is long-format CSV (``date,city,station,variable,value``).  Station
readings are averaged into one series per city, the date axis is densified,
and holes are filled by iterative least-squares regression imputation.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .errors import (
    EmptyInputError,
    RowError,
    SchemaError,
    UnimputableVariableError,
)
from .seeding import stream

log = logging.getLogger(__name__)

VARIABLES = ("TV", "NOx", "PM25", "Tmean", "HDD", "VP", "WS", "WG", "meanRH", "SD", "PP")
POLLUTANTS = ("NOx", "PM25")
# Covariates of the pollutant rate law, in the order used for model inputs.
COVARIATES = ("TV", "Tmean", "HDD", "VP", "WS", "WG", "meanRH", "SD", "PP")
NON_NEGATIVE = frozenset(VARIABLES) - {"Tmean", "VP"}
VAR_INDEX = {v: i for i, v in enumerate(VARIABLES)}

_ALIASES = {"PM2.5": "PM25", "mean RH": "meanRH", "meanrh": "meanRH", "nox": "NOx"}

REQUIRED_COLUMNS = ("date", "city", "station", "variable", "value")

# Missing readings are NaN in every float grid; RawRecord uses None.
MISSING = math.nan


@dataclass(frozen=True)
class RawRecord:
    date: dt.date
    city: str
    station: str
    variable: str
    value: float | None


def _parse_value(text: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes().decode("utf-8-sig")
    data = source.read()
    return data.decode("utf-8-sig") if isinstance(data, bytes) else data


def parse_csv(
    source: bytes | BinaryIO | str | Path,
    schema: Mapping[str, str] | None = None,
    date_range: tuple[dt.date, dt.date] | None = None,
) -> list[RawRecord]:
    """Parse long-format readings.

    ``schema`` maps logical column names (``date``, ``city``, ``station``,
    ``variable``, ``value``) to header names in the file.  Values that do
    not parse as finite numbers become missing; a bad date or an unknown
    variable raises :class:`RowError` with the 1-based data row number.
    """
    schema = {c: c for c in REQUIRED_COLUMNS} | dict(schema or {})
    reader = csv.reader(io.StringIO(_read_text(source)))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("input has no header row") from None
    index = {}
    for logical in REQUIRED_COLUMNS:
        name = schema[logical]
        if name not in header:
            raise SchemaError(f"missing mandatory column {name!r}")
        index[logical] = header.index(name)

    records = []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        raw_date = row[index["date"]].strip()
        try:
            day = dt.date.fromisoformat(raw_date)
        except ValueError:
            raise RowError(row_no, f"malformed date {raw_date!r}") from None
        if date_range is not None and not (date_range[0] <= day <= date_range[1]):
            raise RowError(row_no, f"date {day} outside {date_range[0]}..{date_range[1]}")
        variable = row[index["variable"]].strip()
        variable = _ALIASES.get(variable, variable)
        if variable not in VAR_INDEX:
            raise RowError(row_no, f"unknown variable {variable!r}")
        records.append(
            RawRecord(
                date=day,
                city=row[index["city"]].strip(),
                station=row[index["station"]].strip(),
                variable=variable,
                value=_parse_value(row[index["value"]]),
            )
        )
    return records


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CityDailyPanel:
    """City x day x variable grid.

    ``values`` holds NaN where a reading is missing; ``imputed`` flags every
    cell that was filled by :func:`impute_missing`.  Arrays are read-only.
    """

    cities: tuple[str, ...]
    days: np.ndarray  # datetime64[D], strictly consecutive
    values: np.ndarray  # (city, day, variable)
    imputed: np.ndarray = None  # bool, same shape as values

    def __post_init__(self):
        days = np.asarray(self.days, dtype="datetime64[D]")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape != (len(self.cities), len(days), len(VARIABLES)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"({len(self.cities)}, {len(days)}, {len(VARIABLES)})"
            )
        if len(set(self.cities)) != len(self.cities):
            raise ValueError("city names must be unique")
        if len(days) > 1 and not np.all(np.diff(days).astype(int) == 1):
            raise ValueError("date axis must increase in steps of exactly one day")
        imputed = np.zeros(values.shape, bool) if self.imputed is None else np.asarray(self.imputed, bool)
        if imputed.shape != values.shape:
            raise ValueError("imputed grid shape differs from values")
        for name in NON_NEGATIVE:
            col = values[..., VAR_INDEX[name]]
            if np.any(col[~np.isnan(col)] < 0):
                raise ValueError(f"negative reading for non-negative variable {name}")
        object.__setattr__(self, "cities", tuple(self.cities))
        object.__setattr__(self, "days", _freeze(days))
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "imputed", _freeze(imputed))

    @property
    def n_days(self) -> int:
        return len(self.days)

    def variable(self, name: str) -> np.ndarray:
        """(city, day) grid of one variable."""
        return self.values[..., VAR_INDEX[name]]

    def city_values(self, city: str) -> np.ndarray:
        return self.values[self.cities.index(city)]

    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def missing_fraction(self) -> float:
        return float(self.missing_mask().mean()) if self.values.size else 0.0

    def select(self, cities: Iterable[str]) -> "CityDailyPanel":
        idx = [self.cities.index(c) for c in cities]
        return CityDailyPanel(
            tuple(self.cities[i] for i in idx), self.days, self.values[idx], self.imputed[idx]
        )

    def dates(self) -> list[dt.date]:
        return [d.item() for d in self.days]

    def to_csv(self, directory: str | Path) -> list[Path]:
        """One ``<city>.csv`` per city plus ``<city>_imputed.csv`` sidecars."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        dates = [str(d) for d in self.days]
        for c, city in enumerate(self.cities):
            path = directory / f"{city}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("date",) + VARIABLES)
                for d, day in enumerate(dates):
                    w.writerow([day] + [_fmt(v) for v in self.values[c, d]])
            side = directory / f"{city}_imputed.csv"
            with open(side, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("date", "variable"))
                for d, v in zip(*np.nonzero(self.imputed[c])):
                    w.writerow((dates[d], VARIABLES[v]))
            written += [path, side]
        return written

    @classmethod
    def from_csv(cls, directory: str | Path, cities: Iterable[str] | None = None) -> "CityDailyPanel":
        directory = Path(directory)
        if cities is None:
            cities = sorted(p.stem for p in directory.glob("*.csv") if not p.stem.endswith("_imputed"))
        cities = list(cities)
        if not cities:
            raise EmptyInputError(f"no city panel files in {directory}")
        grids, flags, axis = [], [], None
        for city in cities:
            with open(directory / f"{city}.csv", newline="") as fh:
                rows = list(csv.reader(fh))
            header = rows[0]
            missing = [v for v in ("date",) + VARIABLES if v not in header]
            if missing:
                raise SchemaError(f"{city}.csv lacks columns {missing}")
            cols = [header.index(v) for v in VARIABLES]
            days = np.array([r[header.index("date")] for r in rows[1:]], dtype="datetime64[D]")
            if axis is None:
                axis = days
            elif not np.array_equal(axis, days):
                raise SchemaError(f"{city}.csv date axis differs from {cities[0]}.csv")
            grid = np.array([[_parse_value(r[i]) if _parse_value(r[i]) is not None else np.nan
                              for i in cols] for r in rows[1:]], dtype=float).reshape(len(days), len(VARIABLES))
            flag = np.zeros(grid.shape, bool)
            side = directory / f"{city}_imputed.csv"
            if side.exists():
                pos = {str(d): i for i, d in enumerate(days)}
                with open(side, newline="") as fh:
                    for r in list(csv.reader(fh))[1:]:
                        flag[pos[r[0]], VAR_INDEX[r[1]]] = True
            grids.append(grid)
            flags.append(flag)
        return cls(tuple(cities), axis, np.stack(grids), np.stack(flags))


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def aggregate_city_daily(records: Iterable[RawRecord]) -> CityDailyPanel:
    """Average station readings into city series on a gap-free date axis.

    Means use ``math.fsum`` so the result does not depend on station order.
    A (city, day, variable) cell with no non-missing reading stays missing.
    """
    records = list(records)
    if not records:
        raise EmptyInputError("no records to aggregate")
    sums: dict[tuple[str, dt.date, str], list[float]] = defaultdict(list)
    for r in records:
        key = (r.city, r.date, r.variable)
        if r.value is not None:
            sums[key].append(r.value)
        else:
            sums.setdefault(key, [])
    cities = tuple(sorted({r.city for r in records}))
    first = min(r.date for r in records)
    last = max(r.date for r in records)
    days = np.arange(np.datetime64(first, "D"), np.datetime64(last, "D") + 1)
    values = np.full((len(cities), len(days), len(VARIABLES)), np.nan)
    cpos = {c: i for i, c in enumerate(cities)}
    for (city, day, var), vals in sums.items():
        if vals:
            values[cpos[city], (day - first).days, VAR_INDEX[var]] = math.fsum(vals) / len(vals)
    return CityDailyPanel(cities, days, values)


@dataclass
class ImputationReport:
    missing_fraction_before: float
    missing_fraction_after: float
    imputed_counts: dict[str, int]
    iterations_used: int

    @property
    def total_imputed(self) -> int:
        return sum(self.imputed_counts.values())


def _impute_city(grid: np.ndarray, city: str, max_iter: int, tol: float) -> tuple[np.ndarray, int]:
    grid = grid.copy()
    miss = np.isnan(grid)
    if not miss.any():
        return grid, 0
    for j, name in enumerate(VARIABLES):
        if miss[:, j].all():
            raise UnimputableVariableError(f"variable {name} has no observations for city {city}")
        if miss[:, j].any():
            grid[miss[:, j], j] = grid[~miss[:, j], j].mean()

    incomplete = [j for j in range(grid.shape[1]) if miss[:, j].any()]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        change = 0.0
        for j in incomplete:
            rows = ~miss[:, j]
            others = [k for k in range(grid.shape[1]) if k != j]
            design = np.column_stack([np.ones(len(grid)), grid[:, others]])
            coef, *_ = np.linalg.lstsq(design[rows], grid[rows, j], rcond=None)
            fill = design[~rows] @ coef
            if VARIABLES[j] in NON_NEGATIVE:
                fill = np.maximum(fill, 0.0)
            change = max(change, float(np.max(np.abs(fill - grid[~rows, j]))))
            grid[~rows, j] = fill
        if change < tol:
            break
    return grid, iterations


def impute_missing(
    panel: CityDailyPanel, max_iter: int = 50, tol: float = 1e-6
) -> tuple[CityDailyPanel, ImputationReport]:
    """Fill every missing cell by iterative OLS regression imputation.

    Per city, missing cells start at the observed mean of their variable;
    each incomplete variable is then regressed (with intercept) on all other
    variables over its observed rows and its missing rows are refilled.
    Sweeps repeat until the largest change of any filled value drops below
    ``tol`` or ``max_iter`` sweeps have run.  Observed cells never change.
    """
    before = panel.missing_fraction()
    miss = panel.missing_mask()
    out = np.array(panel.values)
    iterations = 0
    for c, city in enumerate(panel.cities):
        out[c], used = _impute_city(out[c], city, max_iter, tol)
        iterations = max(iterations, used)
    counts = {name: int(miss[..., j].sum()) for j, name in enumerate(VARIABLES)}
    result = CityDailyPanel(panel.cities, panel.days, out, panel.imputed | miss)
    report = ImputationReport(before, result.missing_fraction(), counts, iterations)
    log.info("imputed %d cells (%.4f of grid) in %d sweeps", report.total_imputed, before, iterations)
    return result, report


def compute_hdd(tmean):
    """Heating degree days against the 17 degC threshold: max(0, 17 - tmean)."""
    return np.maximum(0.0, 17.0 - np.asarray(tmean, dtype=float))


_TERM = re.compile(r"^(\w+?)(?:\^([123]))?$")


def parse_term(term: str) -> tuple[str, int]:
    """``"HDD^2"`` -> ``("HDD", 2)``; a bare name is power 1."""
    m = _TERM.match(term)
    if not m or m.group(1) not in VAR_INDEX:
        raise ValueError(f"bad term {term!r}")
    return m.group(1), int(m.group(2) or 1)


def _standardized_power(values: np.ndarray, power: int) -> np.ndarray:
    col = values ** power
    sd = col.std()
    return (col - col.mean()) / sd if sd > 0 else np.zeros_like(col)


DEFAULT_COEFFICIENTS = {
    "PM25": {"HDD": 2.0, "HDD^2": 1.5, "SD^2": 1.0, "TV": 1.0, "meanRH": 0.8},
    "NOx": {"HDD": 25.0, "HDD^2": 10.0, "SD^2": 8.0, "TV": 15.0, "meanRH": 6.0},
}
DEFAULT_INTERCEPTS = {"PM25": 10.4, "NOx": 80.4}
DEFAULT_NOISE_SCALE = {"PM25": 1.0, "NOx": 8.0}
CITY_NAMES = ("Oslo", "Bergen", "Trondheim")


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic city-day generator.

    ``coefficients`` maps each pollutant to planted effects of terms such as
    ``"TV"`` or ``"HDD^2"``.  A term's regressor is the raw power of the
    variable standardized over the whole panel (population sd), the same
    scaling used for design matrices fitted on all rows.

    With ``dynamics="static"`` the pollutant is
    ``intercept + sum(coef * term) + noise``.  With ``dynamics="rate"`` it
    follows the rate law ``y[t+1] = y[t] + relaxation * (intercept
    + sum(coef * term[t]) - y[t]) + noise``, relaxing toward the static
    level.  Noise sd is
    ``noise_sd * noise_scale[pollutant]``; pollutants are clipped at 0.
    """

    cities: int = 3
    days: int = 3650
    seed: int = 0
    start: dt.date = dt.date(2009, 1, 1)
    coefficients: dict[str, dict[str, float]] = field(
        default_factory=lambda: {p: dict(c) for p, c in DEFAULT_COEFFICIENTS.items()}
    )
    intercepts: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INTERCEPTS))
    noise_sd: float = 2.5
    noise_scale: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_NOISE_SCALE))
    missing_rate: float = 0.0
    dynamics: str = "static"
    relaxation: float = 0.3
    city_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.days < 30:
            raise ValueError("days must be at least 30")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.cities < 1:
            raise ValueError("need at least one city")
        if self.dynamics not in ("static", "rate"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")
        if isinstance(self.start, str):
            self.start = dt.date.fromisoformat(self.start)
        for pollutant, terms in self.coefficients.items():
            if pollutant not in POLLUTANTS:
                raise ValueError(f"coefficients given for non-pollutant {pollutant!r}")
            for term in terms:
                if parse_term(term)[0] in POLLUTANTS:
                    raise ValueError("pollutants cannot drive pollutants")

    def names(self) -> tuple[str, ...]:
        if self.city_names is not None:
            if len(self.city_names) != self.cities:
                raise ValueError("city_names length differs from cities")
            return tuple(self.city_names)
        if self.cities <= len(CITY_NAMES):
            return CITY_NAMES[: self.cities]
        return tuple(f"City{i + 1}" for i in range(self.cities))


def _ar1(rng: np.random.Generator, shape, phi: float, sd: float) -> np.ndarray:
    """Stationary AR(1) noise along the last axis with marginal sd ``sd``."""
    eps = rng.normal(0.0, sd * math.sqrt(1 - phi * phi), size=shape)
    out = np.empty(shape)
    out[..., 0] = rng.normal(0.0, sd, size=shape[:-1])
    for t in range(1, shape[-1]):
        out[..., t] = phi * out[..., t - 1] + eps[..., t]
    return out


def _weather(config: SyntheticConfig) -> dict[str, np.ndarray]:
    n_c, n_d = config.cities, config.days
    rng = stream(config.seed, "synthetic", "weather")
    days = np.arange(n_d)
    doy = np.array([(config.start + dt.timedelta(days=int(d))).timetuple().tm_yday for d in days])
    weekday = np.array([(config.start + dt.timedelta(days=int(d))).weekday() for d in days])
    # +1 in mid-January, -1 in mid-July
    winter = np.cos(2 * math.pi * (doy - 15) / 365.25)[None, :]
    base_t = rng.uniform(4.0, 8.0, size=(n_c, 1))

    tmean = base_t - 9.0 * winter + _ar1(rng, (n_c, n_d), 0.7, 3.0)
    w = {"Tmean": np.round(tmean, 1)}
    w["HDD"] = compute_hdd(w["Tmean"])
    w["VP"] = np.maximum(0.0, 10.0 - 4.5 * winter + 0.35 * (tmean - tmean.mean()) + rng.normal(0, 1.0, (n_c, n_d)))
    w["PP"] = np.maximum(0.0, 3.0 - 0.4 * winter + _ar1(rng, (n_c, n_d), 0.3, 2.5))
    w["WG"] = np.maximum(0.0, 10.0 - 0.5 * winter + _ar1(rng, (n_c, n_d), 0.4, 3.0))
    w["WS"] = np.maximum(0.0, 4.0 + 1.2 * winter + _ar1(rng, (n_c, n_d), 0.5, 0.6))
    w["meanRH"] = np.clip(75.0 + 9.0 * winter + _ar1(rng, (n_c, n_d), 0.6, 3.5), 0.0, 100.0)
    w["SD"] = np.maximum(0.0, 18.0 * winter - 4.0 + _ar1(rng, (n_c, n_d), 0.9, 2.5))
    weekly = np.where(weekday >= 5, 0.9, 1.0)[None, :]
    tv_base = rng.uniform(900.0, 1300.0, size=(n_c, 1))
    w["TV"] = np.maximum(0.0, tv_base * weekly * (1.0 + 0.25 * winter) + _ar1(rng, (n_c, n_d), 0.5, 40.0))
    return w


def _planted_drive(config: SyntheticConfig, weather: dict[str, np.ndarray], pollutant: str) -> np.ndarray:
    drive = np.zeros((config.cities, config.days))
    for term, coef in config.coefficients.get(pollutant, {}).items():
        name, power = parse_term(term)
        drive += coef * _standardized_power(weather[name], power)
    return drive


def generate_synthetic(config: SyntheticConfig) -> CityDailyPanel:
    """Deterministic synthetic panel with seasonal weather and planted pollutant effects."""
    weather = _weather(config)
    data = dict(weather)
    for pollutant in POLLUTANTS:
        rng = stream(config.seed, "synthetic", "noise", pollutant)
        drive = _planted_drive(config, weather, pollutant)
        noise = rng.normal(0.0, config.noise_sd * config.noise_scale.get(pollutant, 1.0), drive.shape)
        base = config.intercepts.get(pollutant, 0.0)
        if config.dynamics == "static":
            y = base + drive + noise
        else:
            y = np.empty_like(drive)
            y[:, 0] = base
            for t in range(config.days - 1):
                rate = config.relaxation * (base + drive[:, t] - y[:, t])
                y[:, t + 1] = np.maximum(0.0, y[:, t] + rate + noise[:, t])
        data[pollutant] = np.maximum(0.0, y)

    values = np.stack([data[v] for v in VARIABLES], axis=-1)
    if config.missing_rate > 0:
        # exactly round(rate * cells) holes, placed uniformly at random
        rng = stream(config.seed, "synthetic", "missing")
        holes = rng.choice(values.size, size=int(round(config.missing_rate * values.size)), replace=False)
        values = values.copy()
        values.reshape(-1)[holes] = np.nan
    start = np.datetime64(config.start, "D")
    return CityDailyPanel(config.names(), start + np.arange(config.days), values)


def planted_rate(config: SyntheticConfig, panel: CityDailyPanel, pollutant: str) -> np.ndarray:
    """Noise-free rate law of a ``dynamics="rate"`` panel, (city, day)."""
    weather = {v: np.asarray(panel.variable(v)) for v in COVARIATES}
    y = np.asarray(panel.variable(pollutant))
    return config.relaxation * (
        config.intercepts.get(pollutant, 0.0) + _planted_drive(config, weather, pollutant) - y
    )


def records_to_csv(records: Iterable[RawRecord]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REQUIRED_COLUMNS)
    for r in records:
        w.writerow((r.date.isoformat(), r.city, r.station, r.variable, "" if r.value is None else repr(r.value)))
    return buf.getvalue().encode()
