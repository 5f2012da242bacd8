"""RMSE metrics, the LSTM-vs-PBDL comparison table, and plot-data export."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .dataset import CITY_NAMES, POLLUTANTS
from .errors import AlignmentError, ShapeError
from .forecaster import SequenceDataset, TrainedModel, write_predictions

MODELS = ("lstm", "pbdl")
METRIC_COLUMNS = ("city", "pollutant", "model", "rmse_standardized", "rmse_raw", "target_mean", "target_max", "n")
COMPARISON_COLUMNS = ("city", "pollutant", "lstm_rmse", "pbdl_rmse", "winner", "gain_mean_ugm3", "gain_max_ugm3")


def rmse(predicted: Sequence[float], actual: Sequence[float]) -> float:
    p = np.asarray(predicted, float).reshape(-1)
    a = np.asarray(actual, float).reshape(-1)
    if len(p) != len(a):
        raise ShapeError(f"{len(p)} predictions for {len(a)} actual values")
    if len(p) == 0:
        raise ShapeError("rmse of empty vectors")
    d = p - a
    return math.sqrt(math.fsum(d * d) / len(d))


def accuracy_gain(level: float, lstm_rmse: float, pbdl_rmse: float) -> float:
    """Concentration-scale reading of an RMSE improvement: level * (lstm - pbdl)."""
    return level * (lstm_rmse - pbdl_rmse)


@dataclass(frozen=True)
class MetricsRow:
    city: str
    pollutant: str
    model: str
    rmse_standardized: float
    rmse_raw: float
    target_mean: float
    target_max: float
    n: int

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if not (self.rmse_standardized >= 0 and self.rmse_raw >= 0):
            raise ValueError("rmse must be non-negative")


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        keys = [(r.city, r.pollutant, r.model) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise AlignmentError("duplicate (city, pollutant, model) rows")

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow(
                    (r.city, r.pollutant, r.model, repr(r.rmse_standardized), repr(r.rmse_raw),
                     repr(r.target_mean), repr(r.target_max), r.n)
                )
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsReport":
        with open(path, newline="") as fh:
            rows = [
                MetricsRow(
                    d["city"], d["pollutant"], d["model"], float(d["rmse_standardized"]), float(d["rmse_raw"]),
                    float(d["target_mean"]), float(d["target_max"]), int(d["n"]),
                )
                for d in csv.DictReader(fh)
            ]
        return cls(rows)


def metrics_row(
    model: str,
    city: str,
    pollutant: str,
    predicted: Sequence[float],
    actual: Sequence[float],
    target_sd: float,
    target_mean: float,
    target_max: float,
) -> MetricsRow:
    """Raw-scale RMSE and its standardized counterpart (divided by the target sd)."""
    raw = rmse(predicted, actual)
    return MetricsRow(city, pollutant, model, raw / target_sd, raw, float(target_mean), float(target_max), len(actual))


def read_predictions(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``city -> (actual, predicted)`` from a ``city,date,actual,predicted`` CSV."""
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            a, p = out.setdefault(d["city"], ([], []))
            a.append(float(d["actual"]))
            p.append(float(d["predicted"]))
    return {c: (np.asarray(a), np.asarray(p)) for c, (a, p) in out.items()}


@dataclass(frozen=True)
class ComparisonRow:
    city: str
    pollutant: str
    lstm_rmse: float | None
    pbdl_rmse: float | None
    winner: str  # "LSTM" | "PBDL" | "tie" | "" when a model is absent
    gain_mean: float | None
    gain_max: float | None


def _city_key(city: str):
    return (0, CITY_NAMES.index(city), "") if city in CITY_NAMES else (1, 0, city)


def _pollutant_key(p: str):
    return (POLLUTANTS.index(p), "") if p in POLLUTANTS else (len(POLLUTANTS), p)


def _winner(lstm: float, pbdl: float) -> str:
    if math.isclose(lstm, pbdl, rel_tol=1e-12, abs_tol=1e-15):
        return "tie"
    return "PBDL" if pbdl < lstm else "LSTM"


def compare_models(reports: Iterable[MetricsReport]) -> list[ComparisonRow]:
    """One row per (city, pollutant): standardized RMSE of both models and the winner.

    Every model present must cover the same cells.  Gains are
    ``target_mean * (lstm - pbdl)`` and ``target_max * (lstm - pbdl)``.
    """
    cells: dict[tuple[str, str], dict[str, MetricsRow]] = {}
    for report in reports:
        for r in report.rows:
            slot = cells.setdefault((r.city, r.pollutant), {})
            if r.model in slot:
                raise AlignmentError(f"two {r.model} rows for {r.city}/{r.pollutant}")
            slot[r.model] = r
    present = {m for slot in cells.values() for m in slot}
    for (city, pol), slot in cells.items():
        if set(slot) != present:
            raise AlignmentError(f"{city}/{pol} lacks {sorted(present - set(slot))}")
    rows = []
    for city, pol in sorted(cells, key=lambda k: (_pollutant_key(k[1]), _city_key(k[0]))):
        slot = cells[(city, pol)]
        lstm, pbdl = slot.get("lstm"), slot.get("pbdl")
        if lstm and pbdl:
            ref = pbdl
            diff = lstm.rmse_standardized - pbdl.rmse_standardized
            rows.append(ComparisonRow(
                city, pol, lstm.rmse_standardized, pbdl.rmse_standardized,
                _winner(lstm.rmse_standardized, pbdl.rmse_standardized),
                ref.target_mean * diff, ref.target_max * diff,
            ))
        else:
            rows.append(ComparisonRow(
                city, pol, lstm.rmse_standardized if lstm else None,
                pbdl.rmse_standardized if pbdl else None, "", None, None,
            ))
    return rows


def _cell(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_comparison(rows: Sequence[ComparisonRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow((r.city, r.pollutant, _cell(r.lstm_rmse), _cell(r.pbdl_rmse), r.winner,
                        _cell(r.gain_mean), _cell(r.gain_max)))
    return path


def read_comparison(path: str | Path) -> list[ComparisonRow]:
    num = lambda s: float(s) if s != "" else None  # noqa: E731
    with open(path, newline="") as fh:
        return [
            ComparisonRow(d["city"], d["pollutant"], num(d["lstm_rmse"]), num(d["pbdl_rmse"]), d["winner"],
                          num(d["gain_mean_ugm3"]), num(d["gain_max_ugm3"]))
            for d in csv.DictReader(fh)
        ]


def export_plot_data(model: TrainedModel, test: SequenceDataset, path: str | Path, prefix: str = "") -> tuple[Path, Path]:
    """Loss trace and actual-vs-predicted CSVs; nothing is rendered."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    trace = model.trace.to_csv(directory / f"{prefix}loss_trace.csv")
    preds = write_predictions(model, test, directory / f"{prefix}predictions.csv")
    return trace, preds


def comparison_as_dicts(rows: Sequence[ComparisonRow]) -> list[dict[str, Any]]:
    return [asdict(r) for r in rows]
