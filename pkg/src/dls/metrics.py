"""Long-format metrics CSVs and fold aggregates.

Floats are written with ``repr`` (shortest round-tripping form), so a
read followed by a write reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Sequence

METRIC_FIELDS = ("run_id", "phase", "fold", "epoch", "metric", "value")
AGGREGATE_FIELDS = ("epoch", "mean_acc", "std_acc")
REPORT_FIELDS = ("condition", "epoch", "mean_acc", "std_acc")


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    phase: str
    fold: int  # 0 when the row is not tied to a fold
    epoch: int
    metric: str
    value: float


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _read(path, header: Sequence[str]) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: expected header {','.join(header)}")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
    return rows[1:]


def write_metrics(path, rows: Iterable[MetricRow]) -> Path:
    return _write(path, METRIC_FIELDS, (astuple(r) for r in rows))


def read_metrics(path) -> list[MetricRow]:
    return [MetricRow(r[0], r[1], int(r[2]), int(r[3]), r[4], float(r[5])) for r in _read(path, METRIC_FIELDS)]


def write_aggregate(path, epochs: Sequence[int], mean, std) -> Path:
    return _write(path, AGGREGATE_FIELDS, ((int(e), float(m), float(s)) for e, m, s in zip(epochs, mean, std)))


def read_aggregate(path) -> list[tuple[int, float, float]]:
    return [(int(e), float(m), float(s)) for e, m, s in _read(path, AGGREGATE_FIELDS)]


def write_report(path, rows: Iterable[tuple[str, int, float, float]]) -> Path:
    return _write(path, REPORT_FIELDS, rows)


def read_report(path) -> list[tuple[str, int, float, float]]:
    return [(c, int(e), float(m), float(s)) for c, e, m, s in _read(path, REPORT_FIELDS)]
