"""Tables of raw timings and mean speedups from benchmark samples.

``execution.csv`` / ``planning.csv``: one row per (entity, mode), one column
per ladder point. ``speedups.csv``: one row per metric, one column per
entity, each value the mean over the ladder of passthrough / coalesced.
``speedups_by_n.csv`` keeps the per-point ratios behind those means.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Sequence

from .harness import BenchSample, Mode
from .schema import ENTITIES

SAMPLES_FILE = "samples.csv"
_SAMPLE_FIELDS = ["entity", "n_requests", "mode", "execution_ms", "planning_ms",
                  "measured", "statements", "rounds"]
_MODE_ORDER = (Mode.COALESCED, Mode.PASSTHROUGH)


class ReportError(ValueError):
    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = list(missing)


def ratio(slow: float, fast: float) -> float:
    if fast == 0:
        return 1.0 if slow == 0 else math.inf
    return slow / fast


@dataclass
class BenchReport:
    entities: list[str]
    ladder: list[int]
    execution: dict[tuple[str, Mode], list[float]]
    planning: dict[tuple[str, Mode], list[float]]
    execution_by_n: dict[str, list[float]]
    planning_by_n: dict[str, list[float]]

    @property
    def execution_speedup(self) -> dict[str, float]:
        return {e: fmean(v) for e, v in self.execution_by_n.items()}

    @property
    def planning_speedup(self) -> dict[str, float]:
        return {e: fmean(v) for e, v in self.planning_by_n.items()}


def _entity_key(name: str):
    order = list(ENTITIES)
    return (order.index(name), name) if name in order else (len(order), name)


def build_report(samples: Sequence[BenchSample]) -> BenchReport:
    cells = {}
    for s in samples:
        key = (s.entity, s.n_requests, s.mode)
        if key in cells:
            raise ReportError(f"duplicate sample for {s.entity} n={s.n_requests} {s.mode.value}")
        cells[key] = s
    if not cells:
        raise ReportError("no samples")
    entities = sorted({s.entity for s in samples}, key=_entity_key)
    ladder = sorted({s.n_requests for s in samples})
    missing = [(e, n, m.value) for e in entities for n in ladder for m in _MODE_ORDER
               if (e, n, m) not in cells]
    if missing:
        shown = ", ".join(f"{e}/{n}/{m}" for e, n, m in missing[:10])
        raise ReportError(f"incomplete grid, {len(missing)} missing cells: {shown}", missing)

    execution, planning = {}, {}
    for e in entities:
        for m in _MODE_ORDER:
            execution[(e, m)] = [cells[(e, n, m)].execution_ms for n in ladder]
            planning[(e, m)] = [cells[(e, n, m)].planning_ms for n in ladder]
    execution_by_n = {
        e: [ratio(p, c) for p, c in zip(execution[(e, Mode.PASSTHROUGH)], execution[(e, Mode.COALESCED)])]
        for e in entities
    }
    planning_by_n = {
        e: [ratio(p, c) for p, c in zip(planning[(e, Mode.PASSTHROUGH)], planning[(e, Mode.COALESCED)])]
        for e in entities
    }
    return BenchReport(entities, ladder, execution, planning, execution_by_n, planning_by_n)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_report(report: BenchReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["entity", "mode"] + [str(n) for n in report.ladder]
    written = []
    for fname, table in (("execution.csv", report.execution), ("planning.csv", report.planning)):
        rows = [[e, m.value] + [_fmt(v) for v in table[(e, m)]]
                for e in report.entities for m in _MODE_ORDER]
        _write_csv(out / fname, header, rows)
        written.append(out / fname)
    _write_csv(out / "speedups.csv", ["metric"] + report.entities, [
        ["execution"] + [_fmt(report.execution_speedup[e]) for e in report.entities],
        ["planning"] + [_fmt(report.planning_speedup[e]) for e in report.entities],
    ])
    written.append(out / "speedups.csv")
    _write_csv(out / "speedups_by_n.csv", ["entity", "metric"] + [str(n) for n in report.ladder], [
        row for e in report.entities for row in (
            [e, "execution"] + [_fmt(v) for v in report.execution_by_n[e]],
            [e, "planning"] + [_fmt(v) for v in report.planning_by_n[e]],
        )
    ])
    written.append(out / "speedups_by_n.csv")
    return written


def write_samples(samples: Sequence[BenchSample], path) -> None:
    _write_csv(Path(path), _SAMPLE_FIELDS, [
        [s.entity, s.n_requests, s.mode.value, repr(s.execution_ms), repr(s.planning_ms),
         s.measured, s.statements, s.rounds]
        for s in samples
    ])


def read_samples(path) -> list[BenchSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            BenchSample(
                entity=row["entity"],
                n_requests=int(row["n_requests"]),
                mode=Mode(row["mode"]),
                execution_ms=float(row["execution_ms"]),
                planning_ms=float(row["planning_ms"]),
                measured=row.get("measured") or "wall_clock",
                statements=int(row.get("statements") or 0),
                rounds=int(row.get("rounds") or 1),
            )
            for row in csv.DictReader(fh)
        ]
