from .database import (MeasurementError, PostgresDatabase, SqliteDatabase, Timing,
                       capture_timing, parse_explain)
from .harness import BenchHarness, BenchSample, CellInvalid, Mode, run_benchmark
from .mock_upstream import MockUpstream, serve_mock_upstream
from .report import BenchReport, ReportError, build_report, read_samples, write_report, write_samples
from .schema import DESK_LADDER, ENTITIES, FULL_LADDER, EntitySchema

__all__ = [
    "BenchHarness", "BenchReport", "BenchSample", "CellInvalid", "DESK_LADDER", "ENTITIES",
    "EntitySchema", "MeasurementError", "MockUpstream", "Mode", "FULL_LADDER",
    "PostgresDatabase", "ReportError", "SqliteDatabase", "Timing", "build_report",
    "capture_timing", "parse_explain", "read_samples", "run_benchmark", "serve_mock_upstream",
    "write_report", "write_samples",
]
