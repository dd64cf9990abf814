import json
import random
import sys
import types
from pathlib import Path

import pytest

from coalesce_proxy.bench import (BenchHarness, BenchSample, CellInvalid, MeasurementError,
                                  MockUpstream, Mode, PostgresDatabase, ReportError,
                                  SqliteDatabase, build_report, capture_timing, parse_explain,
                                  read_samples, write_report, write_samples)
from coalesce_proxy.bench.harness import PAYLOAD_LENGTH, make_payloads
from coalesce_proxy.bench.schema import (ENTITIES, FULL_LADDER, create_table_sql, entity,
                                         insert_sql, quote_literal, validate_row)
from coalesce_proxy.coalescer import encode_records
from coalesce_proxy.upstream import BINARY_BULK_TYPE, COALESCE_HEADER

from conftest import request

FIXTURES = Path(__file__).parent / "fixtures"


def test_entities_encode_shape():
    assert {n: (e.text_columns, e.foreign_keys) for n, e in ENTITIES.items()} == {
        "4c0fk": (4, 0), "4c2fk": (4, 2), "10c0fk": (10, 0), "10c2fk": (10, 2)}
    assert entity("10c2fk").references == ["4c0fk", "10c0fk"]
    assert entity("4c2fk").all_columns == ["c1", "c2", "c3", "c4", "ref_4c0fk", "ref_10c0fk"]
    with pytest.raises(ValueError):
        entity("3c1fk")


def test_ladder():
    assert FULL_LADDER == (1, 100, 1000, 5000, 10000, 25000, 50000, 100000)


def test_create_table_references():
    sql = create_table_sql(entity("4c2fk"))
    assert 'ref_4c0fk INTEGER NOT NULL REFERENCES "4c0fk"(id)' in sql
    assert 'ref_10c0fk INTEGER NOT NULL REFERENCES "10c0fk"(id)' in sql


def test_quote_literal():
    assert quote_literal("it's") == "'it''s'"
    assert quote_literal(7) == "7"
    for bad in (True, None, 1.5):
        with pytest.raises(TypeError):
            quote_literal(bad)


def test_insert_sql_multi_row():
    e = entity("4c0fk")
    sql = insert_sql(e, [{"c1": "a", "c2": "b", "c3": "c", "c4": "d"}] * 2)
    assert sql == ('INSERT INTO "4c0fk" (c1, c2, c3, c4) VALUES '
                   "('a','b','c','d'),('a','b','c','d')")


def test_validate_row():
    e = entity("4c2fk")
    good = {"c1": "a", "c2": "b", "c3": "c", "c4": "d", "ref_4c0fk": 1, "ref_10c0fk": 1}
    assert validate_row(e, good) == good
    for bad in ([1], {**good, "c1": 3}, {**good, "ref_4c0fk": "1"}, {**good, "ref_4c0fk": True}):
        with pytest.raises(ValueError):
            validate_row(e, bad)


def test_payloads_distinct_same_length():
    payloads = make_payloads(entity("4c0fk"), 500, random.Random(1))
    values = [v for p in payloads for v in json.loads(p).values()]
    assert len(set(values)) == len(values) == 2000
    assert {len(v) for v in values} == {PAYLOAD_LENGTH}


def test_parse_explain_pg16():
    text = (FIXTURES / "explain_pg16_fk.txt").read_text()
    execution, planning = parse_explain(text)
    assert (execution, planning) == (0.289, 0.041)
    assert execution > 0 and planning > 0


def test_parse_explain_older_capitalisation():
    assert parse_explain((FIXTURES / "explain_pg96.txt").read_text()) == (0.055, 0.019)


def test_parse_explain_malformed():
    raw = (FIXTURES / "explain_malformed.txt").read_text()
    with pytest.raises(MeasurementError) as err:
        parse_explain(raw)
    assert err.value.raw == raw


@pytest.fixture
def db(tmp_path):
    d = SqliteDatabase(str(tmp_path / "db.sqlite3"), list(ENTITIES.values()))
    yield d
    d.close()


def test_sqlite_fallback_timing(db):
    e = entity("4c0fk")
    t = capture_timing(db, insert_sql(e, [{c: "x" for c in e.columns}]))
    assert t.planning_ms == 0.0 and t.execution_ms >= 0.0
    assert t.measured == "thread_cpu"
    assert db.count("4c0fk") == 2  # seeded reference row + 1


def test_sqlite_wall_clock_flag(tmp_path):
    d = SqliteDatabase(str(tmp_path / "w.sqlite3"), [entity("4c0fk")], clock="wall")
    e = entity("4c0fk")
    assert d.insert(e, [{c: "x" for c in e.columns}]).measured == "wall_clock"


def test_capture_timing_rejects_non_insert(db):
    with pytest.raises(ValueError):
        capture_timing(db, "DELETE FROM x")


def test_reset_reseeds_references(db):
    e = entity("4c2fk")
    db.insert(e, [dict({c: "x" for c in e.columns}, ref_4c0fk=1, ref_10c0fk=1)])
    db.reset()
    assert db.count("4c2fk") == 0 and db.count("4c0fk") == 1 and db.count("10c0fk") == 1


class FakePgConn:
    def __init__(self, explain_text):
        self.explain_text = explain_text
        self.executed = []

    def execute(self, sql, params=None):
        self.executed.append(sql)
        rows = [(line,) for line in self.explain_text.splitlines()] if sql.startswith("EXPLAIN") else [(0,)]
        return types.SimpleNamespace(fetchall=lambda: rows, fetchone=lambda: rows[0])

    def close(self):
        pass


def test_postgres_backend_uses_explain_analyze(monkeypatch):
    conn = FakePgConn((FIXTURES / "explain_pg16_fk.txt").read_text())
    fake = types.SimpleNamespace(connect=lambda dsn, autocommit: conn,
                                 errors=types.SimpleNamespace(ForeignKeyViolation=type("FKV", (Exception,), {})))
    monkeypatch.setitem(sys.modules, "psycopg", fake)
    pg = PostgresDatabase("postgresql://x", [entity("4c2fk")])
    e = entity("4c2fk")
    t = pg.insert(e, [dict({c: "x" for c in e.columns}, ref_4c0fk=1, ref_10c0fk=1)])
    assert (t.execution_ms, t.planning_ms, t.measured) == (0.289, 0.041, "explain")
    assert conn.executed[-1].startswith('EXPLAIN (ANALYZE, FORMAT TEXT) INSERT INTO "4c2fk"')
    assert any(s.startswith("TRUNCATE") and "RESTART IDENTITY CASCADE" in s for s in conn.executed)


@pytest.fixture
def mock(db):
    with MockUpstream(db) as m:
        yield m


def row(e, **extra):
    return dict({c: f"v{c}" for c in e.columns}, **{c: 1 for c in e.fk_columns}, **extra)


def test_mock_single_insert(mock):
    e = entity("4c0fk")
    status, _, body = request(mock.url, "POST", "/4c0fk", json.dumps(row(e)).encode())
    assert status == 201 and json.loads(body) == {"accepted": 1}
    assert mock.db.count("4c0fk") == 2
    assert [s.rows for s in mock.statements] == [1]


def test_mock_bulk_insert_one_statement(mock):
    e = entity("10c0fk")
    rows = [row(e, c1=f"r{i}") for i in range(100)]
    status, _, body = request(mock.url, "POST", "/10c0fk", json.dumps(rows).encode(),
                              {COALESCE_HEADER: "100", "Content-Type": "application/json"})
    assert status == 200 and json.loads(body) == {"accepted": 100}
    assert mock.db.count("10c0fk") == 101
    assert [(s.entity, s.rows) for s in mock.statements] == [("10c0fk", 100)]


def test_mock_binary_bulk(mock):
    e = entity("4c0fk")
    payloads = [json.dumps(row(e)).encode() for _ in range(3)]
    status, _, _ = request(mock.url, "POST", "/4c0fk", encode_records(payloads),
                           {COALESCE_HEADER: "3", "Content-Type": BINARY_BULK_TYPE})
    assert status == 200 and mock.db.count("4c0fk") == 4


def test_mock_fk_violation(mock):
    e = entity("4c2fk")
    bad = row(e)
    bad["ref_4c0fk"] = 999
    status, _, body = request(mock.url, "POST", "/4c2fk", json.dumps(bad).encode())
    assert status == 422 and json.loads(body)["rejected"] == 1
    assert mock.db.count("4c2fk") == 0
    status, _, body = request(mock.url, "POST", "/4c2fk", json.dumps([row(e), bad]).encode(),
                              {COALESCE_HEADER: "2"})
    assert status == 422 and json.loads(body)["rejected"] == 2
    assert mock.db.count("4c2fk") == 0


@pytest.mark.parametrize("body, headers", [
    (b"not json", {}),
    (b'{"c1": "only one"}', {}),
    (b'{"a": 1}', {COALESCE_HEADER: "1"}),
    (b"[]", {COALESCE_HEADER: "0"}),
    (b'[{"c1":"a","c2":"b","c3":"c","c4":"d"}]', {COALESCE_HEADER: "2"}),
])
def test_mock_malformed(mock, body, headers):
    assert request(mock.url, "POST", "/4c0fk", body, headers)[0] == 400
    assert mock.db.count("4c0fk") == 1


def test_mock_latest_and_count(mock):
    e = entity("4c0fk")
    request(mock.url, "POST", "/4c0fk", json.dumps(row(e, c1="newest")).encode())
    status, _, body = request(mock.url, "GET", "/4c0fk/latest")
    assert status == 200 and json.loads(body)["c1"] == "newest"
    assert json.loads(request(mock.url, "GET", "/__count/4c0fk")[2]) == {"count": 2}
    assert mock.requests[("GET", "/4c0fk/latest")] == 1
    assert request(mock.url, "GET", "/__count/nope")[0] == 404


@pytest.fixture
def harness(mock, tmp_path):
    h = BenchHarness(mock, tmp_path / "cells", threshold=40, threads=2)
    yield h
    h.close()


@pytest.mark.parametrize("n", [1, 39, 40, 41, 100])
def test_cell_statement_counts(harness, mock, n):
    for mode in Mode:
        sample = harness.run_cell("4c2fk", n, mode)
        assert sample.statements == harness.expected_statements(n, mode)
        assert len(mock.statements) == sample.statements
        assert sum(s.rows for s in mock.statements) == n
        assert mock.db.count("4c2fk") == n


def test_passthrough_statements_are_single_row(harness, mock):
    harness.run_cell("4c0fk", 100, Mode.PASSTHROUGH)
    assert [s.rows for s in mock.statements] == [1] * 100


def test_coalesced_below_threshold_is_one_statement(mock, tmp_path):
    h = BenchHarness(mock, tmp_path, threshold=10_000)
    sample = h.run_cell("10c0fk", 100, Mode.COALESCED)
    assert sample.statements == 1 and [s.rows for s in mock.statements] == [100]
    assert sample.planning_ms == 0.0 and sample.measured == "thread_cpu"


def test_run_ladder_grid(harness):
    samples = harness.run_ladder("4c0fk", tuple(Mode), (1, 10))
    assert [(s.n_requests, s.mode) for s in samples] == [
        (1, Mode.COALESCED), (1, Mode.PASSTHROUGH), (10, Mode.COALESCED), (10, Mode.PASSTHROUGH)]


def test_cell_rerun_once_on_invalid(harness, monkeypatch):
    calls = []
    real = harness.run_cells

    def flaky(names, n, mode):
        calls.append(1)
        if len(calls) == 1:
            raise CellInvalid("simulated")
        return real(names, n, mode)

    monkeypatch.setattr(harness, "run_cells", flaky)
    assert len(harness.run_ladder("4c0fk", (Mode.PASSTHROUGH,), (3,))) == 1
    assert len(calls) == 2


# Reference execution times (ms) for 4c0fk at n = 1, 100, 1000, 10000, 50000, 100000.
PRINTED_4C0FK = {
    Mode.COALESCED: [0.055, 1.831, 9.64, 48.106, 254.99, 514.69],
    Mode.PASSTHROUGH: [0.055, 8.249, 65.345, 633.505, 3174.3, 6413.4],
}
PRINTED_COLUMNS = [1, 100, 1000, 10000, 50000, 100000]


def printed_samples():
    return [BenchSample("4c0fk", n, mode, t, 0.0)
            for mode, times in PRINTED_4C0FK.items() for n, t in zip(PRINTED_COLUMNS, times)]


def test_report_on_printed_values():
    report = build_report(printed_samples())
    # independent arithmetic: passthrough / coalesced per column
    expected = [p / c for p, c in zip(PRINTED_4C0FK[Mode.PASSTHROUGH], PRINTED_4C0FK[Mode.COALESCED])]
    assert report.execution_by_n["4c0fk"] == pytest.approx(expected)
    assert [round(x, 2) for x in report.execution_by_n["4c0fk"]] == [1.00, 4.51, 6.78, 13.17, 12.45, 12.46]
    assert report.execution_speedup["4c0fk"] == pytest.approx(8.39, abs=0.005)
    assert report.planning_speedup["4c0fk"] == 1.0


def test_report_all_equal_is_one():
    samples = [BenchSample(e, n, m, 3.0, 1.0) for e in ("4c0fk", "10c2fk") for n in (1, 5) for m in Mode]
    report = build_report(samples)
    assert set(report.execution_speedup.values()) == {1.0}
    assert set(report.planning_speedup.values()) == {1.0}


def test_report_incomplete():
    with pytest.raises(ReportError):
        build_report([BenchSample("4c0fk", 1, Mode.COALESCED, 1.0, 0.0)])
    with pytest.raises(ReportError) as err:
        build_report(printed_samples()[:-1])
    assert err.value.missing == [("4c0fk", 100000, "passthrough")]
    with pytest.raises(ReportError):
        build_report([])


def test_report_csv_shape_and_determinism(tmp_path):
    report = build_report(printed_samples())
    write_report(report, tmp_path / "a")
    write_report(build_report(list(reversed(printed_samples()))), tmp_path / "b")
    for name in ("execution.csv", "planning.csv", "speedups.csv", "speedups_by_n.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "execution.csv").read_text().splitlines()
    assert lines[0] == "entity,mode,1,100,1000,10000,50000,100000"
    assert [l.split(",")[:2] for l in lines[1:]] == [["4c0fk", "coalesced"], ["4c0fk", "passthrough"]]
    speed = (tmp_path / "a" / "speedups.csv").read_text().splitlines()
    assert speed[0] == "metric,4c0fk"
    assert speed[1].startswith("execution,8.39")


def test_samples_round_trip(tmp_path):
    samples = printed_samples()
    write_samples(samples, tmp_path / "s.csv")
    assert read_samples(tmp_path / "s.csv") == samples


def test_sample_rejects_negative():
    with pytest.raises(ValueError):
        BenchSample("4c0fk", 1, Mode.COALESCED, -1.0, 0.0)


def test_run_grid_takes_min_over_rounds(harness, monkeypatch):
    timings = iter([5.0, 9.0, 3.0, 7.0, 4.0, 8.0])
    real = harness.run_cells

    def fake(names, n, mode):
        samples = real(names, n, mode)
        for s in samples:
            s.execution_ms = next(timings)
        return samples

    monkeypatch.setattr(harness, "run_cells", fake)
    samples = harness.run_grid(["4c0fk"], [2], rounds=3)
    got = {s.mode: (s.execution_ms, s.rounds, s.statements) for s in samples}
    # round-major order: (coalesced, passthrough) per round
    assert got == {Mode.COALESCED: (3.0, 3, 1), Mode.PASSTHROUGH: (7.0, 3, 2)}


def test_run_grid_median_and_validation(harness):
    samples = harness.run_grid(["4c0fk"], [1], modes=(Mode.PASSTHROUGH,), rounds=3,
                               estimator="median")
    assert len(samples) == 1 and samples[0].rounds == 3
    with pytest.raises(ValueError):
        harness.run_grid(["4c0fk"], [1], rounds=0)


def test_run_grid_rejects_inconsistent_statements(harness, monkeypatch):
    counts = iter([1, 2])
    real = harness.run_cells

    def fake(names, n, mode):
        samples = real(names, n, mode)
        samples[0].statements = next(counts)
        return samples

    monkeypatch.setattr(harness, "run_cells", fake)
    with pytest.raises(CellInvalid):
        harness.run_grid(["4c0fk"], [1], modes=(Mode.COALESCED,), rounds=2)


def test_paired_cells_share_one_session(harness, mock):
    for mode in Mode:
        samples = harness.run_cells(["4c0fk", "4c2fk"], 7, mode)
        assert [(s.entity, s.statements) for s in samples] == [
            ("4c0fk", harness.expected_statements(7, mode)),
            ("4c2fk", harness.expected_statements(7, mode))]
        assert mock.db.count("4c2fk") == 7
    # passthrough statements alternate between the two entities
    assert [s.entity for s in mock.statements[:4]] == ["4c0fk", "4c2fk", "4c0fk", "4c2fk"]
