import csv
import random

import pytest

from hedb.enc_data import TableSchema
from hedb.harness import (
    DEMO_ROWS,
    BenchReport,
    OpRow,
    PlainTable,
    TimingRow,
    bench_ops,
    demo_schema,
    differential_run,
    main,
    oracle_execute,
    random_scenario,
    run_scenario,
    time_product,
)
from hedb.sql_front import parse

DEMO = PlainTable(demo_schema(), list(DEMO_ROWS))


@pytest.mark.parametrize(
    "sql,n,expected",
    [
        ("SELECT * FROM patients WHERE ward = 1", 1, ("Alice", 34, 1)),
        ("SELECT * FROM patients WHERE ward = 1", 3, ("Grace", 71, 1)),
        ("SELECT * FROM patients WHERE ward = 1", 5, ("", 0, 0)),
        ("SELECT * FROM patients WHERE name < 'B'", 1, ("Alice", 34, 1)),
        ("SELECT * FROM patients WHERE name = '?ve'", 1, ("Eve", 45, 2)),
        ("SELECT * FROM patients WHERE name = 'Gr*'", 1, ("Grace", 71, 1)),
        ("SELECT COUNT(*) FROM patients WHERE age > 50", None, 4),
        ("SELECT AVG(age) FROM patients WHERE ward = 2", None, (51 + 45 + 55, 3)),
    ],
)
def test_oracle_queries(sql, n, expected):
    assert oracle_execute(DEMO, parse(sql), n) == expected


def test_oracle_mutations():
    upd = oracle_execute(DEMO, parse("UPDATE patients SET name = 'X', age = 1, ward = 9 WHERE age < 30"))
    assert [r for r in upd.rows if r[0] == "X"] == [("X", 1, 9)] * 2
    dele = oracle_execute(DEMO, parse("DELETE FROM patients WHERE ward = 3"))
    assert len(dele.rows) == len(DEMO_ROWS)
    assert dele.rows.count(("", 0, 0)) == 2


def test_random_scenarios_are_reproducible_and_valid():
    for seed in range(50):
        a, b = random_scenario(seed), random_scenario(seed)
        assert a == b
        ast = parse(a.sql)
        if a.rows:
            assert all(len(r) == len(a.schema.columns) for r in a.rows)
        if ast.kind == "select":
            assert a.n >= 1


def test_scenario_mix_covers_everything():
    kinds, ops = set(), set()
    for seed in range(200):
        ast = parse(random_scenario(seed).sql)
        kinds.add(ast.kind)
        ops.add(ast.predicate.op)
    assert kinds == {"select", "update", "delete", "count", "avg"}
    assert ops == {"=", "<", ">", "like"}


def test_short_differential_run_passes():
    report = differential_run(seed=3, scenarios=15)
    assert report.passed, report.to_text()
    assert sum(report.kinds.values()) == 15
    assert "result: PASS" in report.to_text()


def test_fault_produces_counterexample():
    report = differential_run(seed=1, scenarios=60, faults=["eq_drop_one"], stop_on_failure=True)
    assert not report.passed
    text = report.to_text()
    assert "FAIL" in text and "first counterexample" in text and "scenario seed" in text
    ce = report.failures[0]
    assert run_scenario(ce.scenario, ["eq_drop_one"]) == (ce.expected, ce.got)


def test_bench_ops_report(tmp_path):
    report = bench_ops(TableSchema.from_text("t", "a:uint:8\nb:uint:8\nc:uint:8\n"), rows=10)
    names = [r.statement for r in report.op_rows]
    assert names == ["SELECT", "UPDATE", "DELETE", "COUNT", "AVG"]
    by = {r.statement: r.total for r in report.op_rows}
    assert by["SELECT"] > by["UPDATE"] > by["DELETE"]
    text = report.ops_text()
    assert "reference" in text and "narrower than 28 bits" in text
    out = tmp_path / "ops.csv"
    report.write_csv(out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["statement", "total", "additions", "multiplications"] and len(rows) == 6


def test_timing_product_is_correct():
    row = time_product(2, 4, seed=1)
    assert row.correct and row.recrypts >= 16 and row.seconds > 0


def test_timing_text_and_csv(tmp_path):
    report = BenchReport(timing_rows=[TimingRow(2, 4, 0.01, 40, True)], recrypt_seconds={2: 0.0005})
    text = report.timing_text()
    assert "0.0100" in text and "0.500 ms" in text
    report.write_csv(tmp_path / "t.csv")
    assert list(csv.reader((tmp_path / "t.csv").open()))[1][:2] == ["2", "4"]


def test_seven_day_arithmetic_line():
    report = BenchReport(rows=10, op_rows=[OpRow("SELECT", 10, 20)], recrypt_seconds={2: 0.001})
    text = report.ops_text()
    assert "SELECT would take 0.0 s" in text and "days" in text


def test_cli(capsys, tmp_path):
    schema = tmp_path / "s.schema"
    schema.write_text("a:uint:4\nb:uint:4\n")
    assert main(["ops", "--rows", "3", "--schema", str(schema), "--csv", str(tmp_path / "o.csv")]) == 0
    assert "Arithmetic operations" in capsys.readouterr().out
    assert main(["diff", "--scenarios", "3", "--seed", "2"]) == 0
    assert main(["diff", "--scenarios", "40", "--seed", "1", "--fault", "delete_keep_with_match"]) == 1
    assert main(["timing", "--lambdas", "2", "--widths", "2"]) == 0
    assert "single recrypt" in capsys.readouterr().out


def test_run_scenario_empty_table():
    for seed in range(2000):
        sc = random_scenario(seed)
        if not sc.rows:
            expected, got = run_scenario(sc)
            assert expected == got
            return
    pytest.skip("no empty-table scenario in the first 2000 seeds")


def test_seeded_rng_independent_of_global_state():
    random.seed(0)
    a = random_scenario(5)
    random.seed(1)
    assert random_scenario(5) == a
