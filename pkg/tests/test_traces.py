import pytest

from core.errors import FingerprintMismatchError, LabError
from services.engine import run_gd
from services.traces import (
    SUMMARY_COLUMNS,
    TRACE_COLUMNS,
    RoundRecord,
    RunTrace,
    compare_traces,
    ensure_same_task,
    metadata_path,
    read_trace,
    read_trace_csv,
    write_gnuplot,
    write_metadata,
    write_summary,
    write_trace_csv,
)


def make_trace(run_id, values, bits_per_round=64, n=2, d=2):
    trace = RunTrace(run_id=run_id, method="gd", compressor="none", n=n, d=d, seed=0)
    for t, value in enumerate(values):
        trace.append(RoundRecord(t, 1, 2 * t, bits_per_round * t, value, value, None))
    return trace


def test_header_is_fixed(tmp_path):
    path = write_trace_csv(make_trace("a", [1.0]), tmp_path / "a.csv")
    assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    assert TRACE_COLUMNS[-1] == "f_gap"


def test_csv_preserves_values_exactly(small_task, tmp_path):
    trace = run_gd(small_task, 0.1, 20, f_star=-0.5)
    loaded = read_trace_csv(write_trace_csv(trace, tmp_path / "gd.csv"))
    assert loaded == [trace]


def test_missing_f_star_leaves_f_gap_empty(tmp_path):
    path = write_trace_csv(make_trace("a", [1.0, 0.5]), tmp_path / "a.csv")
    assert all(line.endswith(",") for line in path.read_text().splitlines()[1:])
    assert read_trace_csv(path)[0].records[1].f_gap is None


def test_rows_group_by_run(tmp_path):
    first = write_trace_csv(make_trace("a", [1.0, 0.5]), tmp_path / "a.csv")
    second = tmp_path / "b.csv"
    write_trace_csv(make_trace("b", [2.0]), second)
    merged = tmp_path / "merged.csv"
    merged.write_text(first.read_text() + "".join(second.read_text().splitlines(keepends=True)[1:]))
    assert [trace.run_id for trace in read_trace_csv(merged)] == ["a", "b"]


def test_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("round,value\n0,1.0\n")
    with pytest.raises(LabError):
        read_trace_csv(path)


def test_cumulative_floats_never_decrease():
    trace = make_trace("a", [1.0, 0.5])
    with pytest.raises(ValueError):
        trace.append(RoundRecord(2, 0, 1, 1, 0.1, 0.1))


def test_metadata_sidecar(small_task, tmp_path):
    trace = run_gd(small_task, 0.1, 5)
    csv_path = write_trace_csv(trace, tmp_path / "gd.csv")
    write_metadata(trace, metadata_path(csv_path), config_fingerprint="cfg", task_fingerprint="task")
    loaded = read_trace(csv_path)
    assert loaded.metadata["task_fingerprint"] == "task"
    assert loaded.metadata["x_hat_index"] == trace.x_hat_index
    assert loaded.metadata["metadata"]["gamma"] == 0.1


class TestCompare:
    def test_ties_share_a_rank(self):
        ranking = compare_traces(
            [make_trace("c", [3.0, 1.0]), make_trace("a", [2.0, 1.0]), make_trace("b", [4.0, 2.0])], 64
        )
        assert [(row.run_id, row.rank) for row in ranking] == [("a", 1), ("c", 1), ("b", 3)]

    def test_budget_limits_the_rounds(self):
        cheap = make_trace("cheap", [4.0, 2.0, 1.0], bits_per_round=10)
        dense = make_trace("dense", [4.0, 0.5, 0.1], bits_per_round=100)
        ranking = compare_traces([dense, cheap], 25)
        assert [row.run_id for row in ranking] == ["cheap", "dense"]
        assert ranking[0].value == 1.0

    def test_nothing_within_budget_ranks_last(self):
        ranking = compare_traces([make_trace("a", [1.0], bits_per_round=1), make_trace("b", [0.5])], -1)
        assert all(row.value is None for row in ranking)

    def test_fingerprint_mismatch(self):
        traces = [make_trace("a", [1.0]), make_trace("b", [1.0])]
        with pytest.raises(FingerprintMismatchError):
            ensure_same_task(traces, {"a": "x", "b": "y"})

    def test_missing_fingerprints_fall_back_to_shape(self):
        traces = [make_trace("a", [1.0]), make_trace("b", [1.0], d=3)]
        ensure_same_task(traces[:1] + [make_trace("c", [1.0])], {"a": "x", "c": None})
        with pytest.raises(FingerprintMismatchError):
            ensure_same_task(traces, {"a": "x", "b": None})


def test_gnuplot_columns(tmp_path):
    path = write_gnuplot(make_trace("a", [1.0, 0.25]), tmp_path / "a.dat")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[-1] == "64 0.25"


def test_summary_blanks_missing_values(tmp_path):
    path = write_summary([{"run_id": "a", "final_f_gap": None, "diverged": False}], tmp_path / "summary.csv")
    header, row = path.read_text().splitlines()
    assert header == ",".join(SUMMARY_COLUMNS)
    assert row.split(",")[SUMMARY_COLUMNS.index("final_f_gap")] == ""
    assert row.split(",")[SUMMARY_COLUMNS.index("diverged")] == "False"
