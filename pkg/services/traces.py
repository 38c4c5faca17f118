"""Run traces and their on-disk forms: CSV, JSON sidecar and gnuplot columns."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from core.errors import FingerprintMismatchError, LabError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "run_id",
    "method",
    "compressor",
    "n",
    "d",
    "seed",
    "round",
    "theta",
    "cum_floats_per_node",
    "cum_bits_per_node",
    "grad_norm_sq",
    "f_value",
    "f_gap",
)

SUMMARY_COLUMNS = (
    "run_id",
    "method",
    "compressor",
    "multiplier",
    "gamma",
    "p",
    "seed",
    "rounds",
    "final_grad_norm_sq",
    "final_f_gap",
    "cum_bits_per_node",
    "diverged",
    "best",
)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    theta: int
    cum_floats_per_node: int
    cum_bits_per_node: int
    grad_norm_sq: float
    f_value: float
    f_gap: float | None = None
    extras: dict[str, float] = field(default_factory=dict, compare=False)


@dataclass
class RunTrace:
    run_id: str
    method: str
    compressor: str
    n: int
    d: int
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    x_hat_index: int | None = field(default=None, compare=False)
    x_hat: np.ndarray | None = field(default=None, compare=False, repr=False)
    metadata: dict[str, Any] = field(default_factory=dict, compare=False)

    def append(self, record: RoundRecord) -> None:
        if self.records and record.cum_floats_per_node < self.records[-1].cum_floats_per_node:
            raise ValueError(f"cumulative floats decreased at round {record.round}")
        self.records.append(record)

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    @property
    def rounds(self) -> int:
        return max(len(self.records) - 1, 0)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(record, name) for record in self.records], dtype=np.float64)

    def extra(self, name: str) -> np.ndarray:
        return np.array([record.extras.get(name, math.nan) for record in self.records], dtype=np.float64)

    def argmin_grad_index(self) -> int:
        return int(np.argmin(self.column("grad_norm_sq")))

    def best_within(self, bit_budget: float) -> float | None:
        """Smallest grad_norm_sq among rounds whose cumulative bits fit the budget."""
        values = [r.grad_norm_sq for r in self.records if r.cum_bits_per_node <= bit_budget]
        return min(values) if values else None


def _format_float(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def trace_rows(trace: RunTrace) -> Iterable[list[str]]:
    for record in trace.records:
        yield [
            trace.run_id,
            trace.method,
            trace.compressor,
            str(trace.n),
            str(trace.d),
            str(trace.seed),
            str(record.round),
            str(record.theta),
            str(record.cum_floats_per_node),
            str(record.cum_bits_per_node),
            _format_float(record.grad_norm_sq),
            _format_float(record.f_value),
            _format_float(record.f_gap),
        ]


def write_trace_csv(trace: RunTrace, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(trace_rows(trace))
    return target


def read_trace_csv(path: str | Path) -> list[RunTrace]:
    """Parse a trace file; rows are grouped by run_id in order of first appearance."""
    source = Path(path)
    traces: dict[str, RunTrace] = {}
    with source.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise LabError(f"{source}: unexpected trace header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_COLUMNS):
                raise LabError(f"{source}:{line_no}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
            values = dict(zip(TRACE_COLUMNS, row))
            trace = traces.get(values["run_id"])
            if trace is None:
                trace = RunTrace(
                    run_id=values["run_id"],
                    method=values["method"],
                    compressor=values["compressor"],
                    n=int(values["n"]),
                    d=int(values["d"]),
                    seed=int(values["seed"]),
                )
                traces[trace.run_id] = trace
            trace.records.append(
                RoundRecord(
                    round=int(values["round"]),
                    theta=int(values["theta"]),
                    cum_floats_per_node=int(values["cum_floats_per_node"]),
                    cum_bits_per_node=int(values["cum_bits_per_node"]),
                    grad_norm_sq=float(values["grad_norm_sq"]),
                    f_value=float(values["f_value"]),
                    f_gap=float(values["f_gap"]) if values["f_gap"] else None,
                )
            )
    return list(traces.values())


def read_trace(path: str | Path) -> RunTrace:
    traces = read_trace_csv(path)
    if len(traces) != 1:
        raise LabError(f"{path}: expected one run, found {len(traces)}")
    trace = traces[0]
    trace.metadata = read_metadata(metadata_path(path)) or {}
    return trace


def metadata_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".meta.json")


def write_metadata(
    trace: RunTrace, path: str | Path, *, config_fingerprint: str | None, task_fingerprint: str | None
) -> Path:
    target = Path(path)
    document = {
        "run_id": trace.run_id,
        "config_fingerprint": config_fingerprint,
        "task_fingerprint": task_fingerprint,
        "x_hat_index": trace.x_hat_index,
        "argmin_grad_index": trace.argmin_grad_index() if trace.records else None,
        "metadata": trace.metadata,
    }
    target.write_text(json.dumps(document, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    return target


def read_metadata(path: str | Path) -> dict[str, Any] | None:
    source = Path(path)
    if not source.exists():
        return None
    return json.loads(source.read_text(encoding="utf-8"))


def write_gnuplot(trace: RunTrace, path: str | Path) -> Path:
    target = Path(path)
    lines = [f"# {trace.run_id} {trace.method} {trace.compressor}", "# cum_bits_per_node grad_norm_sq"]
    lines.extend(f"{r.cum_bits_per_node} {r.grad_norm_sq!r}" for r in trace.records)
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target


def write_summary(rows: Sequence[dict[str, Any]], path: str | Path) -> Path:
    target = Path(path)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(
            handle, fieldnames=SUMMARY_COLUMNS, lineterminator="\n", extrasaction="ignore"
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if row.get(key) is None else row[key] for key in SUMMARY_COLUMNS})
    return target


def ensure_same_task(
    traces: Sequence[RunTrace], fingerprints: dict[str, str | None]
) -> None:
    """Refuse to compare runs over different tasks; fall back to (n, d) where a fingerprint is missing."""
    known = {run: fp for run, fp in fingerprints.items() if fp}
    if len(set(known.values())) > 1:
        raise FingerprintMismatchError(known)
    if len(known) < len(traces):
        logger.warning("Some traces have no metadata sidecar; matching them on (n, d) only")
        shapes = {trace.run_id: (trace.n, trace.d) for trace in traces}
        if len(set(shapes.values())) > 1:
            raise FingerprintMismatchError({run: f"n={n},d={d}" for run, (n, d) in shapes.items()})


@dataclass(frozen=True)
class RankedRun:
    rank: int
    run_id: str
    method: str
    compressor: str
    value: float | None


def compare_traces(traces: Sequence[RunTrace], bit_budget: float) -> list[RankedRun]:
    """Rank runs by their best grad_norm_sq within the bit budget; equal values share a rank."""
    scored = sorted(
        ((trace.best_within(bit_budget), trace) for trace in traces),
        key=lambda item: (item[0] is None, item[0] if item[0] is not None else 0.0, item[1].run_id),
    )
    ranking: list[RankedRun] = []
    previous: float | None = None
    rank = 0
    for position, (value, trace) in enumerate(scored, start=1):
        if position == 1 or value != previous:
            rank = position
        previous = value
        ranking.append(RankedRun(rank, trace.run_id, trace.method, trace.compressor, value))
    return ranking
