"""The four lab commands: generate, run, compare and constants.

Each command takes validated configuration, does its work through the services and
returns plain data; printing and exit codes belong to :mod:`app.cli`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from core.config import (
    ArtifactTaskConfig,
    AutoencoderTaskConfig,
    ExperimentConfig,
    MethodConfig,
    QuadraticTaskConfig,
)
from core.errors import DivergenceError, NonConvergenceError
from core.models import ABConstants, Method, Objective, RunConfig, SmoothnessConstants
from services.analysis import constants_report, ef21_params, marina_stepsize
from services.autoencoder import AutoencoderTask, build_autoencoder_task
from services.compressors import ab_constants, contraction_alpha, expected_payload
from services.engine import run_method
from services.quadratic import DenseQuadraticTask, QuadraticTask, f_star_quadratic, generate_quadratic
from services.tasks import DistributedTask, load_task, save_task, task_fingerprint
from services.traces import (
    RankedRun,
    RunTrace,
    compare_traces,
    ensure_same_task,
    metadata_path,
    read_trace,
    write_gnuplot,
    write_metadata,
    write_summary,
    write_trace_csv,
)

logger = logging.getLogger(__name__)

TASK_FILENAME = "task.pklt"
REPORT_FILENAME = "report.yaml"
SUMMARY_FILENAME = "summary.csv"


# Task preparation


def build_task(config: QuadraticTaskConfig | AutoencoderTaskConfig | ArtifactTaskConfig) -> DistributedTask:
    if isinstance(config, QuadraticTaskConfig):
        return generate_quadratic(config.n, config.d, config.lambda_, config.noise_scale, config.seed)
    if isinstance(config, AutoencoderTaskConfig):
        return build_autoencoder_task(
            config.n,
            config.d_f,
            config.d_e,
            config.lambda_,
            config.p_hat,
            idx_path=config.idx_path,
            samples=config.samples,
            seed=config.seed,
        )
    return load_task(config.path)


@dataclass
class TaskReference:
    """Everything the stepsize rules and reports need to know about a task."""

    task: DistributedTask
    constants: SmoothnessConstants
    f_star: float | None
    delta0: float
    fingerprint: str
    metadata: dict[str, Any] = field(default_factory=dict)


def task_constants(task: DistributedTask) -> SmoothnessConstants:
    constants = getattr(task, "constants", None)
    if constants is None:
        raise NonConvergenceError(f"task kind {task.kind} exposes no smoothness constants")
    result = constants()
    if not result.exact:
        logger.warning(f"Constants for {task.kind} are pessimistic estimates, not exact values")
    return result


def prepare_task(task: DistributedTask) -> TaskReference:
    constants = task_constants(task)
    f_star: float | None = None
    if isinstance(task, QuadraticTask) or (isinstance(task, DenseQuadraticTask) and task.mu):
        f_star, _ = f_star_quadratic(task)
    f0 = task.value(task.x0)
    # the autoencoder loss is nonnegative, so 0 bounds f* from below
    delta0 = f0 - (f_star if f_star is not None else 0.0)
    metadata: dict[str, Any] = {"task_kind": task.kind, "n": task.n, "d": task.d}
    if isinstance(task, AutoencoderTask):
        metadata["normalization"] = task.normalization
        metadata["p_hat"] = task.p_hat
    return TaskReference(task, constants, f_star, max(delta0, 0.0), task_fingerprint(task), metadata)


def report_for(reference: TaskReference, experiment: ExperimentConfig) -> dict[str, Any]:
    objective = experiment.run.objective
    if objective == Objective.PL and not reference.constants.mu:
        logger.warning("Task has no known mu; reporting nonconvex predictions only")
        objective = Objective.NONCONVEX
    report = constants_report(
        reference.constants,
        n=reference.task.n,
        d=reference.task.d,
        delta0=reference.delta0,
        eps=experiment.run.eps,
        objective=objective,
    )
    report["f_star"] = reference.f_star
    report["task_fingerprint"] = reference.fingerprint
    return report


# generate


@dataclass
class GenerateResult:
    artifact: Path
    report_path: Path
    report: dict[str, Any]


def cmd_generate(experiment: ExperimentConfig, out_dir: str | Path | None = None) -> GenerateResult:
    target = Path(out_dir or experiment.output.directory)
    reference = prepare_task(build_task(experiment.task))
    artifact = save_task(reference.task, target / TASK_FILENAME)
    report = report_for(reference, experiment)
    report["config_fingerprint"] = experiment.fingerprint()
    report_path = target / REPORT_FILENAME
    report_path.write_text(yaml.safe_dump(report, sort_keys=False), encoding="utf-8")
    logger.info(f"Wrote {artifact} and {report_path}")
    return GenerateResult(artifact, report_path, report)


# constants


def cmd_constants(experiment: ExperimentConfig) -> dict[str, Any]:
    reference = prepare_task(build_task(experiment.task))
    return report_for(reference, experiment)


# run


def default_p(method: MethodConfig, task: DistributedTask) -> float:
    if method.p is not None:
        return method.p
    if method.method != Method.MARINA or method.compressor is None:
        return 1.0
    return min(1.0, expected_payload(method.compressor, task.n, task.d) / task.d)


def theory_gamma(method: MethodConfig, reference: TaskReference, p: float, objective: Objective) -> float:
    constants = reference.constants
    task = reference.task
    if method.method == Method.MARINA:
        assert method.compressor is not None
        return marina_stepsize(constants, ab_constants(method.compressor, task.n, task.d), p, objective)
    if method.method == Method.EF21:
        assert method.compressor is not None
        return ef21_params(contraction_alpha(method.compressor, task.d), constants, objective).gamma
    return marina_stepsize(constants, ABConstants(A=0.0, B=0.0), 1.0, objective)


@dataclass(frozen=True)
class RunCell:
    run_id: str
    method_name: str
    multiplier: float | None
    config: RunConfig


def expand_cells(experiment: ExperimentConfig, reference: TaskReference) -> list[RunCell]:
    """One cell per (method, stepsize multiplier, seed)."""
    objective = experiment.run.objective
    if objective == Objective.PL and not reference.constants.mu:
        logger.warning("Task has no known mu; theoretical stepsizes fall back to the nonconvex rule")
        objective = Objective.NONCONVEX
    cells: list[RunCell] = []
    for method in experiment.methods:
        name = method.display_name()
        p = default_p(method, reference.task)
        if method.gamma.theory:
            base = theory_gamma(method, reference, p, objective)
            grid: list[tuple[float | None, float]] = [(m, m * base) for m in method.gamma.multipliers]
        else:
            grid = [(None, float(method.gamma.value or 0.0))]
        for multiplier, gamma in grid:
            for seed in experiment.run.seeds:
                run_id = f"{name}-s{seed}" if multiplier is None else f"{name}-x{multiplier:g}-s{seed}"
                config = RunConfig(
                    method=method.method,
                    compressor=method.compressor,
                    gamma=gamma,
                    p=p,
                    T=experiment.run.T,
                    master_seed=seed,
                    bits_per_coord=experiment.run.bits_per_coord,
                    index_bits=experiment.run.index_bits,
                    threads=experiment.run.threads,
                    log_every=experiment.run.log_every,
                    run_id=run_id,
                    metadata={**reference.metadata, "method_name": name, "multiplier": multiplier},
                )
                cells.append(RunCell(run_id, name, multiplier, config))
    return cells


@dataclass(frozen=True)
class CellJob:
    cell: RunCell
    task: DistributedTask
    f_star: float | None
    directory: Path
    csv: bool
    gnuplot: bool
    config_fingerprint: str
    task_fingerprint: str


def _write_outputs(job: CellJob, trace: RunTrace) -> None:
    if not job.csv:
        return
    path = write_trace_csv(trace, job.directory / f"{trace.run_id}.csv")
    write_metadata(
        trace,
        metadata_path(path),
        config_fingerprint=job.config_fingerprint,
        task_fingerprint=job.task_fingerprint,
    )
    if job.gnuplot:
        write_gnuplot(trace, path.with_suffix(".dat"))


def execute_cell(job: CellJob) -> dict[str, Any]:
    """Run one cell and write its files; returns its summary row."""
    cell = job.cell
    diverged = False
    try:
        trace = run_method(job.task, cell.config, f_star=job.f_star)
    except DivergenceError as exc:
        diverged = True
        trace = exc.trace
        if trace is None:
            trace = RunTrace(cell.run_id, cell.config.method.value, "", 0, 0, 0)
        trace.metadata["diverged"] = exc.reason
    _write_outputs(job, trace)
    final = trace.records[-1] if trace.records else None
    return {
        "run_id": cell.run_id,
        "method": cell.method_name,
        "compressor": trace.compressor,
        "multiplier": cell.multiplier,
        "gamma": cell.config.gamma,
        "p": cell.config.p,
        "seed": cell.config.master_seed,
        "rounds": trace.rounds,
        "final_grad_norm_sq": None if final is None else final.grad_norm_sq,
        "final_f_gap": None if final is None else final.f_gap,
        "cum_bits_per_node": None if final is None else final.cum_bits_per_node,
        "diverged": diverged,
        "best": False,
    }


def mark_best(rows: list[dict[str, Any]], objective: Objective) -> None:
    """Flag, per method, the stepsize setting with the lowest seed-averaged final metric."""
    metric = "final_f_gap" if objective == Objective.PL else "final_grad_norm_sq"
    by_method: dict[str, dict[Any, list[float]]] = {}
    for row in rows:
        if row["diverged"] or row[metric] is None:
            continue
        by_method.setdefault(row["method"], {}).setdefault(row["multiplier"], []).append(row[metric])
    for method, settings in by_method.items():
        best = min(settings, key=lambda key: float(np.mean(settings[key])))
        for row in rows:
            if row["method"] == method and row["multiplier"] == best and not row["diverged"]:
                row["best"] = True


@dataclass
class RunResult:
    rows: list[dict[str, Any]]
    summary_path: Path

    @property
    def all_diverged(self) -> bool:
        return bool(self.rows) and all(row["diverged"] for row in self.rows)


def cmd_run(experiment: ExperimentConfig) -> RunResult:
    directory = Path(experiment.output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    reference = prepare_task(build_task(experiment.task))
    cells = expand_cells(experiment, reference)
    config_fingerprint = experiment.fingerprint()
    jobs = [
        CellJob(
            cell,
            reference.task,
            reference.f_star,
            directory,
            experiment.output.csv,
            experiment.output.gnuplot,
            config_fingerprint,
            reference.fingerprint,
        )
        for cell in cells
    ]
    logger.info(f"Running {len(jobs)} cells with {experiment.run.jobs} job(s)")
    if experiment.run.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=experiment.run.jobs) as pool:
            rows = list(pool.map(execute_cell, jobs))
    else:
        rows = [execute_cell(job) for job in jobs]

    objective = experiment.run.objective if reference.f_star is not None else Objective.NONCONVEX
    mark_best(rows, objective)
    summary_path = write_summary(rows, directory / SUMMARY_FILENAME)
    diverged = sum(1 for row in rows if row["diverged"])
    logger.info(f"Sweep finished: {len(rows)} runs, {diverged} diverged, summary in {summary_path}")
    return RunResult(rows, summary_path)


# compare


@dataclass
class CompareResult:
    ranking: list[RankedRun]
    plot_files: list[Path]


def cmd_compare(
    paths: Sequence[str | Path], bit_budget: float, *, out_dir: str | Path | None = None, gnuplot: bool = True
) -> CompareResult:
    traces = [read_trace(path) for path in paths]
    fingerprints = {trace.run_id: trace.metadata.get("task_fingerprint") for trace in traces}
    ensure_same_task(traces, fingerprints)
    ranking = compare_traces(traces, bit_budget)
    plot_files: list[Path] = []
    if gnuplot:
        for path, trace in zip(paths, traces):
            target = Path(out_dir) / f"{trace.run_id}.dat" if out_dir else Path(path).with_suffix(".dat")
            target.parent.mkdir(parents=True, exist_ok=True)
            plot_files.append(write_gnuplot(trace, target))
    return CompareResult(ranking, plot_files)
