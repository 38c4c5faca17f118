"""Synchronous multi-worker simulation of MARINA, EF21 and gradient descent.

Rounds are a strict barrier: workers may be evaluated on a thread pool within a round,
but every reduction adds worker rows in ascending id order, so traces never depend on
the number of threads.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, TypeVar

import numpy as np

from core.errors import DivergenceError, InvalidParameterError
from core.models import CompressorKind, Method, Objective, RunConfig, SmoothnessConstants
from core.rng import Purpose, make_stream
from services.compressors import RoundContext, SparseMessage, compress, topk
from services.tasks import DistributedTask, ordered_mean
from services.traces import RoundRecord, RunTrace

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
# cum_floats_per_node and cum_bits_per_node add the largest per-worker upload of each round
CUM_AGGREGATE = "max_over_workers"

R = TypeVar("R")


@dataclass
class RoundOutcome:
    """What one round produced: the new iterate, its full gradient and the per-worker uplink cost."""

    x: np.ndarray
    full_gradient: np.ndarray
    theta: int
    payloads: np.ndarray
    bits: np.ndarray
    extras: dict[str, float] = field(default_factory=dict)


class BaseEngine:
    method: Method

    def __init__(self, task: DistributedTask, config: RunConfig, *, f_star: float | None = None) -> None:
        if config.method != self.method:
            raise InvalidParameterError(f"{type(self).__name__} cannot run method {config.method.value}")
        self.task = task
        self.config = config
        self.f_star = f_star
        self.n = task.n
        self.d = task.d
        self._executor: Executor | None = None

    # Worker evaluation

    def map_workers(self, fn: Callable[[int], R]) -> list[R]:
        if self._executor is None:
            return [fn(i) for i in range(self.n)]
        return list(self._executor.map(fn, range(self.n)))

    def gradients(self, x: np.ndarray) -> np.ndarray:
        if self._executor is None:
            return self.task.worker_gradients(x)
        return np.stack(self.map_workers(lambda i: self.task.worker_gradient(i, x)))

    def context(self, round_: int, worker: int) -> RoundContext:
        return RoundContext(self.config.master_seed, round_, worker, self.n, self.d)

    def dense_costs(self) -> tuple[np.ndarray, np.ndarray]:
        payloads = np.full(self.n, self.d, dtype=np.int64)
        return payloads, payloads * self.config.bits_per_coord

    def message_costs(self, messages: Sequence[SparseMessage]) -> tuple[np.ndarray, np.ndarray]:
        payloads = np.array([m.payload_coords for m in messages], dtype=np.int64)
        bits = np.array([m.bits(self.config.bits_per_coord) for m in messages], dtype=np.int64)
        return payloads, bits

    # Method hooks

    def initialize(self, x0: np.ndarray) -> np.ndarray:
        """Set up worker state at x0 and return the full gradient there."""
        raise NotImplementedError

    def step(self, t: int, x: np.ndarray) -> RoundOutcome:
        raise NotImplementedError

    # Driver

    def new_trace(self) -> RunTrace:
        spec = self.config.compressor
        run_id = self.config.run_id or f"{self.method.value}-s{self.config.master_seed}"
        return RunTrace(
            run_id=run_id,
            method=self.method.value,
            compressor=spec.label() if spec is not None else "none",
            n=self.n,
            d=self.d,
            seed=self.config.master_seed,
            metadata={**self.config.metadata, "cum_floats_aggregate": CUM_AGGREGATE},
        )

    def record(
        self,
        trace: RunTrace,
        t: int,
        x: np.ndarray,
        full_gradient: np.ndarray,
        theta: int,
        cum: tuple[int, int],
        extras: dict[str, float] | None = None,
    ) -> RoundRecord:
        f_value = self.task.value(x)
        record = RoundRecord(
            round=t,
            theta=theta,
            cum_floats_per_node=cum[0],
            cum_bits_per_node=cum[1],
            grad_norm_sq=float(full_gradient @ full_gradient),
            f_value=f_value,
            f_gap=None if self.f_star is None else f_value - self.f_star,
            extras=extras or {},
        )
        trace.append(record)
        return record

    def guard(self, trace: RunTrace, t: int, x: np.ndarray) -> None:
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t, "non-finite iterate", trace)
        norm = float(np.linalg.norm(x))
        if norm > DIVERGENCE_LIMIT:
            raise DivergenceError(t, f"iterate norm {norm:.3e} above {DIVERGENCE_LIMIT:g}", trace)

    def run(self) -> RunTrace:
        config = self.config
        trace = self.new_trace()
        x = np.array(self.task.x0, dtype=np.float64, copy=True)
        x_hat_index = int(make_stream(config.master_seed, Purpose.XHAT).integers(0, config.T)) if config.T else 0
        x_hat = x.copy()

        logger.info(
            f"Starting {trace.run_id}: {self.method.value} {trace.compressor} "
            f"n={self.n} d={self.d} gamma={config.gamma:.6g} p={config.p:g} T={config.T}"
        )
        pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
        self._executor = pool
        try:
            full = self.initialize(x)
            self.record(trace, 0, x, full, 1, (0, 0), self.initial_extras())
            cum_floats = 0
            cum_bits = 0
            mean_floats = 0.0
            for t in range(config.T):
                outcome = self.step(t, x)
                self.guard(trace, t + 1, outcome.x)
                cum_floats += int(outcome.payloads.max())
                cum_bits += int(outcome.bits.max())
                mean_floats += float(outcome.payloads.mean())
                record = self.record(
                    trace,
                    t + 1,
                    outcome.x,
                    outcome.full_gradient,
                    outcome.theta,
                    (cum_floats, cum_bits),
                    outcome.extras,
                )
                if not math.isfinite(record.f_value) or abs(record.f_value) > DIVERGENCE_LIMIT:
                    raise DivergenceError(t + 1, f"objective value {record.f_value:.3e}", trace)
                if config.log_every and (t + 1) % config.log_every == 0:
                    logger.debug(
                        f"{trace.run_id} round {t + 1}: grad_norm_sq={record.grad_norm_sq:.6e} "
                        f"f={record.f_value:.6e} floats={cum_floats}"
                    )
                if t + 1 == x_hat_index:
                    x_hat = outcome.x.copy()
                x = outcome.x
        except DivergenceError as exc:
            logger.warning(f"{trace.run_id} diverged at round {exc.round}: {exc.reason}")
            trace.metadata["diverged_round"] = exc.round
            raise
        finally:
            self._executor = None
            if pool is not None:
                pool.shutdown(wait=True)

        trace.x_hat_index = x_hat_index
        trace.x_hat = x_hat
        trace.metadata.update(
            {
                "gamma": config.gamma,
                "p": config.p,
                "bits_per_coord": config.bits_per_coord,
                "index_bits": config.index_bits,
                "cum_floats_max_per_node": trace.final.cum_floats_per_node,
                "cum_floats_mean_per_node": mean_floats,
                "x_hat_index": x_hat_index,
                "argmin_grad_index": trace.argmin_grad_index(),
            }
        )
        logger.info(f"Finished {trace.run_id}: final grad_norm_sq={trace.final.grad_norm_sq:.6e}")
        return trace

    def initial_extras(self) -> dict[str, float]:
        return {}


class GDEngine(BaseEngine):
    """x^{t+1} = x^t - gamma grad f(x^t); every worker uploads its dense gradient."""

    method = Method.GD

    def initialize(self, x0: np.ndarray) -> np.ndarray:
        self._full = ordered_mean(self.gradients(x0))
        return self._full

    def step(self, t: int, x: np.ndarray) -> RoundOutcome:
        x_new = x - self.config.gamma * self._full
        self._full = ordered_mean(self.gradients(x_new))
        payloads, bits = self.dense_costs()
        return RoundOutcome(x_new, self._full, 1, payloads, bits)


class MarinaEngine(BaseEngine):
    """Compressed gradient differences with a shared Bernoulli(p) full-sync coin per round."""

    method = Method.MARINA

    def initialize(self, x0: np.ndarray) -> np.ndarray:
        self._grads = self.gradients(x0)
        self._g = ordered_mean(self._grads)
        return self._g

    def initial_extras(self) -> dict[str, float]:
        return {"estimator_error": 0.0, "step_sq": 0.0, "consistency_gap": 0.0}

    def step(self, t: int, x: np.ndarray) -> RoundOutcome:
        config = self.config
        spec = config.compressor
        assert spec is not None
        x_new = x - config.gamma * self._g
        grads_new = self.gradients(x_new)
        full_sync = bool(make_stream(config.master_seed, Purpose.THETA, t).random() < config.p)

        if full_sync:
            rows = grads_new
            payloads, bits = self.dense_costs()
            consistency_gap = 0.0
        else:
            diffs = grads_new - self._grads
            messages = self.map_workers(
                lambda i: compress(spec, diffs[i], self.context(t, i), index_bits=config.index_bits)
            )
            rows = np.tile(self._g, (self.n, 1))
            for i, message in enumerate(messages):
                message.add_to(rows[i])
            payloads, bits = self.message_costs(messages)
            incremental = self._g + ordered_mean(rows - self._g)
            consistency_gap = float(np.max(np.abs(incremental - ordered_mean(rows))))

        g_new = ordered_mean(rows)
        full_new = ordered_mean(grads_new)
        error = g_new - full_new
        step = x_new - x
        extras = {
            "estimator_error": float(error @ error),
            "step_sq": float(step @ step),
            "consistency_gap": consistency_gap,
        }
        self._grads = grads_new
        self._g = g_new
        return RoundOutcome(x_new, full_new, int(full_sync), payloads, bits, extras)


class EF21Engine(BaseEngine):
    """Per-worker gradient memories refreshed on the TopK coordinates of their current error."""

    method = Method.EF21

    def initialize(self, x0: np.ndarray) -> np.ndarray:
        grads = self.gradients(x0)
        self._memory = grads.copy()
        self._g = ordered_mean(self._memory)
        return ordered_mean(grads)

    def initial_extras(self) -> dict[str, float]:
        return {"memory_error": 0.0, "step_sq": 0.0}

    def step(self, t: int, x: np.ndarray) -> RoundOutcome:
        config = self.config
        spec = config.compressor
        assert spec is not None and spec.kind == CompressorKind.TOPK
        k = spec.k or 0
        x_new = x - config.gamma * self._g
        grads_new = self.gradients(x_new)
        memory = self._memory
        messages = self.map_workers(lambda i: topk(grads_new[i] - memory[i], k, index_bits=config.index_bits))
        for i, message in enumerate(messages):
            # g_i + C(grad_i - g_i) keeps g_i off the support and equals grad_i on it
            memory[i, message.indices] = grads_new[i, message.indices]
        self._g = ordered_mean(memory)
        payloads, bits = self.message_costs(messages)

        gap = memory - grads_new
        step = x_new - x
        extras = {
            "memory_error": float(np.mean(np.sum(gap * gap, axis=1))),
            "step_sq": float(step @ step),
        }
        return RoundOutcome(x_new, ordered_mean(grads_new), 0, payloads, bits, extras)


ENGINES: dict[Method, type[BaseEngine]] = {
    Method.GD: GDEngine,
    Method.MARINA: MarinaEngine,
    Method.EF21: EF21Engine,
}


def run_method(task: DistributedTask, config: RunConfig, *, f_star: float | None = None) -> RunTrace:
    return ENGINES[config.method](task, config, f_star=f_star).run()


def run_marina(task: DistributedTask, config: RunConfig, *, f_star: float | None = None) -> RunTrace:
    return MarinaEngine(task, config, f_star=f_star).run()


def run_ef21(task: DistributedTask, config: RunConfig, *, f_star: float | None = None) -> RunTrace:
    return EF21Engine(task, config, f_star=f_star).run()


def run_gd(
    task: DistributedTask,
    gamma: float,
    T: int,
    *,
    master_seed: int = 0,
    f_star: float | None = None,
    **options: Any,
) -> RunTrace:
    config = RunConfig(method=Method.GD, gamma=gamma, T=T, master_seed=master_seed, **options)
    return GDEngine(task, config, f_star=f_star).run()


# Theory checks


@dataclass(frozen=True)
class TheoryReport:
    objective: Objective
    passed: bool
    rhs: float
    lhs_min: float
    lhs_mean: float
    violations: list[int] = field(default_factory=list)


def theory_check(
    trace: RunTrace,
    constants: SmoothnessConstants,
    gamma: float,
    T: int | None = None,
    *,
    objective: Objective = Objective.NONCONVEX,
    delta0: float | None = None,
) -> TheoryReport:
    """Evaluate the convergence guarantee on one run.

    Nonconvex: min over t < T of ||grad f(x^t)||^2 against 2 delta0 / (gamma T); the mean over
    t < T is reported alongside. PL: f(x^t) - f* <= (1 - gamma mu)^t delta0 at every round.
    """
    rounds = trace.rounds if T is None else T
    if rounds < 1 or rounds > trace.rounds:
        raise InvalidParameterError(f"T must lie in 1..{trace.rounds}, got {rounds}")
    if gamma <= 0:
        raise InvalidParameterError(f"gamma must be positive, got {gamma}")
    if delta0 is None:
        delta0 = trace.records[0].f_gap
        if delta0 is None:
            raise InvalidParameterError("delta0 is unknown: pass it or run with f* set")

    if objective == Objective.PL:
        if not constants.mu:
            raise InvalidParameterError("the PL check needs a positive mu")
        gaps = [record.f_gap for record in trace.records[: rounds + 1]]
        if any(gap is None for gap in gaps):
            raise InvalidParameterError("the PL check needs f* (f_gap missing from the trace)")
        rate = 1.0 - gamma * constants.mu
        bounds = [rate**t * delta0 for t in range(rounds + 1)]
        violations = [
            t for t, (gap, bound) in enumerate(zip(gaps, bounds)) if gap > bound + 1e-12 * max(1.0, abs(delta0))
        ]
        final_gap = float(gaps[-1])  # type: ignore[arg-type]
        return TheoryReport(objective, not violations, bounds[-1], final_gap, final_gap, violations)

    norms = trace.column("grad_norm_sq")[:rounds]
    rhs = 2.0 * delta0 / (gamma * rounds)
    lhs_min = float(norms.min())
    return TheoryReport(objective, lhs_min <= rhs, rhs, lhs_min, float(norms.mean()))


def averaged_grad_norm(traces: Sequence[RunTrace], *, form: str = "mean", T: int | None = None) -> float:
    """Seed average of either mean_t ||grad f(x^t)||^2 over t < T or ||grad f(x_hat)||^2."""
    if not traces:
        raise InvalidParameterError("no traces to average")
    values = []
    for trace in traces:
        if form == "x_hat":
            if trace.x_hat_index is None:
                raise InvalidParameterError(f"{trace.run_id} has no x_hat index")
            values.append(trace.records[trace.x_hat_index].grad_norm_sq)
        elif form == "mean":
            rounds = trace.rounds if T is None else T
            values.append(float(trace.column("grad_norm_sq")[: max(rounds, 1)].mean()))
        else:
            raise InvalidParameterError(f"form must be 'mean' or 'x_hat', got {form!r}")
    return float(np.mean(values))
