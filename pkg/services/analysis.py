"""Smoothness constants, Hessian variance, theoretical stepsizes and communication complexity."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np
import scipy.linalg

from core.errors import InvalidParameterError, NonConvergenceError
from core.models import (
    ABConstants,
    ComplexityQuery,
    GroupSpec,
    Objective,
    Regime,
    SmoothnessConstants,
)
from core.rng import Purpose, gaussian, make_stream

logger = logging.getLogger(__name__)

DENSE_EIG_LIMIT = 4096

Matvec = Callable[[np.ndarray], np.ndarray]


class GradientOracle(Protocol):
    n: int
    d: int
    x0: np.ndarray

    def worker_gradients(self, x: np.ndarray) -> np.ndarray: ...


# Eigenvalues


def gershgorin_bounds(matvec: Matvec, d: int) -> tuple[float, float]:
    """Interval containing the spectrum, read off the columns A e_j."""
    lo, hi = math.inf, -math.inf
    unit = np.zeros(d)
    for j in range(d):
        unit[j] = 1.0
        column = matvec(unit)
        unit[j] = 0.0
        radius = float(np.sum(np.abs(column)) - abs(column[j]))
        lo = min(lo, float(column[j]) - radius)
        hi = max(hi, float(column[j]) + radius)
    return lo, hi


def _dominant_psd(op: Matvec, d: int, tol: float, max_iter: int, seed: int) -> float:
    stream = make_stream(seed, Purpose.SAMPLING)
    v = gaussian(stream, d)
    v /= np.linalg.norm(v)
    previous: float | None = None
    restarted = False
    for _ in range(max_iter):
        w = op(v)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            if restarted:
                return 0.0
            restarted = True
            v = gaussian(stream, d)
            v /= np.linalg.norm(v)
            continue
        rho = float(v @ w)
        if previous is not None and abs(rho - previous) <= tol * max(1.0, abs(rho)):
            return rho
        previous = rho
        v = w / norm_w
    raise NonConvergenceError(f"power iteration did not reach tolerance {tol} in {max_iter} iterations")


def eig_extreme(
    matvec: Matvec,
    d: int,
    which: str = "max",
    tol: float = 1e-12,
    max_iter: int = 100_000,
    seed: int = 0,
    bounds: tuple[float, float] | None = None,
) -> float:
    """Largest or smallest eigenvalue of a symmetric operator by shifted power iteration."""
    if tol <= 0:
        raise InvalidParameterError(f"tol must be positive, got {tol}")
    if which not in ("max", "min"):
        raise InvalidParameterError(f"which must be 'max' or 'min', got {which!r}")
    lo, hi = bounds if bounds is not None else gershgorin_bounds(matvec, d)
    if hi - lo == 0.0:
        return lo
    if which == "max":
        return lo + _dominant_psd(lambda v: matvec(v) - lo * v, d, tol, max_iter, seed)
    return hi - _dominant_psd(lambda v: hi * v - matvec(v), d, tol, max_iter, seed)


def _symmetric_extremes(matrix: np.ndarray) -> tuple[float, float]:
    d = matrix.shape[0]
    if d <= DENSE_EIG_LIMIT:
        values = scipy.linalg.eigvalsh(matrix)
        return float(values[0]), float(values[-1])
    op: Matvec = lambda v: matrix @ v  # noqa: E731
    bounds = gershgorin_bounds(op, d)
    return eig_extreme(op, d, "min", bounds=bounds), eig_extreme(op, d, "max", bounds=bounds)


# Constants


def _as_family(matrices: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    family = np.asarray(matrices, dtype=np.float64)
    if family.ndim != 3 or family.shape[1] != family.shape[2]:
        raise InvalidParameterError(f"expected n square matrices of common size, got shape {family.shape}")
    scale = max(1.0, float(np.max(np.abs(family))))
    if not np.allclose(family, family.transpose(0, 2, 1), atol=1e-12 * scale, rtol=0.0):
        raise InvalidParameterError("all matrices must be symmetric")
    return family


def quadratic_constants(
    matrices: Sequence[np.ndarray] | np.ndarray, mu: float | None = None
) -> SmoothnessConstants:
    """Exact (L-, L+, L+-) of the family f_i(x) = x'A_i x / 2 - b_i'x."""
    family = _as_family(matrices)
    mean = family.mean(axis=0)
    second = np.einsum("nij,njk->ik", family, family) / family.shape[0]
    variance = second - mean @ mean
    variance = 0.5 * (variance + variance.T)

    mean_lo, mean_hi = _symmetric_extremes(mean)
    _, second_hi = _symmetric_extremes(0.5 * (second + second.T))
    _, variance_hi = _symmetric_extremes(variance)

    l_minus_sq = max(mean_lo * mean_lo, mean_hi * mean_hi)
    return SmoothnessConstants(
        l_minus=math.sqrt(l_minus_sq),
        l_plus=math.sqrt(max(second_hi, 0.0)),
        l_pm=math.sqrt(max(variance_hi, 0.0)),
        mu=mu,
        exact=True,
    )


def group_constants(
    matrices: Sequence[np.ndarray] | np.ndarray, groups: Sequence[Sequence[int]]
) -> list[SmoothnessConstants]:
    family = _as_family(matrices)
    return [quadratic_constants(family[list(members)]) for members in groups]


def _sample_pairs(
    oracle: GradientOracle,
    samples: int,
    seed: int,
    center: np.ndarray | None,
    radius: float,
    directions: Iterable[np.ndarray] | None,
    coordinate_pairs: bool,
    coordinate_limit: int | None,
) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    base = np.asarray(oracle.x0 if center is None else center, dtype=np.float64)
    stream = make_stream(seed, Purpose.SAMPLING)
    for _ in range(samples):
        yield base + radius * gaussian(stream, base.size), base + radius * gaussian(stream, base.size)
    if coordinate_pairs:
        limit = base.size if coordinate_limit is None else min(base.size, coordinate_limit)
        for j in range(limit):
            shifted = base.copy()
            shifted[j] += 1.0
            yield base, shifted
    for direction in directions or ():
        yield base, base + np.asarray(direction, dtype=np.float64)


def empirical_hessian_variance(
    oracle: GradientOracle,
    samples: int = 1000,
    seed: int = 0,
    *,
    center: np.ndarray | None = None,
    radius: float = 1.0,
    directions: Iterable[np.ndarray] | None = None,
    coordinate_pairs: bool = True,
    coordinate_limit: int | None = None,
) -> float:
    """Largest sampled ratio (1/n) sum ||D_i - mean D||^2 / ||x - y||^2, a lower bound on L+-^2."""
    best = 0.0
    pairs = _sample_pairs(
        oracle, samples, seed, center, radius, directions, coordinate_pairs, coordinate_limit
    )
    for x, y in pairs:
        step = x - y
        step_sq = float(step @ step)
        if step_sq == 0.0:
            continue
        delta = oracle.worker_gradients(x) - oracle.worker_gradients(y)
        spread = delta - delta.mean(axis=0)
        best = max(best, float(np.mean(np.sum(spread * spread, axis=1))) / step_sq)
    return best


def sampled_constants(
    oracle: GradientOracle,
    samples: int = 200,
    seed: int = 0,
    *,
    center: np.ndarray | None = None,
    radius: float = 1.0,
) -> SmoothnessConstants:
    """Pessimistic constants L+^2 = L+-^2 = mean L_i^2 from sampled local Lipschitz ratios."""
    local_sq = np.zeros(oracle.n)
    global_sq = 0.0
    for x, y in _sample_pairs(oracle, samples, seed, center, radius, None, False, None):
        step = x - y
        step_sq = float(step @ step)
        if step_sq == 0.0:
            continue
        delta = oracle.worker_gradients(x) - oracle.worker_gradients(y)
        local_sq = np.maximum(local_sq, np.sum(delta * delta, axis=1) / step_sq)
        mean_delta = delta.mean(axis=0)
        global_sq = max(global_sq, float(mean_delta @ mean_delta) / step_sq)
    l_plus = math.sqrt(float(local_sq.mean()))
    logger.warning(f"Using pessimistic sampled constants: L+ = L+- = {l_plus:.6g} from {samples} pairs")
    return SmoothnessConstants(
        l_minus=min(math.sqrt(global_sq), l_plus), l_plus=l_plus, l_pm=l_plus, mu=None, exact=False
    )


# Stepsizes


def _check_probability(p: float) -> None:
    if not 0.0 < p <= 1.0:
        raise InvalidParameterError(f"p must lie in (0, 1], got {p}")


def _marina_gamma(l_minus: float, variance_term: float, p: float, objective: Objective, mu: float | None) -> float:
    _check_probability(p)
    ratio = (1.0 - p) / p
    if objective == Objective.PL:
        if not mu:
            raise InvalidParameterError("the PL stepsize needs a positive mu")
        denominator = l_minus + math.sqrt(2.0 * ratio * variance_term)
        if denominator == 0.0:
            return p / (2.0 * mu)
        return min(1.0 / denominator, p / (2.0 * mu))
    denominator = l_minus + math.sqrt(ratio * variance_term)
    if denominator == 0.0:
        raise InvalidParameterError("all smoothness constants are zero; the stepsize is unbounded")
    return 1.0 / denominator


def marina_stepsize(
    c: SmoothnessConstants, ab: ABConstants, p: float, objective: Objective = Objective.NONCONVEX
) -> float:
    variance_term = (ab.A - ab.B) * c.l_plus**2 + ab.B * c.l_pm**2
    return _marina_gamma(c.l_minus, variance_term, p, objective, c.mu)


@dataclass(frozen=True)
class EF21Params:
    theta: float
    beta: float
    gamma: float


def ef21_params(alpha: float, c: SmoothnessConstants, objective: Objective = Objective.NONCONVEX) -> EF21Params:
    if not 0.0 < alpha <= 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        theta, beta = 1.0, 0.0
    else:
        root = math.sqrt(1.0 - alpha)
        theta = 1.0 - root
        beta = (1.0 - alpha) / (1.0 - root)
    if objective == Objective.PL:
        if not c.mu:
            raise InvalidParameterError("the PL stepsize needs a positive mu")
        denominator = c.l_minus + c.l_plus * math.sqrt(2.0 * beta / theta)
        gamma = theta / (2.0 * c.mu) if denominator == 0.0 else min(1.0 / denominator, theta / (2.0 * c.mu))
    else:
        denominator = c.l_minus + c.l_plus * math.sqrt(beta / theta)
        if denominator == 0.0:
            raise InvalidParameterError("all smoothness constants are zero; the stepsize is unbounded")
        gamma = 1.0 / denominator
    return EF21Params(theta=theta, beta=beta, gamma=gamma)


def group_stepsize(
    groups: Sequence[GroupSpec],
    l_minus: float,
    p: float,
    objective: Objective = Objective.NONCONVEX,
    mu: float | None = None,
    n: int | None = None,
) -> float:
    """MARINA stepsize when workers form groups with independent compressors between groups."""
    if not groups:
        raise InvalidParameterError("at least one group is required")
    total = sum(group.size for group in groups)
    if n is not None and total != n:
        raise InvalidParameterError(f"group sizes sum to {total}, expected n={n}")
    for group in groups:
        if group.A + 1e-12 < group.B:
            raise InvalidParameterError(f"group constants need A >= B, got A={group.A}, B={group.B}")
    variance_term = sum(
        (group.A - group.B) * group.size**2 / total**2 * group.l_plus**2
        + group.B * group.size**2 / total**2 * group.l_pm**2
        for group in groups
    )
    return _marina_gamma(l_minus, variance_term, p, objective, mu)


# Communication complexity


@dataclass(frozen=True)
class ComplexityChoice:
    method: str
    p: float | None = None
    k: int | None = None


def marina_permk(p: float) -> ComplexityChoice:
    return ComplexityChoice("marina_permk", p=p)


def marina_randk(p: float, k: int) -> ComplexityChoice:
    return ComplexityChoice("marina_randk", p=p, k=k)


def ef21_topk(k: int) -> ComplexityChoice:
    return ComplexityChoice("ef21_topk", k=k)


@dataclass(frozen=True)
class ComplexityResult:
    method: str
    value: float
    p: float | None
    k: int | None
    approximate: bool = False


def _accuracy_factor(query: ComplexityQuery) -> float:
    if query.objective == Objective.PL:
        return math.log(query.delta0 / query.eps) if query.delta0 > query.eps else 0.0
    return query.delta0 / query.eps


def comm_complexity(query: ComplexityQuery, choice: ComplexityChoice) -> ComplexityResult:
    """Expected floats sent per node to reach accuracy eps; the suppressed constant is 1."""
    c, d, n = query.constants, query.d, query.n
    factor = _accuracy_factor(query)
    pl = query.objective == Objective.PL
    mu = c.mu or 0.0
    approximate = False

    if choice.method == "ef21_topk":
        k = choice.k or 0
        if not 1 <= k <= d:
            raise InvalidParameterError(f"k must lie in 1..{d}, got {k}")
        rate = c.l_minus + c.l_plus * (d - k + math.sqrt(d * d - d * k)) / k
        if pl:
            value = factor * k * max(rate / mu, 1.0 / (1.0 - math.sqrt(1.0 - k / d)))
        else:
            value = factor * k * rate
        return ComplexityResult(choice.method, value, None, k)

    p = choice.p if choice.p is not None else 1.0
    _check_probability(p)
    ratio = (1.0 - p) / p
    if choice.method == "marina_permk":
        if query.regime == Regime.D_GE_N:
            payload = p * d + (1.0 - p) * (d / n)
            spread = ratio
            approximate = d % n != 0
        else:
            payload = p * d + (1.0 - p)
            spread = ratio * ((d - 1) / (n - 1) if n > 1 else 0.0)
            approximate = n % d != 0
        constant = c.l_pm
        k = None
    elif choice.method == "marina_randk":
        k = choice.k or 0
        if not 1 <= k <= d:
            raise InvalidParameterError(f"k must lie in 1..{d}, got {k}")
        payload = p * d + (1.0 - p) * k
        spread = ratio * (d / k - 1.0) / n
        constant = c.l_plus
    else:
        raise InvalidParameterError(f"unknown method {choice.method!r}")

    if pl:
        value = factor * payload * max((c.l_minus + math.sqrt(2.0 * spread) * constant) / mu, 1.0 / p)
    else:
        value = factor * payload * (c.l_minus + math.sqrt(spread) * constant)
    return ComplexityResult(choice.method, value, p, k, approximate)


def _candidates(query: ComplexityQuery, method: str) -> list[ComplexityChoice]:
    d, n = query.d, query.n
    if method == "marina_permk":
        low = 1.0 / n if query.regime == Regime.D_GE_N else 1.0 / d
        return [marina_permk(low), marina_permk(1.0)]
    if method == "marina_randk":
        if query.regime == Regime.D_GE_N:
            top = max(1, math.floor(d / math.sqrt(n)))
            choices = [marina_randk(k / d, k) for k in range(1, top + 1)]
        else:
            choices = [marina_randk(1.0 / d, 1)]
        return choices + [marina_randk(1.0, d)]
    if method == "ef21_topk":
        return [ef21_topk(k) for k in range(d, 0, -1)]
    raise InvalidParameterError(f"unknown method {method!r}")


def optimal_params(query: ComplexityQuery, method: str) -> ComplexityResult:
    """Best of the prescribed parameter choices, by the evaluated complexity formula."""
    best: ComplexityResult | None = None
    for choice in _candidates(query, method):
        result = comm_complexity(query, choice)
        if best is None or result.value < best.value:
            best = result
    assert best is not None
    return best


METHODS = ("marina_permk", "marina_randk", "ef21_topk")


def constants_report(
    constants: SmoothnessConstants,
    *,
    n: int,
    d: int,
    delta0: float,
    eps: float,
    objective: Objective = Objective.NONCONVEX,
) -> dict[str, Any]:
    """Flat key/value report of constants and optimized complexity predictions."""
    report: dict[str, Any] = {
        "n": n,
        "d": d,
        "l_minus": constants.l_minus,
        "l_plus": constants.l_plus,
        "l_pm": constants.l_pm,
        "mu": constants.mu,
        "exact": constants.exact,
        "delta0": delta0,
        "eps": eps,
        "objective": objective.value,
    }
    objectives = [Objective.NONCONVEX] + ([Objective.PL] if constants.mu else [])
    for target in objectives:
        query = ComplexityQuery(objective=target, constants=constants, d=d, n=n, delta0=delta0, eps=eps)
        report["regime"] = query.regime.value if query.regime else None
        for method in METHODS:
            result = optimal_params(query, method)
            prefix = f"{target.value}_{method}"
            report[f"{prefix}_p"] = result.p
            report[f"{prefix}_k"] = result.k
            report[f"{prefix}_floats"] = result.value
            report[f"{prefix}_approximate"] = result.approximate
    return report
