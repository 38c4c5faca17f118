"""Compression operators, their shared-randomness protocol and their AB constants.

Every randomized operator comes in two forms: a ``*_from_perm``/``*_from_choice`` form
that takes the randomness explicitly (used by exhaustive enumeration), and a protocol
form that derives the randomness from a :class:`RoundContext`.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from core.errors import EnumerationTooLargeError, InvalidParameterError, UnsupportedCompressorError
from core.models import ABConstants, CompressorKind, CompressorSpec
from core.rng import Purpose, make_stream, shared_permutation

logger = logging.getLogger(__name__)

QUANTIZER_OMEGA = 0.125
DEFAULT_ENUM_LIMIT = 200_000


@dataclass(frozen=True, eq=False)
class SparseMessage:
    """A compressed vector: sorted distinct indices with their values."""

    dim: int
    indices: np.ndarray
    values: np.ndarray
    index_bits: int = 0

    def __post_init__(self) -> None:
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise InvalidParameterError("indices and values must be 1-D arrays of equal length")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise InvalidParameterError(f"indices out of range for dimension {self.dim}")
            if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
                raise InvalidParameterError("indices must be strictly increasing")

    @classmethod
    def empty(cls, dim: int) -> "SparseMessage":
        return cls(dim, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @property
    def payload_coords(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]

    def bits(self, bits_per_coord: int = 32) -> int:
        return self.payload_coords * bits_per_coord + self.index_bits

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def add_to(self, target: np.ndarray) -> None:
        target[self.indices] += self.values


@dataclass(frozen=True)
class RoundContext:
    master_seed: int
    round: int
    worker_id: int
    n: int
    d: int

    def __post_init__(self) -> None:
        if not 0 <= self.worker_id < self.n:
            raise InvalidParameterError(f"worker_id {self.worker_id} outside 0..{self.n - 1}")
        if self.round < 0:
            raise InvalidParameterError(f"round must be nonnegative, got {self.round}")

    def shared_permutation(self, purpose: Purpose, length: int) -> np.ndarray:
        return shared_permutation(self.master_seed, purpose, self.round, length)

    def round_stream(self, purpose: Purpose) -> np.random.Generator:
        return make_stream(self.master_seed, purpose, self.round)

    def worker_stream(self, purpose: Purpose) -> np.random.Generator:
        return make_stream(self.master_seed, purpose, self.round, self.worker_id)


def _as_vector(x: np.ndarray, ctx: RoundContext | None = None) -> np.ndarray:
    vec = np.asarray(x, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise InvalidParameterError(f"expected a non-empty 1-D vector, got shape {vec.shape}")
    if ctx is not None and vec.size != ctx.d:
        raise InvalidParameterError(f"vector has dimension {vec.size}, round context says {ctx.d}")
    return vec


def _check_k(k: int, d: int) -> None:
    if not 1 <= k <= d:
        raise InvalidParameterError(f"k must lie in 1..{d}, got {k}")


# PermK, d >= n


def permk_big_d_from_perm(
    x: np.ndarray, worker_id: int, n: int, coord_perm: np.ndarray, worker_perm: np.ndarray | None = None
) -> SparseMessage:
    d = x.size
    q, r = divmod(d, n)
    chosen = coord_perm[worker_id * q : (worker_id + 1) * q]
    if r:
        if worker_perm is None:
            raise InvalidParameterError(f"d={d} is not divisible by n={n}; a worker permutation is required")
        slot = int(np.flatnonzero(worker_perm == worker_id)[0])
        if slot < r:
            chosen = np.append(chosen, coord_perm[q * n + slot])
    indices = np.sort(chosen)
    return SparseMessage(d, indices.astype(np.int64), n * x[indices])


def permk_big_d(x: np.ndarray, ctx: RoundContext) -> SparseMessage:
    vec = _as_vector(x, ctx)
    if vec.size < ctx.n:
        raise InvalidParameterError(f"permk_big_d needs d >= n, got d={vec.size}, n={ctx.n}; use permk_big_n")
    coord_perm = ctx.shared_permutation(Purpose.COORD_PERM, vec.size)
    worker_perm = ctx.shared_permutation(Purpose.WORKER_PERM, ctx.n) if vec.size % ctx.n else None
    return permk_big_d_from_perm(vec, ctx.worker_id, ctx.n, coord_perm, worker_perm)


# PermK, n >= d


def multiset_slots(n: int, d: int) -> np.ndarray:
    """Each coordinate repeated q = n // d times, padded with r = n - qd empty slots (-1)."""
    q = n // d
    return np.concatenate([np.repeat(np.arange(d), q), np.full(n - q * d, -1)])


def permk_big_n_from_perm(x: np.ndarray, worker_id: int, n: int, arrangement: np.ndarray) -> SparseMessage:
    d = x.size
    q = n // d
    slot = int(multiset_slots(n, d)[arrangement[worker_id]])
    if slot < 0:
        return SparseMessage.empty(d)
    return SparseMessage(d, np.array([slot], dtype=np.int64), np.array([(n / q) * x[slot]]))


def permk_big_n(x: np.ndarray, ctx: RoundContext) -> SparseMessage:
    vec = _as_vector(x, ctx)
    if ctx.n < vec.size:
        raise InvalidParameterError(f"permk_big_n needs n >= d, got n={ctx.n}, d={vec.size}; use permk_big_d")
    if ctx.n < 2:
        raise InvalidParameterError("permk_big_n needs at least two workers")
    arrangement = ctx.shared_permutation(Purpose.WORKER_PERM, ctx.n)
    return permk_big_n_from_perm(vec, ctx.worker_id, ctx.n, arrangement)


# RandK and TopK


def randk_from_choice(x: np.ndarray, chosen: np.ndarray) -> SparseMessage:
    d, k = x.size, chosen.size
    indices = np.sort(chosen).astype(np.int64)
    return SparseMessage(d, indices, x[indices] * (d / k))


def randk(x: np.ndarray, k: int, ctx: RoundContext, shared: bool = False) -> SparseMessage:
    vec = _as_vector(x, ctx)
    _check_k(k, vec.size)
    stream = ctx.round_stream(Purpose.RANDK) if shared else ctx.worker_stream(Purpose.RANDK)
    return randk_from_choice(vec, stream.permutation(vec.size)[:k])


def topk(x: np.ndarray, k: int, index_bits: bool = False) -> SparseMessage:
    """Keep the k largest magnitudes unscaled; ties go to the lower index."""
    vec = _as_vector(x)
    _check_k(k, vec.size)
    indices = np.sort(np.argsort(-np.abs(vec), kind="stable")[:k]).astype(np.int64)
    bits = k * (vec.size - 1).bit_length() if index_bits else 0
    return SparseMessage(vec.size, indices, vec[indices], bits)


# Block permutation


def resolve_partition(spec: CompressorSpec, d: int, n: int) -> list[np.ndarray]:
    if spec.partition is not None:
        blocks = [np.asarray(block, dtype=np.int64) for block in spec.partition]
    else:
        m = spec.num_blocks or 1
        if m > d:
            raise InvalidParameterError(f"cannot split d={d} coordinates into {m} nonempty blocks")
        blocks = [block.astype(np.int64) for block in np.array_split(np.arange(d), m)]
    validate_partition(blocks, d, n)
    return blocks


def validate_partition(blocks: Sequence[np.ndarray], d: int, n: int) -> None:
    if not blocks:
        raise InvalidParameterError("partition has no blocks")
    if len(blocks) > n:
        raise InvalidParameterError(f"partition has {len(blocks)} blocks but only {n} workers")
    if any(len(block) == 0 for block in blocks):
        raise InvalidParameterError("partition blocks must be nonempty")
    merged = np.sort(np.concatenate(blocks))
    if merged.size != d or not np.array_equal(merged, np.arange(d)):
        raise InvalidParameterError(f"partition blocks must be disjoint and cover 0..{d - 1}")


def block_operator_slots(n: int, m: int) -> np.ndarray:
    """Block ids repeated q = n // m times, padded with n - mq zero operators (-1)."""
    q = n // m
    return np.concatenate([np.repeat(np.arange(m), q), np.full(n - q * m, -1)])


def block_perm_from_perm(
    x: np.ndarray, worker_id: int, n: int, blocks: Sequence[np.ndarray], worker_perm: np.ndarray
) -> SparseMessage:
    m = len(blocks)
    q = n // m
    op = int(block_operator_slots(n, m)[worker_perm[worker_id]])
    if op < 0:
        return SparseMessage.empty(x.size)
    indices = np.sort(blocks[op]).astype(np.int64)
    return SparseMessage(x.size, indices, (n / q) * x[indices])


def block_perm(x: np.ndarray, spec: CompressorSpec, ctx: RoundContext) -> SparseMessage:
    vec = _as_vector(x, ctx)
    blocks = resolve_partition(spec, vec.size, ctx.n)
    worker_perm = ctx.shared_permutation(Purpose.WORKER_PERM, ctx.n)
    return block_perm_from_perm(vec, ctx.worker_id, ctx.n, blocks, worker_perm)


# Quantization and composition


def quantize(x: np.ndarray, stream: np.random.Generator) -> np.ndarray:
    """Unbiased stochastic rounding of each entry to the grid sign * 2^e.

    Entries in [2^(e-1), 2^e) move to one of the two endpoints; the relative variance
    is at most 1/8.
    """
    vec = np.asarray(x, dtype=np.float64)
    magnitude = np.abs(vec)
    _, exponent = np.frexp(magnitude)
    low = np.ldexp(0.5, exponent)
    prob_up = np.where(magnitude > 0, (magnitude - low) / np.where(low > 0, low, 1.0), 0.0)
    rounded = np.where(stream.random(vec.shape) < prob_up, 2.0 * low, low)
    return np.where(magnitude > 0, np.sign(vec) * rounded, 0.0)


def _check_quantizer_omega(omega: float) -> None:
    if 0.0 < omega < QUANTIZER_OMEGA:
        raise InvalidParameterError(
            f"power-of-two rounding has variance bound {QUANTIZER_OMEGA}; declared omega {omega} is smaller"
        )


def compose_quantize(
    inner: CompressorSpec, quantizer_omega: float, x: np.ndarray, ctx: RoundContext, *, index_bits: bool = False
) -> SparseMessage:
    vec = _as_vector(x, ctx)
    _check_quantizer_omega(quantizer_omega)
    if quantizer_omega > 0.0:
        vec = quantize(vec, ctx.worker_stream(Purpose.QUANTIZE))
    return compress(inner, vec, ctx, index_bits=index_bits)


def compress(spec: CompressorSpec, x: np.ndarray, ctx: RoundContext, *, index_bits: bool = False) -> SparseMessage:
    """Apply ``spec`` to ``x`` as worker ``ctx.worker_id`` in round ``ctx.round``."""
    kind = spec.kind
    if kind == CompressorKind.PERMK:
        kind = CompressorKind.PERMK_BIG_D if ctx.d >= ctx.n else CompressorKind.PERMK_BIG_N
    if kind == CompressorKind.PERMK_BIG_D:
        return permk_big_d(x, ctx)
    if kind == CompressorKind.PERMK_BIG_N:
        return permk_big_n(x, ctx)
    if kind == CompressorKind.RANDK:
        return randk(x, spec.k or 0, ctx, shared=spec.shared)
    if kind == CompressorKind.TOPK:
        return topk(_as_vector(x, ctx), spec.k or 0, index_bits=index_bits)
    if kind == CompressorKind.BLOCK_PERM:
        return block_perm(x, spec, ctx)
    if kind == CompressorKind.COMPOSED and spec.inner is not None:
        return compose_quantize(spec.inner, spec.quantizer_omega, x, ctx, index_bits=index_bits)
    raise UnsupportedCompressorError(f"unknown compressor kind {spec.kind}")


# Constants


def _multiset_constant(n: int, q: int) -> float:
    """A = B = 1 - n(q-1)/((n-1)q), written as (n-q)/((n-1)q)."""
    if n == 1:
        return 0.0
    return (n - q) / ((n - 1) * q)


def _resolve_kind(spec: CompressorSpec, n: int, d: int) -> CompressorKind:
    if spec.kind == CompressorKind.PERMK:
        return CompressorKind.PERMK_BIG_D if d >= n else CompressorKind.PERMK_BIG_N
    return spec.kind


def ab_constants(spec: CompressorSpec, n: int, d: int) -> ABConstants:
    kind = _resolve_kind(spec, n, d)
    if kind == CompressorKind.PERMK_BIG_D:
        if d < n:
            raise UnsupportedCompressorError(f"permk_big_d is undefined for d={d} < n={n}")
        return ABConstants(A=1.0, B=1.0)
    if kind == CompressorKind.PERMK_BIG_N:
        if n < d or n < 2:
            raise UnsupportedCompressorError(f"permk_big_n is undefined for n={n}, d={d}")
        value = _multiset_constant(n, n // d)
        return ABConstants(A=value, B=value)
    if kind == CompressorKind.RANDK:
        k = spec.k or 0
        _check_k(k, d)
        omega = d / k - 1.0
        if spec.shared and n > 1:
            return ABConstants(A=omega, B=0.0, omega=omega)
        return ABConstants(A=omega / n, B=0.0, omega=omega)
    if kind == CompressorKind.BLOCK_PERM:
        blocks = resolve_partition(spec, d, n)
        value = _multiset_constant(n, n // len(blocks))
        return ABConstants(A=value, B=value)
    if kind == CompressorKind.COMPOSED and spec.inner is not None:
        _check_quantizer_omega(spec.quantizer_omega)
        inner = ab_constants(spec.inner, n, d)
        factor = spec.quantizer_omega + 1.0
        omega = None if inner.omega is None else factor * (inner.omega + 1.0) - 1.0
        return ABConstants(A=factor * inner.A, B=inner.B, omega=omega, approximate=inner.approximate)
    raise UnsupportedCompressorError(f"{spec.kind.value} has no AB constants for n={n}, d={d}")


def contraction_alpha(spec: CompressorSpec, d: int) -> float:
    if spec.kind == CompressorKind.TOPK:
        _check_k(spec.k or 0, d)
        return (spec.k or 0) / d
    raise UnsupportedCompressorError(f"{spec.kind.value} is not a contractive compressor")


def expected_payload(spec: CompressorSpec, n: int, d: int) -> float:
    """Expected coordinates one worker sends in a compressed round."""
    kind = _resolve_kind(spec, n, d)
    if kind == CompressorKind.PERMK_BIG_D:
        return d / n
    if kind == CompressorKind.PERMK_BIG_N:
        return (n // d) * d / n
    if kind in (CompressorKind.RANDK, CompressorKind.TOPK):
        return float(spec.k or 0)
    if kind == CompressorKind.BLOCK_PERM:
        blocks = resolve_partition(spec, d, n)
        return (n // len(blocks)) * d / n
    if kind == CompressorKind.COMPOSED and spec.inner is not None:
        return expected_payload(spec.inner, n, d)
    raise UnsupportedCompressorError(f"unknown compressor kind {spec.kind}")


# Verification harness


@dataclass(frozen=True)
class ABGap:
    lhs: float
    rhs: float
    stderr: float
    samples: int
    exact: bool


def outcome_count(spec: CompressorSpec, n: int, d: int) -> int:
    """Size of the randomness space walked by :func:`enumerate_outcomes`."""
    kind = _resolve_kind(spec, n, d)
    if kind == CompressorKind.PERMK_BIG_D:
        return math.factorial(d) * (math.factorial(n) if d % n else 1)
    if kind in (CompressorKind.PERMK_BIG_N, CompressorKind.BLOCK_PERM):
        return math.factorial(n)
    if kind == CompressorKind.RANDK:
        combos = math.comb(d, spec.k or 0)
        return combos if spec.shared else combos**n
    if kind == CompressorKind.COMPOSED and spec.inner is not None and spec.quantizer_omega == 0.0:
        return outcome_count(spec.inner, n, d)
    raise UnsupportedCompressorError(f"{spec.kind.value} has no enumerable randomness space")


def enumerate_outcomes(
    spec: CompressorSpec, inputs: np.ndarray, *, limit: int = DEFAULT_ENUM_LIMIT
) -> Iterator[list[SparseMessage]]:
    """Yield the per-worker messages of every equally likely outcome."""
    a = np.asarray(inputs, dtype=np.float64)
    n, d = a.shape
    size = outcome_count(spec, n, d)
    if size > limit:
        raise EnumerationTooLargeError(size, limit)
    kind = _resolve_kind(spec, n, d)
    if kind == CompressorKind.COMPOSED and spec.inner is not None:
        yield from enumerate_outcomes(spec.inner, a, limit=limit)
        return
    if kind == CompressorKind.PERMK_BIG_D:
        worker_perms: list[np.ndarray | None] = (
            [np.array(p) for p in itertools.permutations(range(n))] if d % n else [None]
        )
        for coord in itertools.permutations(range(d)):
            coord_perm = np.array(coord)
            for worker_perm in worker_perms:
                yield [permk_big_d_from_perm(a[i], i, n, coord_perm, worker_perm) for i in range(n)]
    elif kind == CompressorKind.PERMK_BIG_N:
        slots = multiset_slots(n, d)
        for arrangement in _distinct_arrangements(slots):
            yield [permk_big_n_from_perm(a[i], i, n, arrangement) for i in range(n)]
    elif kind == CompressorKind.BLOCK_PERM:
        blocks = resolve_partition(spec, d, n)
        for arrangement in _distinct_arrangements(block_operator_slots(n, len(blocks))):
            yield [block_perm_from_perm(a[i], i, n, blocks, arrangement) for i in range(n)]
    elif kind == CompressorKind.RANDK:
        combos = [np.array(c) for c in itertools.combinations(range(d), spec.k or 0)]
        if spec.shared:
            for chosen in combos:
                yield [randk_from_choice(a[i], chosen) for i in range(n)]
        else:
            for choice in itertools.product(combos, repeat=n):
                yield [randk_from_choice(a[i], choice[i]) for i in range(n)]
    else:
        raise UnsupportedCompressorError(f"{spec.kind.value} has no enumerable randomness space")


def _distinct_arrangements(slots: np.ndarray) -> Iterator[np.ndarray]:
    """Permutations of worker positions, one per distinct slot assignment.

    Every distinct assignment is hit by the same number of permutations, so the
    deduplicated outcomes stay equally likely.
    """
    seen: set[tuple[int, ...]] = set()
    for perm in itertools.permutations(range(slots.size)):
        arrangement = np.array(perm)
        assignment = tuple(int(s) for s in slots[arrangement])
        if assignment in seen:
            continue
        seen.add(assignment)
        yield arrangement


def exact_aggregates(spec: CompressorSpec, inputs: np.ndarray, *, limit: int = DEFAULT_ENUM_LIMIT) -> np.ndarray:
    """Mean compressed message (1/n) sum_i C_i(a_i) for every outcome, stacked row-wise."""
    a = np.asarray(inputs, dtype=np.float64)
    n = a.shape[0]
    rows = [sum(msg.to_dense() for msg in outcome) / n for outcome in enumerate_outcomes(spec, a, limit=limit)]
    return np.array(rows)


def _sample_weights(spec: CompressorSpec, n: int, d: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Per-worker coordinate weights for ``size`` independent draws, shape (size, n, d)."""
    kind = _resolve_kind(spec, n, d)
    weights = np.zeros((size, n, d))
    rows = np.arange(size)[:, None]
    if kind == CompressorKind.PERMK_BIG_D:
        q, r = divmod(d, n)
        perms = rng.permuted(np.tile(np.arange(d), (size, 1)), axis=1)
        owner = np.tile(np.arange(d) // max(q, 1), (size, 1))
        if r:
            worker_perms = rng.permuted(np.tile(np.arange(n), (size, 1)), axis=1)
            owner[:, q * n :] = worker_perms[:, :r]
        weights[rows, owner, perms] = n
    elif kind == CompressorKind.PERMK_BIG_N:
        q = n // d
        slots = multiset_slots(n, d)[rng.permuted(np.tile(np.arange(n), (size, 1)), axis=1)]
        sample, worker = np.nonzero(slots >= 0)
        weights[sample, worker, slots[sample, worker]] = n / q
    elif kind == CompressorKind.BLOCK_PERM:
        blocks = resolve_partition(spec, d, n)
        m = len(blocks)
        membership = np.zeros((m + 1, d))
        for j, block in enumerate(blocks):
            membership[j, block] = n / (n // m)
        ops = block_operator_slots(n, m)[rng.permuted(np.tile(np.arange(n), (size, 1)), axis=1)]
        weights = membership[np.where(ops >= 0, ops, m)]
    elif kind == CompressorKind.RANDK:
        k = spec.k or 0
        _check_k(k, d)
        draws = 1 if spec.shared else n
        chosen = np.argsort(rng.random((size, draws, d)), axis=-1)[..., :k]
        mask = np.zeros((size, draws, d))
        np.put_along_axis(mask, chosen, d / k, axis=-1)
        weights = np.broadcast_to(mask, (size, n, d)).copy()
    else:
        raise UnsupportedCompressorError(f"{spec.kind.value} cannot be sampled as a linear selection")
    return weights


def sample_aggregates(
    spec: CompressorSpec, inputs: np.ndarray, trials: int, seed: int = 0, chunk: int | None = None
) -> np.ndarray:
    """Monte Carlo draws of (1/n) sum_i C_i(a_i), shape (trials, d)."""
    a = np.asarray(inputs, dtype=np.float64)
    n, d = a.shape
    rng = make_stream(seed, Purpose.SAMPLING)
    step = chunk or max(1, min(trials, 2_000_000 // (n * d)))
    inner, omega = spec, 0.0
    if spec.kind == CompressorKind.COMPOSED and spec.inner is not None:
        _check_quantizer_omega(spec.quantizer_omega)
        inner, omega = spec.inner, spec.quantizer_omega
    out = np.empty((trials, d))
    for start in range(0, trials, step):
        size = min(step, trials - start)
        values = np.broadcast_to(a, (size, n, d))
        if omega > 0.0:
            values = quantize(values, rng)
        weights = _sample_weights(inner, n, d, size, rng)
        out[start : start + size] = (weights * values).sum(axis=1) / n
    return out


def empirical_ab_gap(
    spec: CompressorSpec,
    inputs: np.ndarray,
    *,
    exhaustive: bool = True,
    trials: int = 100_000,
    seed: int = 0,
    limit: int = DEFAULT_ENUM_LIMIT,
) -> ABGap:
    """Both sides of the AB inequality for inputs ``a_1..a_n`` (rows of ``inputs``)."""
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidParameterError(f"inputs must be an (n, d) array, got shape {a.shape}")
    n, d = a.shape
    ab = ab_constants(spec, n, d)
    mean = a.mean(axis=0)
    rhs = ab.A * float(np.mean(np.sum(a * a, axis=1))) - ab.B * float(mean @ mean)
    if exhaustive:
        aggregates = exact_aggregates(spec, a, limit=limit)
    else:
        aggregates = sample_aggregates(spec, a, trials, seed)
    errors = np.sum((aggregates - mean) ** 2, axis=1)
    samples = errors.size
    stderr = 0.0 if exhaustive or samples < 2 else float(errors.std(ddof=1) / math.sqrt(samples))
    return ABGap(lhs=float(errors.mean()), rhs=rhs, stderr=stderr, samples=samples, exact=exhaustive)
