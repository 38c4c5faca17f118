"""Linear autoencoder over sharded image data with controllable heterogeneity.

Worker i holds shard D_hat_i and minimizes

    f_i(D, E) = (1/m) sum_j ||D E a_j - a_j||^2 + (lambda/2) ||D E - I||_F^2

over the encoder E (d_e x d_f) and decoder D (d_f x d_e), flattened as [vec(D), vec(E)].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from core.errors import InvalidParameterError
from core.models import SmoothnessConstants, TaskKind
from core.rng import Purpose, gaussian, make_stream
from services.analysis import sampled_constants
from services.mnist import load_idx_images
from services.tasks import check_point

logger = logging.getLogger(__name__)

PIXEL_SCALE = 255.0
MIXTURE_COMPONENTS = 10


def _stream(seed: int, name: str) -> np.random.Generator:
    return make_stream(seed, f"{Purpose.TASK.value}:autoencoder:{name}")


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Shards D_0..D_n of equal size; worker i trains on shards[assignment[i]]."""

    shards: np.ndarray
    assignment: np.ndarray
    p_hat: float

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def shared(self) -> np.ndarray:
        return self.shards[0]

    @property
    def private(self) -> np.ndarray:
        return self.shards[1:]

    def worker_shard(self, i: int) -> np.ndarray:
        return self.shards[self.assignment[i]]

    def shared_fraction(self) -> float:
        return float(np.mean(self.assignment == 0))


def split_heterogeneous(data: np.ndarray, n: int, p_hat: float, seed: int = 0) -> DatasetSplit:
    """Shuffle ``data`` into n+1 equal shards; each worker takes D_0 with probability p_hat, else its own D_i."""
    if not 0.0 <= p_hat <= 1.0:
        raise InvalidParameterError(f"p_hat must lie in [0, 1], got {p_hat}")
    if n < 1:
        raise InvalidParameterError(f"need at least one worker, got n={n}")
    rows = np.asarray(data, dtype=np.float64)
    if rows.ndim != 2:
        raise InvalidParameterError(f"data must be a 2-d (items, features) array, got shape {rows.shape}")
    if rows.shape[0] < n + 1:
        raise InvalidParameterError(f"need at least n+1={n + 1} items to fill every shard, got {rows.shape[0]}")

    size = rows.shape[0] // (n + 1)
    order = _stream(seed, "split").permutation(rows.shape[0])[: size * (n + 1)]
    shards = rows[order].reshape(n + 1, size, rows.shape[1])
    dropped = rows.shape[0] - size * (n + 1)
    if dropped:
        logger.debug(f"Dropped {dropped} items so all {n + 1} shards hold {size}")

    coins = _stream(seed, "assignment").random(n)
    assignment = np.where(coins < p_hat, 0, np.arange(1, n + 1)).astype(np.int64)
    return DatasetSplit(shards=shards, assignment=assignment, p_hat=float(p_hat))


def unpack_params(x: np.ndarray, d_f: int, d_e: int) -> tuple[np.ndarray, np.ndarray]:
    size = d_f * d_e
    if x.shape != (2 * size,):
        raise InvalidParameterError(f"expected parameters of shape ({2 * size},), got {x.shape}")
    return x[:size].reshape(d_f, d_e), x[size:].reshape(d_e, d_f)


def pack_params(decoder: np.ndarray, encoder: np.ndarray) -> np.ndarray:
    return np.concatenate([decoder.ravel(), encoder.ravel()])


def shard_loss(decoder: np.ndarray, encoder: np.ndarray, shard: np.ndarray, lambda_: float) -> float:
    residual = shard @ encoder.T @ decoder.T - shard
    gap = decoder @ encoder - np.eye(decoder.shape[0])
    return float(np.sum(residual * residual)) / shard.shape[0] + 0.5 * lambda_ * float(np.sum(gap * gap))


def shard_gradient(decoder: np.ndarray, encoder: np.ndarray, shard: np.ndarray, lambda_: float) -> np.ndarray:
    if decoder.shape[::-1] != encoder.shape or shard.shape[-1] != decoder.shape[0]:
        raise InvalidParameterError(
            f"inconsistent shapes D{decoder.shape} E{encoder.shape} data{shard.shape}"
        )
    codes = shard @ encoder.T
    residual = codes @ decoder.T - shard
    gap = decoder @ encoder - np.eye(decoder.shape[0])
    scale = 2.0 / shard.shape[0]
    grad_decoder = scale * residual.T @ codes + lambda_ * gap @ encoder.T
    grad_encoder = scale * decoder.T @ residual.T @ shard + lambda_ * decoder.T @ gap
    return pack_params(grad_decoder, grad_encoder)


@dataclass(frozen=True, eq=False)
class AutoencoderTask:
    kind: ClassVar[str] = TaskKind.AUTOENCODER.value

    d_f: int
    d_e: int
    lambda_: float
    p_hat: float
    seed: int
    shards: np.ndarray
    assignment: np.ndarray
    x0: np.ndarray
    normalization: str = "none"
    _distinct: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.shards.ndim != 3 or self.shards.shape[2] != self.d_f:
            raise InvalidParameterError(f"shards must have shape (n+1, m, {self.d_f}), got {self.shards.shape}")
        if self.lambda_ < 0:
            raise InvalidParameterError(f"lambda must be nonnegative, got {self.lambda_}")
        object.__setattr__(self, "_distinct", np.unique(self.assignment))

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def d(self) -> int:
        return 2 * self.d_f * self.d_e

    @property
    def split(self) -> DatasetSplit:
        return DatasetSplit(shards=self.shards, assignment=self.assignment, p_hat=self.p_hat)

    def worker_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        if not 0 <= i < self.n:
            raise InvalidParameterError(f"worker {i} outside 0..{self.n - 1}")
        decoder, encoder = unpack_params(check_point(self, x), self.d_f, self.d_e)
        return shard_gradient(decoder, encoder, self.shards[self.assignment[i]], self.lambda_)

    def worker_gradients(self, x: np.ndarray) -> np.ndarray:
        decoder, encoder = unpack_params(check_point(self, x), self.d_f, self.d_e)
        table = np.empty((self.shards.shape[0], self.d))
        for shard_id in self._distinct:
            table[shard_id] = shard_gradient(decoder, encoder, self.shards[shard_id], self.lambda_)
        return table[self.assignment]

    def value(self, x: np.ndarray) -> float:
        decoder, encoder = unpack_params(check_point(self, x), self.d_f, self.d_e)
        losses = {int(s): shard_loss(decoder, encoder, self.shards[s], self.lambda_) for s in self._distinct}
        return float(np.mean([losses[int(s)] for s in self.assignment]))

    def constants(self, samples: int = 50) -> SmoothnessConstants:
        radius = float(np.std(self.x0)) or 1.0
        return sampled_constants(self, samples=samples, seed=self.seed, radius=radius)

    def to_payload(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        scalars = {
            "d_e": self.d_e,
            "d_f": self.d_f,
            "lambda": self.lambda_,
            "normalization": self.normalization,
            "p_hat": self.p_hat,
            "seed": self.seed,
        }
        return scalars, {"shards": self.shards, "assignment": self.assignment, "x0": self.x0}

    @classmethod
    def from_payload(cls, scalars: dict[str, Any], arrays: dict[str, np.ndarray]) -> "AutoencoderTask":
        return cls(
            d_f=int(scalars["d_f"]),
            d_e=int(scalars["d_e"]),
            lambda_=float(scalars["lambda"]),
            p_hat=float(scalars["p_hat"]),
            seed=int(scalars["seed"]),
            shards=arrays["shards"],
            assignment=arrays["assignment"],
            x0=arrays["x0"],
            normalization=str(scalars.get("normalization", "none")),
        )


def grad_autoencoder(task: AutoencoderTask, i: int, params: np.ndarray) -> np.ndarray:
    return task.worker_gradient(i, params)


def gaussian_mixture(samples: int, d_f: int, seed: int = 0, components: int = MIXTURE_COMPONENTS) -> np.ndarray:
    """Synthetic stand-in for image data: well-separated clusters in [0, 1]-ish feature space."""
    centers = 0.5 + 0.25 * gaussian(_stream(seed, "centers"), (components, d_f))
    labels = _stream(seed, "labels").integers(0, components, size=samples)
    noise = 0.05 * gaussian(_stream(seed, "noise"), (samples, d_f))
    return centers[labels] + noise


def xavier_normal(d_f: int, d_e: int, seed: int = 0) -> np.ndarray:
    std = math.sqrt(2.0 / (d_f + d_e))
    return std * gaussian(_stream(seed, "init"), 2 * d_f * d_e)


def load_image_rows(idx_path: str | Path, samples: int | None = None) -> np.ndarray:
    images = load_idx_images(idx_path)
    if samples is not None:
        images = images[:samples]
    return images.reshape(images.shape[0], -1).astype(np.float64) / PIXEL_SCALE


def build_autoencoder_task(
    n: int,
    d_f: int,
    d_e: int,
    lambda_: float,
    p_hat: float,
    *,
    idx_path: str | Path | None = None,
    samples: int | None = None,
    seed: int = 0,
) -> AutoencoderTask:
    if idx_path is not None:
        data = load_image_rows(idx_path, samples)
        normalization = f"divide_by_{PIXEL_SCALE:g}"
        if data.shape[1] != d_f:
            logger.info(f"Using d_f={data.shape[1]} from {idx_path} instead of the configured {d_f}")
            d_f = int(data.shape[1])
    else:
        data = gaussian_mixture(samples or 20 * (n + 1), d_f, seed)
        normalization = "synthetic_gaussian_mixture"

    if d_e > d_f:
        raise InvalidParameterError(f"encoding size d_e={d_e} exceeds feature count d_f={d_f}")
    split = split_heterogeneous(data, n, p_hat, seed)
    task = AutoencoderTask(
        d_f=d_f,
        d_e=d_e,
        lambda_=float(lambda_),
        p_hat=float(p_hat),
        seed=seed,
        shards=split.shards,
        assignment=split.assignment,
        x0=xavier_normal(d_f, d_e, seed),
        normalization=normalization,
    )
    logger.info(
        f"Built autoencoder task n={n} d={task.d} shards={split.shards.shape[0]}x{split.shards.shape[1]} "
        f"shared fraction={split.shared_fraction():.3f}"
    )
    return task
