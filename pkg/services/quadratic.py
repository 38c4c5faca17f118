"""Synthetic distributed quadratics f_i(x) = x'A_i x / 2 - b_i'x."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from core.errors import InvalidParameterError, NonConvergenceError
from core.models import SmoothnessConstants, TaskKind
from core.rng import Purpose, gaussian, make_stream
from services.analysis import quadratic_constants
from services.tasks import check_point

logger = logging.getLogger(__name__)


def stencil_matvec(x: np.ndarray) -> np.ndarray:
    """(1/4) tridiag(-1, 2, -1) x in O(d)."""
    out = 0.5 * x
    out[:-1] -= 0.25 * x[1:]
    out[1:] -= 0.25 * x[:-1]
    return out


def stencil_eigenvalues(d: int) -> np.ndarray:
    k = np.arange(1, d + 1)
    return (2.0 - 2.0 * np.cos(k * np.pi / (d + 1))) / 4.0


def stencil_matrix(d: int) -> np.ndarray:
    return 0.25 * (2.0 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1))


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """A_i = scales[i] * T + shift * I with T the scaled tridiagonal stencil; b_i = b_lead[i] e_1."""

    kind: ClassVar[str] = TaskKind.QUADRATIC.value

    n: int
    d: int
    lambda_: float
    noise_scale: float
    seed: int
    scales: np.ndarray
    b_lead: np.ndarray
    shift: float
    x0: np.ndarray
    mean_scale: float = field(init=False)
    mean_b_lead: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean_scale", float(self.scales.mean()))
        object.__setattr__(self, "mean_b_lead", float(self.b_lead.mean()))

    @property
    def b(self) -> np.ndarray:
        dense = np.zeros((self.n, self.d))
        dense[:, 0] = self.b_lead
        return dense

    def worker_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        point = check_point(self, x)
        if not 0 <= i < self.n:
            raise InvalidParameterError(f"worker {i} outside 0..{self.n - 1}")
        grad = self.scales[i] * stencil_matvec(point) + self.shift * point
        grad[0] -= self.b_lead[i]
        return grad

    def worker_gradients(self, x: np.ndarray) -> np.ndarray:
        point = check_point(self, x)
        grads = np.outer(self.scales, stencil_matvec(point)) + self.shift * point
        grads[:, 0] -= self.b_lead
        return grads

    def mean_matvec(self, x: np.ndarray) -> np.ndarray:
        return self.mean_scale * stencil_matvec(x) + self.shift * x

    def mean_linear(self) -> np.ndarray:
        out = np.zeros(self.d)
        out[0] = self.mean_b_lead
        return out

    def value(self, x: np.ndarray) -> float:
        point = check_point(self, x)
        quadratic = self.mean_scale * float(point @ stencil_matvec(point)) + self.shift * float(point @ point)
        return 0.5 * quadratic - self.mean_b_lead * float(point[0])

    def dense_matrices(self) -> np.ndarray:
        base = stencil_matrix(self.d)
        return self.scales[:, None, None] * base + self.shift * np.eye(self.d)

    def constants(self) -> SmoothnessConstants:
        """Closed form: every A_i is diagonal in the sine basis with eigenvalues c_i tau_k + shift."""
        tau = stencil_eigenvalues(self.d)
        mean_eigs = self.mean_scale * tau + self.shift
        second = float(np.mean(self.scales**2))
        plus_sq = second * tau**2 + 2.0 * self.mean_scale * self.shift * tau + self.shift**2
        variance = float(np.mean((self.scales - self.mean_scale) ** 2))
        return SmoothnessConstants(
            l_minus=float(np.max(np.abs(mean_eigs))),
            l_plus=math.sqrt(float(np.max(plus_sq))),
            l_pm=math.sqrt(variance) * float(tau.max()),
            mu=self.lambda_,
            exact=True,
        )

    def to_payload(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        scalars = {
            "n": self.n,
            "d": self.d,
            "lambda": self.lambda_,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "shift": self.shift,
        }
        return scalars, {"scales": self.scales, "b_lead": self.b_lead, "x0": self.x0}

    @classmethod
    def from_payload(cls, scalars: dict[str, Any], arrays: dict[str, np.ndarray]) -> "QuadraticTask":
        return cls(
            n=int(scalars["n"]),
            d=int(scalars["d"]),
            lambda_=float(scalars["lambda"]),
            noise_scale=float(scalars["noise_scale"]),
            seed=int(scalars["seed"]),
            scales=arrays["scales"],
            b_lead=arrays["b_lead"],
            shift=float(scalars["shift"]),
            x0=arrays["x0"],
        )


def generate_quadratic(n: int, d: int, lambda_: float, noise_scale: float, seed: int = 0) -> QuadraticTask:
    if n < 1 or d < 2:
        raise InvalidParameterError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
    if lambda_ <= 0:
        raise InvalidParameterError(f"lambda must be positive, got {lambda_}")
    if noise_scale < 0:
        raise InvalidParameterError(f"noise scale must be nonnegative, got {noise_scale}")

    xi_scale = gaussian(make_stream(seed, f"{Purpose.TASK.value}:quadratic:scale"), n)
    xi_linear = gaussian(make_stream(seed, f"{Purpose.TASK.value}:quadratic:linear"), n)
    scales = 1.0 + noise_scale * xi_scale
    b_lead = scales / 4.0 * (-1.0 + noise_scale * xi_linear)

    mean_scale = float(scales.mean())
    try:
        lowest = scipy.linalg.eigvalsh_tridiagonal(
            np.full(d, 0.5 * mean_scale),
            np.full(d - 1, -0.25 * mean_scale),
            select="i",
            select_range=(0, 0),
        )[0]
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NonConvergenceError(f"eigensolver failed on the mean matrix: {exc}") from exc

    x0 = np.zeros(d)
    x0[0] = math.sqrt(d)
    task = QuadraticTask(
        n=n,
        d=d,
        lambda_=float(lambda_),
        noise_scale=float(noise_scale),
        seed=seed,
        scales=scales,
        b_lead=b_lead,
        shift=float(lambda_ - lowest),
        x0=x0,
    )
    logger.info(f"Generated quadratic task n={n} d={d} lambda={lambda_:g} s={noise_scale:g} seed={seed}")
    return task


def grad_quadratic(task: "QuadraticTask | DenseQuadraticTask", i: int, x: np.ndarray) -> np.ndarray:
    return task.worker_gradient(i, x)


@dataclass(frozen=True, eq=False)
class DenseQuadraticTask:
    """Explicit symmetric A_i, for small families that are not stencil-shaped."""

    kind: ClassVar[str] = TaskKind.DENSE_QUADRATIC.value

    matrices: np.ndarray
    b: np.ndarray
    x0: np.ndarray
    mu: float | None = None

    def __post_init__(self) -> None:
        if self.matrices.ndim != 3 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise InvalidParameterError(f"matrices must have shape (n, d, d), got {self.matrices.shape}")
        if self.b.shape != self.matrices.shape[:2]:
            raise InvalidParameterError(f"b must have shape {self.matrices.shape[:2]}, got {self.b.shape}")

    @property
    def n(self) -> int:
        return int(self.matrices.shape[0])

    @property
    def d(self) -> int:
        return int(self.matrices.shape[1])

    def worker_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        point = check_point(self, x)
        return self.matrices[i] @ point - self.b[i]

    def worker_gradients(self, x: np.ndarray) -> np.ndarray:
        point = check_point(self, x)
        # row-by-row so the result matches worker_gradient bit for bit
        return np.stack([matrix @ point for matrix in self.matrices]) - self.b

    def mean_matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrices.mean(axis=0) @ x

    def mean_linear(self) -> np.ndarray:
        return self.b.mean(axis=0)

    def value(self, x: np.ndarray) -> float:
        point = check_point(self, x)
        return 0.5 * float(point @ self.mean_matvec(point)) - float(self.mean_linear() @ point)

    def dense_matrices(self) -> np.ndarray:
        return self.matrices

    def constants(self) -> SmoothnessConstants:
        return quadratic_constants(self.matrices, mu=self.mu)

    def to_payload(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        return {"mu": self.mu}, {"matrices": self.matrices, "b": self.b, "x0": self.x0}

    @classmethod
    def from_payload(cls, scalars: dict[str, Any], arrays: dict[str, np.ndarray]) -> "DenseQuadraticTask":
        return cls(matrices=arrays["matrices"], b=arrays["b"], x0=arrays["x0"], mu=scalars.get("mu"))


def f_star_quadratic(
    task: QuadraticTask | DenseQuadraticTask, tol: float = 1e-10, max_iter: int | None = None
) -> tuple[float, np.ndarray]:
    """Minimum of the mean quadratic by conjugate gradients on A x = b."""
    rhs = task.mean_linear()
    if not np.any(rhs):
        solution = np.zeros(task.d)
        return task.value(solution), solution
    operator = scipy.sparse.linalg.LinearOperator((task.d, task.d), matvec=task.mean_matvec, dtype=np.float64)
    solution, info = scipy.sparse.linalg.cg(operator, rhs, rtol=0.0, atol=tol, maxiter=max_iter or 20 * task.d)
    if info != 0:
        raise NonConvergenceError(f"conjugate gradients stopped with info={info} before residual {tol}")
    residual = float(np.linalg.norm(task.mean_matvec(solution) - rhs))
    logger.debug(f"CG solve finished with residual {residual:.3e}")
    return task.value(solution), solution
