from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np
import pytest
import yaml

from core.rng import make_stream
from services.quadratic import DenseQuadraticTask, QuadraticTask, generate_quadratic


@pytest.fixture
def rng() -> np.random.Generator:
    return make_stream(1234, "tests")


@pytest.fixture
def small_task() -> QuadraticTask:
    return generate_quadratic(n=4, d=6, lambda_=1e-2, noise_scale=0.3, seed=3)


@pytest.fixture
def identical_task() -> QuadraticTask:
    return generate_quadratic(n=10, d=100, lambda_=1e-6, noise_scale=0.0, seed=0)


def random_family(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    raw = rng.standard_normal((n, d, d))
    return 0.5 * (raw + raw.transpose(0, 2, 1))


def dense_task(rng: np.random.Generator, n: int, d: int) -> DenseQuadraticTask:
    family = random_family(rng, n, d)
    return DenseQuadraticTask(family, rng.standard_normal((n, d)), rng.standard_normal(d))


def idx_bytes(magic: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    return struct.pack(f">I{len(dims)}I", magic, *dims) + payload


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[dict], Path]:
    def _write(data: dict, name: str = "experiment.yaml") -> Path:
        data.setdefault("output", {}).setdefault("directory", str(tmp_path / "runs"))
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path

    return _write
