"""Shared task protocol, fixed-order reduction and the portable task artifact format.

Artifact layout (all integers little-endian)::

    magic    4 bytes   b"PKLT"
    version  uint16    1
    hlen     uint32    length of the header in bytes
    header   hlen      UTF-8 JSON, keys sorted, no whitespace:
                       {"arrays": [{"dtype", "name", "shape"}...], "kind", "scalars": {...}}
    payload            arrays in header order, raw little-endian, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import numpy as np

from core.errors import InvalidParameterError, TaskFormatError

MAGIC = b"PKLT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


@runtime_checkable
class DistributedTask(Protocol):
    """n local objectives f_1..f_n over R^d with per-worker gradient oracles."""

    kind: str
    n: int
    d: int
    x0: np.ndarray

    def worker_gradient(self, i: int, x: np.ndarray) -> np.ndarray: ...

    def worker_gradients(self, x: np.ndarray) -> np.ndarray: ...

    def value(self, x: np.ndarray) -> float: ...

    def to_payload(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]: ...


def ordered_mean(rows: np.ndarray) -> np.ndarray:
    """(1/n) sum of rows, added in ascending row order so the result never depends on threading."""
    total = np.array(rows[0], dtype=np.float64, copy=True)
    for row in rows[1:]:
        total += row
    return total / rows.shape[0]


def full_gradient(task: DistributedTask, x: np.ndarray) -> np.ndarray:
    return ordered_mean(task.worker_gradients(x))


def check_point(task: DistributedTask, x: np.ndarray) -> np.ndarray:
    point = np.asarray(x, dtype=np.float64)
    if point.shape != (task.d,):
        raise InvalidParameterError(f"expected a point of shape ({task.d},), got {point.shape}")
    return point


def task_bytes(task: DistributedTask) -> bytes:
    scalars, arrays = task.to_payload()
    table = []
    blobs = []
    for name in arrays:
        array = np.ascontiguousarray(arrays[name])
        dtype = "<i8" if np.issubdtype(array.dtype, np.integer) else "<f8"
        array = array.astype(_DTYPES[dtype], copy=False)
        table.append({"dtype": dtype, "name": name, "shape": list(array.shape)})
        blobs.append(array.tobytes(order="C"))
    header = json.dumps(
        {"arrays": table, "kind": task.kind, "scalars": scalars}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def task_fingerprint(task: DistributedTask) -> str:
    return hashlib.sha256(task_bytes(task)).hexdigest()


def save_task(task: DistributedTask, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(task_bytes(task))
    return target


def parse_task(data: bytes) -> DistributedTask:
    if len(data) < _PREFIX.size:
        raise TaskFormatError("task artifact is truncated")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise TaskFormatError(f"bad task artifact magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TaskFormatError(f"unsupported task artifact version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TaskFormatError(f"unreadable task header: {exc}") from exc

    offset = start + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise TaskFormatError(f"unknown array dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(data):
            raise TaskFormatError(f"array {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise TaskFormatError("trailing bytes after the last array")

    return _task_class(header.get("kind")).from_payload(header.get("scalars", {}), arrays)


def load_task(path: str | Path) -> DistributedTask:
    return parse_task(Path(path).read_bytes())


def _task_class(kind: str | None) -> Any:
    from services.autoencoder import AutoencoderTask
    from services.quadratic import DenseQuadraticTask, QuadraticTask

    registry = {
        QuadraticTask.kind: QuadraticTask,
        DenseQuadraticTask.kind: DenseQuadraticTask,
        AutoencoderTask.kind: AutoencoderTask,
    }
    if kind not in registry:
        raise TaskFormatError(f"unknown task kind {kind!r}")
    return registry[kind]
