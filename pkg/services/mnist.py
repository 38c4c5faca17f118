"""Reader for the big-endian IDX container used by the MNIST files."""

from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path

import numpy as np

from core.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_RANKS = {IMAGES_MAGIC: 3, LABELS_MAGIC: 1}
_KINDS = {"images": IMAGES_MAGIC, "labels": LABELS_MAGIC}
_MAX_ELEMENTS = 2**31


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IdxFormatError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def parse_idx(data: bytes, kind: str | None = None, *, source: str = "<idx>") -> np.ndarray:
    if len(data) < 4:
        raise IdxFormatError(f"{source}: truncated header")
    (magic,) = struct.unpack_from(">I", data)
    if magic not in _RANKS:
        raise IdxFormatError(f"{source}: bad magic 0x{magic:08x}")
    if kind is not None and _KINDS[kind] != magic:
        raise IdxFormatError(f"{source}: bad magic 0x{magic:08x} for {kind} (expected 0x{_KINDS[kind]:08x})")

    rank = _RANKS[magic]
    header_len = 4 + 4 * rank
    if len(data) < header_len:
        raise IdxFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f">{rank}I", data, 4)
    count = 1
    for dim in dims:
        count *= dim
        if count > _MAX_ELEMENTS:
            raise IdxFormatError(f"{source}: dimensions {dims} overflow the element limit")

    body = len(data) - header_len
    if body < count:
        raise IdxFormatError(f"{source}: truncated payload, expected {count} bytes, found {body}")
    if body > count:
        raise IdxFormatError(f"{source}: {body - count} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header_len).reshape(dims).copy()


def load_idx(path: str | Path, kind: str | None = None) -> np.ndarray:
    """Load an IDX file (optionally gzipped) as a uint8 array of shape (count, rows, cols) or (count,)."""
    if kind is not None and kind not in _KINDS:
        raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")
    source = Path(path)
    array = parse_idx(_read_bytes(source), kind, source=str(source))
    logger.debug(f"Loaded IDX {source} with shape {array.shape}")
    return array


def load_idx_images(path: str | Path) -> np.ndarray:
    return load_idx(path, "images")


def load_idx_labels(path: str | Path) -> np.ndarray:
    return load_idx(path, "labels")
