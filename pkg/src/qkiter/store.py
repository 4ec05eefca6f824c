"""Chunked binary16 store for bulk-evaluated backbone outputs, plus PCA.

File layout (little-endian)::

    "QKIS" | u32 version | u64 n_rows | u32 d_mid | u32 chunk_size
    | 32-byte source tag | n_rows * d_mid binary16 values, row-major

Chunks are consecutive runs of ``chunk_size`` rows; only the last may be short.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, HalfRangeError, RankError, ShapeError

MAGIC = b"QKIS"
VERSION = 1
HEADER = struct.Struct("<4sIQII32s")
HALF_MAX = 65504.0
DEFAULT_CHUNK_SIZE = 65536


def encode_half(x, row_offset: int = 0) -> np.ndarray:
    """Round to binary16 (nearest-even) and return the raw uint16 codes."""
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x) | (np.abs(x) > HALF_MAX)
    if bad.any():
        idx = np.argwhere(bad)[0]
        row = row_offset + (int(idx[0]) if x.ndim > 1 else 0)
        raise HalfRangeError(f"row {row}: value {x[tuple(idx)]!r} outside binary16 range")
    return x.astype("<f2").view("<u2")


def decode_half(codes) -> np.ndarray:
    return np.asarray(codes, dtype="<u2").view("<f2").astype(np.float64)


def _n_chunks(n_rows, chunk_size):
    return -(-n_rows // chunk_size)


class _ChunkedRows:
    """Shared chunk arithmetic for on-disk and in-memory stores."""

    n_rows: int
    chunk_size: int

    @property
    def n_chunks(self) -> int:
        return _n_chunks(self.n_rows, self.chunk_size)

    def chunk_bounds(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.n_chunks:
            raise IndexError(f"chunk {i} out of range (store has {self.n_chunks})")
        lo = i * self.chunk_size
        return lo, min(lo + self.chunk_size, self.n_rows)

    def iter_chunks(self):
        for i in range(self.n_chunks):
            yield self.chunk_bounds(i)[0], self.read_chunk(i)

    def read_all(self) -> np.ndarray:
        if self.n_rows == 0:
            return np.zeros((0, self.d_mid))
        return np.concatenate([self.read_chunk(i) for i in range(self.n_chunks)])


@dataclass
class IntermediateStore(_ChunkedRows):
    path: Path
    n_rows: int
    d_mid: int
    chunk_size: int
    source_tag: bytes
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def read_chunk(self, i: int) -> np.ndarray:
        lo, hi = self.chunk_bounds(i)
        if i not in self._cache:
            count = (hi - lo) * self.d_mid
            with open(self.path, "rb") as fh:
                fh.seek(HEADER.size + 2 * lo * self.d_mid)
                raw = np.fromfile(fh, dtype="<u2", count=count)
            if raw.size != count:
                raise FormatError(f"{self.path}: truncated chunk {i}")
            block = decode_half(raw).reshape(hi - lo, self.d_mid)
            block.setflags(write=False)
            self._cache[i] = block
        return self._cache[i]


@dataclass
class ArrayStore(_ChunkedRows):
    """In-memory store holding exact float64 rows. Used where a test needs
    the store path without binary16 rounding."""

    data: np.ndarray
    chunk_size: int
    source_tag: bytes

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def d_mid(self) -> int:
        return self.data.shape[1]

    def read_chunk(self, i: int) -> np.ndarray:
        lo, hi = self.chunk_bounds(i)
        return self.data[lo:hi]


def read_chunk(store, chunk_index: int) -> np.ndarray:
    return store.read_chunk(chunk_index)


def store_write(
    rows: Iterable,
    chunk_size: int,
    path,
    source_tag: bytes = b"\0" * 32,
    d_mid: int | None = None,
) -> IntermediateStore:
    """Stream rows (vectors or row blocks) into a store file.

    The file is written to a temporary sibling and renamed into place, so a
    rewrite of the same path either fully succeeds or leaves the old file.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if len(source_tag) != 32:
        raise ValueError("source_tag must be 32 bytes")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    n_rows = 0
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"\0" * HEADER.size)
            for block in rows:
                block = np.asarray(block, dtype=np.float64)
                if block.ndim == 1:
                    block = block[None, :]
                if d_mid is None:
                    d_mid = block.shape[1]
                if block.ndim != 2 or block.shape[1] != d_mid:
                    raise FormatError(
                        f"row {n_rows}: width {block.shape[-1]} differs from {d_mid}"
                    )
                fh.write(encode_half(block, row_offset=n_rows).tobytes())
                n_rows += block.shape[0]
            d_mid = d_mid or 0
            fh.seek(0)
            fh.write(HEADER.pack(MAGIC, VERSION, n_rows, d_mid, chunk_size, source_tag))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()
    return IntermediateStore(path, n_rows, d_mid, chunk_size, bytes(source_tag))


def open_store(path) -> IntermediateStore:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) != HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_rows, d_mid, chunk_size, tag = HEADER.unpack(head)
    if magic != MAGIC or version != VERSION:
        raise FormatError(f"{path}: not a version-{VERSION} QKIS store")
    expected = HEADER.size + 2 * n_rows * d_mid
    if path.stat().st_size != expected:
        raise FormatError(f"{path}: size {path.stat().st_size} != {expected}")
    if chunk_size < 1:
        raise FormatError(f"{path}: chunk_size {chunk_size}")
    return IntermediateStore(path, n_rows, d_mid, chunk_size, tag)


# --- PCA without whitening -------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray  # (d_in,)
    components: np.ndarray  # (d_out_pca, d_in), orthonormal rows
    explained_variance: np.ndarray  # (d_out_pca,)

    @property
    def d_out_pca(self) -> int:
        return self.components.shape[0]

    @property
    def d_in(self) -> int:
        return self.components.shape[1]


def pca_fit(data, d_out_pca: int, rtol: float = 1e-10) -> PcaModel:
    data = np.asarray(data, dtype=np.float64)
    n, d_in = data.shape
    if d_out_pca > d_in or d_out_pca > n:
        raise RankError(f"cannot extract {d_out_pca} components from {n}x{d_in} data")
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > rtol * max(s[0] if s.size else 0.0, 1e-300)))
    if d_out_pca > rank:
        raise RankError(f"requested {d_out_pca} components but data rank is {rank}")
    comps = vt[:d_out_pca].copy()
    # sign convention: the largest-magnitude entry of every component is positive
    pivots = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(d_out_pca), pivots])
    comps *= signs[:, None]
    var = s[:d_out_pca] ** 2 / max(n - 1, 1)
    return PcaModel(mean, comps, var)


def pca_transform(model: PcaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d_in:
        raise ShapeError(f"expected width {model.d_in}, got {x.shape}")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, z) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ model.components + model.mean
