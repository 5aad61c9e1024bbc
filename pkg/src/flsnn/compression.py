"""Top-k magnitude sparsification of flat client updates.

Wire format (little-endian)::

    sparse: u32 dim, u32 k (>= 1), then k x (u32 index, f32 value), index-sorted
    dense:  u32 dim, u32 0,        then dim x f32 value

Both share the 8-byte header, so a sparse payload is ``8 + 8k`` bytes and a
dense one ``8 + 4d``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

HEADER_BYTES = 8
_HEADER = struct.Struct("<II")
_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionConfig:
    kappa: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")


@dataclass(frozen=True)
class SparseUpdate:
    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise CodecError("indices and values must be matching 1-D arrays")
        if self.indices.size and (self.indices[-1] >= self.dim or self.indices[0] < 0):
            raise CodecError(f"index out of range for dim {self.dim}")
        if np.any(np.diff(self.indices) <= 0):
            raise CodecError("indices must be strictly increasing")

    @property
    def k(self) -> int:
        return int(self.indices.size)


def retained_count(kappa: float, dim: int) -> int:
    """k = max(1, floor(kappa * d))."""
    return max(1, math.floor(kappa * dim))


def topk_compress(dense: np.ndarray, cfg: CompressionConfig) -> SparseUpdate:
    """Keep the k largest-magnitude coordinates; ties go to the lower index."""
    dense = np.asarray(dense)
    if dense.ndim != 1 or dense.size == 0:
        raise CodecError("topk_compress needs a non-empty flat vector")
    d = dense.size
    k = retained_count(cfg.kappa, d)
    if k == d:
        idx = np.arange(d)
    else:
        # stable sort on -|v| keeps lower indices first among equal magnitudes
        order = np.argsort(-np.abs(dense), kind="stable")
        idx = np.sort(order[:k])
    return SparseUpdate(d, idx.astype(np.int64), dense[idx].copy())


def decompress(sp: SparseUpdate, dtype=None) -> np.ndarray:
    if sp.indices.size and sp.indices.max() >= sp.dim:
        raise CodecError(f"index out of range for dim {sp.dim}")
    out = np.zeros(sp.dim, dtype=dtype or sp.values.dtype)
    out[sp.indices] = sp.values
    return out


def record_retention(sp: SparseUpdate, counters: np.ndarray) -> np.ndarray:
    """Increment ``counters`` in place at every retained index."""
    if counters.size != sp.dim:
        raise CodecError(f"counter length {counters.size} != update dim {sp.dim}")
    counters[sp.indices] += 1
    return counters


def sparse_payload_bytes(k: int) -> int:
    return HEADER_BYTES + 8 * k


def dense_payload_bytes(d: int) -> int:
    return HEADER_BYTES + 4 * d


def encode_sparse(sp: SparseUpdate) -> bytes:
    body = np.empty(sp.k, dtype=_PAIR)
    body["index"] = sp.indices
    body["value"] = sp.values
    return _HEADER.pack(sp.dim, sp.k) + body.tobytes()


def encode_dense(v: np.ndarray) -> bytes:
    v = np.asarray(v)
    return _HEADER.pack(v.size, 0) + v.astype("<f4").tobytes()


def decode(payload: bytes):
    """Inverse of encode_sparse / encode_dense. Returns a SparseUpdate or a dense array."""
    if len(payload) < HEADER_BYTES:
        raise CodecError("payload shorter than header")
    dim, k = _HEADER.unpack_from(payload)
    body = payload[HEADER_BYTES:]
    if k == 0:
        if len(body) != 4 * dim:
            raise CodecError("dense payload length does not match dim")
        return np.frombuffer(body, dtype="<f4").astype(np.float32)
    if len(body) != 8 * k:
        raise CodecError("sparse payload length does not match k")
    pairs = np.frombuffer(body, dtype=_PAIR)
    return SparseUpdate(dim, pairs["index"].astype(np.int64), pairs["value"].astype(np.float32))
