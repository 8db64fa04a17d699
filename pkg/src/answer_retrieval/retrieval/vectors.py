"""Exact dense index over cached passage embeddings, plus a token-matrix cache for late interaction.

On-disk format of a vector index (little-endian)::

    magic  b"ARVX"            4 bytes
    u32    header length H
    H bytes UTF-8 JSON header  {"version", "metric", "dtype", "n", "dim", "fingerprint", "ids"}
    n*dim  row-major floats   passage embeddings in id-table order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..encoders.checkpoint import atomic_write_bytes
from ..encoders.matchers import BiEncoder, PolyEncoder
from ..tensor import no_grad
from .ranking import RankedList

INDEX_VERSION = 1
_MAGIC = b"ARVX"
METRICS = ("dot", "cosine")


class IndexFormatError(ValueError):
    """Malformed or incompatible index file."""


class FingerprintMismatch(ValueError):
    """Cached vectors were produced by different weights than the scoring model."""


@dataclass
class VectorIndex:
    ids: list[str]
    vectors: np.ndarray
    metric: str = "dot"
    fingerprint: str = ""
    _normed: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _rows: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"vectors {self.vectors.shape} do not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        self._rows = {pid: i for i, pid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, pid: str) -> int:
        try:
            return self._rows[pid]
        except KeyError:
            raise KeyError(f"passage {pid!r} is not in the index") from None

    def _matrix(self) -> np.ndarray:
        if self.metric == "dot":
            return self.vectors
        if self._normed is None:
            norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
            self._normed = self.vectors / np.where(norms > 0, norms, 1.0)
        return self._normed

    def scores(self, query_vec: np.ndarray) -> np.ndarray:
        """Similarity of ``query_vec`` to every indexed row (full scan)."""
        q = np.asarray(query_vec, dtype=self.vectors.dtype).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"query has dim {q.shape[0]}, index has dim {self.dim}")
        if self.metric == "cosine":
            n = np.linalg.norm(q)
            q = q / n if n > 0 else q
        return self._matrix() @ q

    # -- persistence ----------------------------------------------------------
    def to_bytes(self) -> bytes:
        vec = np.ascontiguousarray(self.vectors, dtype=self.vectors.dtype.newbyteorder("<"))
        header = json.dumps({
            "version": INDEX_VERSION, "metric": self.metric, "dtype": vec.dtype.name,
            "n": len(self.ids), "dim": int(vec.shape[1]), "fingerprint": self.fingerprint,
            "ids": self.ids,
        }, sort_keys=True, separators=(",", ":")).encode()
        return _MAGIC + struct.pack("<I", len(header)) + header + vec.tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "VectorIndex":
        if payload[:4] != _MAGIC:
            raise IndexFormatError("not a vector index file (bad magic)")
        (hlen,) = struct.unpack("<I", payload[4:8])
        try:
            header = json.loads(payload[8:8 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"corrupt index header: {exc}") from None
        if header.get("version") != INDEX_VERSION:
            raise IndexFormatError(f"unsupported index version {header.get('version')!r}")
        dtype = np.dtype(header["dtype"]).newbyteorder("<")
        n, dim = header["n"], header["dim"]
        body = payload[8 + hlen:]
        if len(body) != n * dim * dtype.itemsize:
            raise IndexFormatError(f"index body has {len(body)} bytes, expected {n * dim * dtype.itemsize}")
        vectors = np.frombuffer(body, dtype=dtype).reshape(n, dim).astype(dtype.newbyteorder("="))
        return cls(list(header["ids"]), vectors, header["metric"], header["fingerprint"])

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "VectorIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def knn(index: VectorIndex, query_vec: np.ndarray, k: int) -> RankedList:
    """Exact top-k by similarity; ties broken by passage id; ``k > N`` yields N results."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return RankedList.from_scores(index.ids, index.scores(query_vec), k)


def build_vector_index(passages: Sequence, model: BiEncoder, metric: str = "dot",
                       batch_size: int = 64, dtype=None) -> VectorIndex:
    """Encode every passage once with the passage side of a Bi-encoder."""
    if not isinstance(model, BiEncoder) or isinstance(model, PolyEncoder):
        raise TypeError("vector indexes are built from Bi-encoder passage vectors")
    rows = []
    with no_grad():
        for i in range(0, len(passages), batch_size):
            rows.append(model.encode_passages(passages[i:i + batch_size]).data)
    d = model.config.d_model
    vectors = np.concatenate(rows) if rows else np.zeros((0, d))
    if dtype is not None:
        vectors = vectors.astype(dtype)
    return VectorIndex([p.id for p in passages], vectors, metric, model.fingerprint())


@dataclass
class TokenCache:
    """Precomputed passage token matrices for the Poly-encoder (``[n, L, d]`` plus mask)."""

    ids: list[str]
    tokens: np.ndarray
    mask: np.ndarray
    fingerprint: str = ""

    def __post_init__(self):
        self._rows = {pid: i for i, pid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def rows(self, pids: Sequence[str]) -> np.ndarray:
        return np.array([self._rows[p] for p in pids], dtype=np.int64)


def build_token_cache(passages: Sequence, model: PolyEncoder, batch_size: int = 64) -> TokenCache:
    """Encode all passages and keep every token state, padded to a common length."""
    chunks = []
    with no_grad():
        for i in range(0, len(passages), batch_size):
            h, mask = model.passage_tokens(passages[i:i + batch_size])
            chunks.append((h.data, mask))
    L = max((m.shape[1] for _, m in chunks), default=1)
    d = model.config.d_model
    tokens = np.zeros((len(passages), L, d), dtype=chunks[0][0].dtype if chunks else np.float64)
    mask = np.zeros((len(passages), L), dtype=bool)
    start = 0
    for h, m in chunks:
        n, l = m.shape
        tokens[start:start + n, :l] = h
        mask[start:start + n, :l] = m
        start += n
    return TokenCache([p.id for p in passages], tokens, mask, model.fingerprint())
