"""Exact (flat) and approximate (HNSW) k-nearest-neighbor indexes over descriptors.

Index file layout (all integers little-endian)::

    b"LTAUIDX1"                 8 bytes magic
    kind                        1 byte, 0 = flat, 1 = hnsw
    header_len                  uint32
    header                      UTF-8 JSON, sorted keys
    vectors                     N*D float32
    -- hnsw only --
    levels                      N int32
    counts0                     N int32
    links0                      N*2M int32
    countsU                     S int32
    linksU                      S*M int32

The header carries ``version``, ``n``, ``dim``, ``payload_crc32`` and, for
HNSW, ``m``, ``ef_construction``, ``ef_search``, ``seed``, ``entry``,
``max_level`` and ``upper_rows`` (S).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from ltau.knn import _kernels
from ltau.trajlog import DescriptorSet

# the TBB layer shipped with some distributions is too old and only emits warnings
numba.config.THREADING_LAYER = "workqueue"

MAGIC = b"LTAUIDX1"
FORMAT_VERSION = 1
KIND_FLAT = 0
KIND_HNSW = 1


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class HnswParams:
    m: int = 32
    ef_construction: int = 40
    ef_search: int = 16

    def __post_init__(self):
        if self.m < 2 or self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError(f"invalid HNSW parameters {self}")


@dataclass(eq=False)
class NeighborList:
    ids: np.ndarray
    distances: np.ndarray  # L2, ascending

    def __len__(self) -> int:
        return len(self.ids)


def _as_vectors(descriptors) -> np.ndarray:
    if isinstance(descriptors, DescriptorSet):
        return descriptors.vectors
    return DescriptorSet(descriptors).vectors


def _as_queries(queries, dim: int) -> np.ndarray:
    q = np.ascontiguousarray(queries, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != dim:
        raise ValueError(f"query dimension {q.shape[-1]} does not match index dimension {dim}")
    return q


class FlatIndex:
    """Brute-force squared-L2 search; exact, ties broken by lower id."""

    kind = "flat"

    def __init__(self, vectors: np.ndarray):
        self.vectors = vectors

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search_arrays(self, queries, k: int, ef_search: int | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _as_queries(queries, self.dim)
        kk = min(k, len(self))
        d2, ids = _kernels.flat_search_batch(self.vectors, q, kk)
        return np.sqrt(d2), ids

    def search(self, query, k: int) -> NeighborList:
        d, i = self.search_arrays(query, k)
        return NeighborList(i[0], d[0])


class HnswIndex:
    """Hierarchical navigable small-world graph built by sequential insertion."""

    kind = "hnsw"

    def __init__(self, vectors, params, seed, levels, counts0, links0, counts_u, links_u,
                 entry, max_level):
        self.vectors = vectors
        self.params = params
        self.seed = int(seed)
        self.levels = levels
        self.offsets = _offsets(levels)
        self.counts0 = counts0
        self.links0 = links0
        self.counts_u = counts_u
        self.links_u = links_u
        self.entry = int(entry)
        self.max_level = int(max_level)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search_arrays(self, queries, k: int, ef_search: int | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        ef = self.params.ef_search if ef_search is None else int(ef_search)
        kk = min(k, len(self))
        if ef < kk:
            raise ValueError(f"ef_search ({ef}) must be >= k ({kk})")
        q = _as_queries(queries, self.dim)
        d2, ids, got = _kernels.hnsw_search_batch(
            self.vectors, q, kk, ef, self.entry, self.max_level, self.links0, self.counts0,
            self.links_u, self.counts_u, self.offsets)
        if np.any(got < kk):
            raise RuntimeError("graph search returned fewer than k results; index is corrupt")
        return np.sqrt(d2), ids

    def search(self, query, k: int, ef_search: int | None = None) -> NeighborList:
        d, i = self.search_arrays(query, k, ef_search)
        return NeighborList(i[0], d[0])

    def layer0_reachable(self) -> np.ndarray:
        return _kernels.reachable_from(self.entry, self.links0, self.counts0)


def _offsets(levels: np.ndarray) -> np.ndarray:
    off = np.zeros(len(levels), dtype=np.int64)
    np.cumsum(levels[:-1], out=off[1:])
    return off


# ---------------------------------------------------------------------------
# level assignment: SplitMix64 stream, one draw per node
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 generator started at ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def assign_levels(n: int, m: int, seed: int) -> np.ndarray:
    """Geometric levels floor(-ln(u) / ln(M)) with u uniform on (0, 1]."""
    u = 1.0 - (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.floor(-np.log(u) / np.log(m)).astype(np.int64)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def build_flat(descriptors) -> FlatIndex:
    vectors = _as_vectors(descriptors)
    if len(vectors) == 0:
        raise ValueError("cannot index an empty descriptor set")
    return FlatIndex(vectors)


def search_flat(index: FlatIndex, query, k: int) -> NeighborList:
    return index.search(query, k)


def build_hnsw(descriptors, params: HnswParams = HnswParams(), seed: int = 0) -> HnswIndex:
    vectors = _as_vectors(descriptors)
    if len(vectors) == 0:
        raise ValueError("cannot index an empty descriptor set")
    levels = assign_levels(len(vectors), params.m, seed)
    links0, counts0, links_u, counts_u, entry, max_level = _kernels.hnsw_build(
        vectors, levels, _offsets(levels), params.m,
        params.ef_construction)
    _kernels.repair_connectivity(vectors, entry, links0, counts0)
    return HnswIndex(vectors, params, seed, levels, counts0, links0, counts_u, links_u,
                     entry, max_level)


def search_hnsw(index: HnswIndex, query, k: int, ef_search: int | None = None) -> NeighborList:
    return index.search(query, k, ef_search)


def batch_search(index, queries, k: int, ef_search: int | None = None) -> list[NeighborList]:
    d, i = index.search_arrays(queries, k, ef_search)
    return [NeighborList(i[r], d[r]) for r in range(len(i))]


def serialize_index(index, path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def index_to_bytes(index) -> bytes:
    sections = [index.vectors.astype("<f4").tobytes()]
    header = {"version": FORMAT_VERSION, "n": len(index), "dim": index.dim}
    if isinstance(index, HnswIndex):
        kind = KIND_HNSW
        header.update(m=index.params.m, ef_construction=index.params.ef_construction,
                      ef_search=index.params.ef_search, seed=index.seed, entry=index.entry,
                      max_level=index.max_level, upper_rows=int(index.links_u.shape[0]))
        for arr in (index.levels, index.counts0, index.links0, index.counts_u, index.links_u):
            sections.append(np.ascontiguousarray(arr, dtype="<i4").tobytes())
    else:
        kind = KIND_FLAT
    payload = b"".join(sections)
    header["payload_crc32"] = zlib.crc32(payload)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + bytes([kind]) + struct.pack("<I", len(head)) + head + payload


def deserialize_index(path):
    return index_from_bytes(Path(path).read_bytes())


def index_from_bytes(blob: bytes):
    if len(blob) < 13 or blob[:8] != MAGIC:
        raise IndexFormatError("not an index file (bad magic bytes)")
    kind = blob[8]
    (hlen,) = struct.unpack("<I", blob[9:13])
    try:
        header = json.loads(blob[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"corrupt index header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index version {header.get('version')}")
    payload = blob[13 + hlen:]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise IndexFormatError("index payload checksum mismatch")
    n, dim = header["n"], header["dim"]
    reader = _Reader(payload)
    vectors = reader.take("<f4", (n, dim)).astype(np.float32)
    if kind == KIND_FLAT:
        index = FlatIndex(vectors)
    elif kind == KIND_HNSW:
        m, s = header["m"], header["upper_rows"]
        levels = reader.take("<i4", (n,)).astype(np.int64)
        counts0 = reader.take("<i4", (n,)).astype(np.int32)
        links0 = reader.take("<i4", (n, 2 * m)).astype(np.int32)
        counts_u = reader.take("<i4", (s,)).astype(np.int32)
        links_u = reader.take("<i4", (s, m)).astype(np.int32)
        params = HnswParams(m, header["ef_construction"], header["ef_search"])
        index = HnswIndex(vectors, params, header["seed"], levels, counts0, links0, counts_u,
                          links_u, header["entry"], header["max_level"])
    else:
        raise IndexFormatError(f"unknown index kind byte {kind}")
    if reader.remaining:
        raise IndexFormatError("trailing bytes after index payload")
    return index


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, dtype: str, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape))
        size = count * np.dtype(dtype).itemsize
        if self.pos + size > len(self.data):
            raise IndexFormatError("index payload is truncated")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).reshape(shape)
        self.pos += size
        return arr

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos
