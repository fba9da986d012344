"""Error trajectories, bin grids and per-sample error PDFs, plus their file formats.

Every array file is a raw little-endian payload next to a ``<path>.json``
sidecar::

    {"kind": "errors", "rows": E, "cols": N, "dtype": "f32le", "shape": [E, N]}

Grids travel inside the PDF-bank sidecar as shortest round-trip decimal
strings, so edges survive a write/read cycle bit-exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}

LINEAR = "linear"
LOGARITHMIC = "logarithmic"


class FormatError(ValueError):
    """A container file is missing, truncated or inconsistent with its sidecar."""


class InvalidTrajectoryError(ValueError):
    def __init__(self, message: str, index: tuple[int, int]):
        super().__init__(f"{message} at (epoch, sample) = {index}")
        self.index = index


# ---------------------------------------------------------------------------
# raw container
# ---------------------------------------------------------------------------


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_array(path, array: np.ndarray, kind: str, dtype: str = "f32le",
                extra: dict | None = None) -> None:
    array = np.asarray(array)
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    shape = list(array.shape)
    meta = {"kind": kind, "dtype": dtype, "shape": shape}
    if array.ndim == 2:
        meta["rows"], meta["cols"] = shape
    elif array.ndim == 1:
        meta["rows"], meta["cols"] = shape[0], 1
    if extra:
        meta.update(extra)
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes())
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n",
                                  encoding="utf-8")


def read_array(path, kind: str | None = None) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if not side.exists():
        raise FormatError(f"missing sidecar metadata {side}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar {side}: {exc}") from exc
    if kind is not None and meta.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {meta.get('kind')!r}")
    dtype = DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise FormatError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    shape = meta.get("shape")
    if shape is None:
        shape = [meta["rows"], meta["cols"]]
    payload = path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, metadata implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy(), meta


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ErrorTrajectoryLog:
    errors: np.ndarray  # (E, N), one row per epoch

    def __post_init__(self):
        self.errors = np.asarray(self.errors)
        if self.errors.ndim != 2 or self.errors.shape[0] < 1 or self.errors.shape[1] < 1:
            raise ValueError(f"trajectory must be a non-empty (E, N) matrix, got {self.errors.shape}")
        bad = ~np.isfinite(self.errors)
        if bad.any():
            raise InvalidTrajectoryError("non-finite error", _first(bad))
        neg = self.errors < 0
        if neg.any():
            raise InvalidTrajectoryError("negative error", _first(neg))

    @property
    def num_epochs(self) -> int:
        return self.errors.shape[0]

    @property
    def num_samples(self) -> int:
        return self.errors.shape[1]


def _first(mask: np.ndarray) -> tuple[int, int]:
    flat = int(np.argmax(mask.reshape(-1)))
    return tuple(int(v) for v in np.unravel_index(flat, mask.shape))


@dataclass(eq=False)
class BinGrid:
    edges: np.ndarray
    spacing: str = LINEAR

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        e = self.edges
        if e.ndim != 1 or len(e) < 2:
            raise ValueError("a grid needs at least two edges")
        if not np.all(np.isfinite(e)) or e[0] < 0 or np.any(np.diff(e) <= 0):
            raise ValueError("edges must be finite, non-negative and strictly increasing")
        if self.spacing not in (LINEAR, LOGARITHMIC):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    @property
    def num_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def eps_max(self) -> float:
        return float(self.edges[-1])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Bin index per value: half-open bins, top bin closed, out-of-range values clipped."""
        idx = np.searchsorted(self.edges, values, side="right") - 1
        return np.clip(idx, 0, self.num_bins - 1)


@dataclass(eq=False)
class PdfBank:
    grid: BinGrid
    pdfs: np.ndarray  # (N, B), rows sum to one

    def __post_init__(self):
        self.pdfs = np.asarray(self.pdfs, dtype=np.float64)
        if self.pdfs.ndim != 2 or self.pdfs.shape[1] != self.grid.num_bins:
            raise ValueError(f"pdf matrix {self.pdfs.shape} does not match {self.grid.num_bins} bins")

    @property
    def sample_count(self) -> int:
        return self.pdfs.shape[0]


@dataclass(eq=False)
class DescriptorSet:
    vectors: np.ndarray  # (N, D) float32

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise ValueError(f"descriptors must be an (N, D) matrix, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("descriptors contain non-finite entries")

    @property
    def num_samples(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------


def make_bin_grid(trajectory: ErrorTrajectoryLog, num_bins: int = 100,
                  spacing: str = LOGARITHMIC, eps_max: float | None = None) -> BinGrid:
    """Bin edges for a trajectory.

    ``eps_max=None`` uses the largest training error as the top edge.  Log grids
    span the smallest positive error to ``eps_max`` and get an extra underflow
    bin ``[0, min_positive)`` in front, so they hold ``num_bins + 1`` bins.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    errors = trajectory.errors
    top = float(errors.max()) if eps_max is None else float(eps_max)
    if not math.isfinite(top) or top <= 0:
        raise ValueError(f"eps_max must be positive and finite, got {top}")
    if spacing == LINEAR:
        edges = np.linspace(0.0, top, num_bins + 1)
        edges[-1] = top
        return BinGrid(edges, LINEAR)
    if spacing != LOGARITHMIC:
        raise ValueError(f"unknown spacing {spacing!r}")
    positive = errors[errors > 0]
    if positive.size == 0:
        raise ValueError("logarithmic bins need at least one positive error")
    low = float(positive.min())
    if low >= top:
        raise ValueError(f"smallest positive error {low} is not below eps_max {top}")
    edges = np.logspace(math.log10(low), math.log10(top), num_bins + 1)
    edges[0], edges[-1] = low, top
    return BinGrid(np.concatenate([[0.0], edges]), LOGARITHMIC)


def histogram_rows(samples: np.ndarray, grid: BinGrid) -> np.ndarray:
    """Integer counts per (column of ``samples``, bin). ``samples`` is (T, N)."""
    t, n = samples.shape
    b = grid.num_bins
    idx = grid.assign(samples) + (np.arange(n) * b)[None, :]
    return np.bincount(idx.reshape(-1), minlength=n * b).reshape(n, b)


def build_pdf_bank(trajectory: ErrorTrajectoryLog, grid: BinGrid, burn_in: int = 0) -> PdfBank:
    """Normalized histogram of each sample's errors after the first ``burn_in`` epochs."""
    if not 0 <= burn_in < trajectory.num_epochs:
        raise ValueError(f"burn_in must be in [0, {trajectory.num_epochs}), got {burn_in}")
    kept = trajectory.errors[burn_in:]
    counts = histogram_rows(kept, grid)
    return PdfBank(grid, counts / float(kept.shape[0]))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_trajectory_log(path, trajectory: ErrorTrajectoryLog) -> None:
    write_array(path, trajectory.errors, kind="errors")


def read_trajectory_log(path) -> ErrorTrajectoryLog:
    errors, meta = read_array(path, kind="errors")
    if len(meta["shape"]) != 2:
        raise FormatError(f"{path}: trajectory must be two-dimensional")
    return ErrorTrajectoryLog(errors)


def grid_to_json(grid: BinGrid) -> dict:
    return {"edges": [repr(float(e)) for e in grid.edges], "spacing": grid.spacing}


def grid_from_json(doc: dict) -> BinGrid:
    return BinGrid(np.array([float(e) for e in doc["edges"]]), doc["spacing"])


def write_pdf_bank(path, bank: PdfBank) -> None:
    write_array(path, bank.pdfs, kind="pdf_bank", dtype="f64le",
                extra={"grid": grid_to_json(bank.grid)})


def read_pdf_bank(path) -> PdfBank:
    pdfs, meta = read_array(path, kind="pdf_bank")
    try:
        grid = grid_from_json(meta["grid"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad grid metadata: {exc}") from exc
    if pdfs.ndim != 2 or pdfs.shape[1] != grid.num_bins:
        raise FormatError(f"{path}: {pdfs.shape} payload does not match {grid.num_bins} bins")
    return PdfBank(grid, pdfs)


def write_descriptor_set(path, descriptors: DescriptorSet) -> None:
    write_array(path, descriptors.vectors, kind="descriptors")


def read_descriptor_set(path) -> DescriptorSet:
    vectors, meta = read_array(path, kind="descriptors")
    if vectors.ndim != 2:
        raise FormatError(f"{path}: descriptors must be two-dimensional")
    return DescriptorSet(vectors)
