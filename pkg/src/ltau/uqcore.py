"""Error-PDF estimates for new points from their nearest training neighbors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ltau.knn import NeighborList
from ltau.trajlog import BinGrid, PdfBank

DEFAULT_K = 10
DEFAULT_OOD_QUANTILE = 0.99
_GATHER_LIMIT = 1 << 22


@dataclass(eq=False)
class UqEstimate:
    pdf: np.ndarray
    expected_error: float
    nn1_distance: float
    neighbor_ids: np.ndarray
    ood_flag: bool | None = None


@dataclass(frozen=True)
class OodThreshold:
    cutoff_distance: float
    policy: str = "quantile"  # or "manual"
    quantile: float | None = DEFAULT_OOD_QUANTILE
    degenerate: bool = False  # every training point has an exact duplicate

    def __post_init__(self):
        if not np.isfinite(self.cutoff_distance) or self.cutoff_distance < 0:
            raise ValueError("cutoff must be finite and non-negative")
        if self.cutoff_distance == 0 and not self.degenerate:
            raise ValueError("cutoff must be positive")

    @classmethod
    def manual(cls, value: float) -> "OodThreshold":
        return cls(float(value), policy="manual", quantile=None)

    def flag(self, distances):
        return np.asarray(distances) > self.cutoff_distance

    def to_dict(self) -> dict:
        return {"cutoff_distance": self.cutoff_distance, "policy": self.policy,
                "quantile": self.quantile, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, doc: dict) -> "OodThreshold":
        return cls(doc["cutoff_distance"], doc["policy"], doc.get("quantile"),
                   doc.get("degenerate", False))


def average_pdfs(bank: PdfBank, neighbors: NeighborList | np.ndarray) -> np.ndarray:
    """Unweighted per-bin mean of the neighbors' PDFs."""
    ids = neighbors.ids if isinstance(neighbors, NeighborList) else np.asarray(neighbors)
    if ids.size == 0:
        raise ValueError("cannot average an empty neighbor list")
    if ids.ndim == 1:
        return bank.pdfs[ids].mean(axis=0)
    # gather in query chunks so large k does not materialize a (Q, k, B) block
    step = max(1, _GATHER_LIMIT // (ids.shape[1] * bank.grid.num_bins))
    out = np.empty((len(ids), bank.grid.num_bins))
    for start in range(0, len(ids), step):
        out[start:start + step] = bank.pdfs[ids[start:start + step]].mean(axis=1)
    return out


def expected_error(pdf: np.ndarray, grid: BinGrid):
    """Expectation over bin midpoints; works row-wise on a stack of PDFs."""
    # an explicit row sum rather than a BLAS product: results must not depend on
    # batch shape or thread count
    return (np.asarray(pdf) * grid.centers).sum(axis=-1)


def confidence_threshold(pdf: np.ndarray, grid: BinGrid, confidence: float) -> float:
    """Upper edge of the first bin where the CDF reaches ``confidence``."""
    return float(confidence_thresholds(np.asarray(pdf)[None, :], grid, confidence)[0])


def confidence_thresholds(pdfs: np.ndarray, grid: BinGrid, confidence: float) -> np.ndarray:
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {confidence}")
    pdfs = np.atleast_2d(pdfs)
    if confidence == 0.0:
        return np.full(len(pdfs), grid.edges[0])
    cdf = np.cumsum(pdfs, axis=1)
    # the CDF never decreases, so the first bin reaching c is the count of bins below c;
    # rounding can leave the last value a hair under 1, hence the clip
    first = np.minimum((cdf < confidence).sum(axis=1), grid.num_bins - 1)
    return grid.edges[first + 1]


@dataclass(eq=False)
class BatchEstimate:
    pdfs: np.ndarray  # (Q, B)
    expected_errors: np.ndarray
    nn1_distances: np.ndarray
    neighbor_ids: np.ndarray  # (Q, k)
    ood_flags: np.ndarray | None

    def __len__(self) -> int:
        return len(self.expected_errors)

    def __getitem__(self, i: int) -> UqEstimate:
        flag = None if self.ood_flags is None else bool(self.ood_flags[i])
        return UqEstimate(self.pdfs[i], float(self.expected_errors[i]),
                          float(self.nn1_distances[i]), self.neighbor_ids[i], flag)


def _check_pair(index, bank: PdfBank) -> None:
    if len(index) == 0:
        raise ValueError("index is empty")
    if len(index) != bank.sample_count:
        raise ValueError(f"index holds {len(index)} points but the PDF bank has {bank.sample_count}")


def estimate_batch(queries: np.ndarray, index, bank: PdfBank, k: int = DEFAULT_K,
                   threshold: OodThreshold | None = None,
                   ef_search: int | None = None) -> BatchEstimate:
    _check_pair(index, bank)
    dist, ids = index.search_arrays(queries, k, ef_search)
    pdfs = average_pdfs(bank, ids)
    flags = None if threshold is None else threshold.flag(dist[:, 0])
    return BatchEstimate(pdfs, expected_error(pdfs, bank.grid), dist[:, 0], ids, flags)


def estimate(query_descriptor: np.ndarray, index, bank: PdfBank, k: int = DEFAULT_K,
             threshold: OodThreshold | None = None, ef_search: int | None = None) -> UqEstimate:
    query = np.asarray(query_descriptor)
    if query.ndim != 1:
        raise ValueError("estimate() takes a single descriptor vector")
    return estimate_batch(query, index, bank, k, threshold, ef_search)[0]


def self_excluded_nn1(descriptors: np.ndarray, index, ef_search: int | None = None) -> np.ndarray:
    """Distance from every indexed point to its nearest *other* point."""
    if len(index) < 2:
        raise ValueError("need at least two points to exclude self-matches")
    k = 2
    if ef_search is not None:
        ef_search = max(ef_search, k)
    elif getattr(index, "params", None) is not None:
        ef_search = max(index.params.ef_search, k)
    dist, ids = index.search_arrays(descriptors, k, ef_search)
    own = np.arange(len(ids))
    # with duplicates a lower id may sort before the point itself; take the first foreign id
    return np.where(ids[:, 0] != own, dist[:, 0], dist[:, 1])


def fit_ood_threshold(train_descriptors, index, quantile: float = DEFAULT_OOD_QUANTILE,
                      ef_search: int | None = None) -> OodThreshold:
    vectors = getattr(train_descriptors, "vectors", train_descriptors)
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must be in [0, 1]")
    if len(vectors) != len(index):
        raise ValueError("descriptors and index differ in size")
    nn1 = self_excluded_nn1(vectors, index, ef_search)
    cutoff = float(np.quantile(nn1, quantile))
    return OodThreshold(cutoff, "quantile", quantile, degenerate=cutoff == 0.0)
