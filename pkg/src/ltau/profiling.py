"""Wall-clock cost of UQ queries, alone and relative to a model forward pass.

Timings depend on the machine, so nothing here is asserted; the numbers are
meant for side-by-side comparison of index settings.
"""
from __future__ import annotations

import time

import numpy as np

from ltau.trajlog import PdfBank
from ltau.uqcore import average_pdfs, expected_error


def _best_of(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def profile_queries(index, bank: PdfBank, queries: np.ndarray, k: int = 10, repeats: int = 3,
                    latency_samples: int = 200, model=None, inputs=None,
                    ef_search: int | None = None) -> dict:
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    k = min(k, len(index))
    if ef_search is None and index.kind == "hnsw":
        ef_search = max(index.params.ef_search, k)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")

    def knn():
        return index.search_arrays(queries, k, ef_search)

    _, ids = knn()  # warm-up, also compiles the kernels
    t_knn = _best_of(knn, repeats)
    t_pdf = _best_of(lambda: expected_error(average_pdfs(bank, ids), bank.grid), repeats)
    t_uq = t_knn + t_pdf

    lat = []
    for q in queries[:latency_samples]:
        t0 = time.perf_counter()
        _, i = index.search_arrays(q, k, ef_search)
        expected_error(average_pdfs(bank, i), bank.grid)
        lat.append(time.perf_counter() - t0)
    lat_ms = np.array(lat) * 1e3

    report = {
        "index_kind": index.kind,
        "n_indexed": len(index),
        "dim": index.dim,
        "n_queries": len(queries),
        "k": k,
        "ef_search": ef_search,
        "repeats": repeats,
        "batch_seconds": {"knn": t_knn, "pdf_average": t_pdf, "total": t_uq},
        "throughput_qps": len(queries) / t_uq if t_uq > 0 else None,
        "latency_ms": {"mean": float(lat_ms.mean()), "p50": float(np.percentile(lat_ms, 50)),
                       "p95": float(np.percentile(lat_ms, 95)), "samples": len(lat_ms)},
    }
    if model is not None:
        inputs = np.asarray(inputs, dtype=np.float64)
        if len(inputs) != len(queries):
            raise ValueError("model inputs and query descriptors differ in count")

        def forward():
            out, _ = model.forward(inputs, keep=True)
            return out

        forward()
        t_model = _best_of(forward, repeats)
        report["model_forward_seconds"] = t_model
        report["uq_share_percent"] = 100.0 * t_uq / (t_uq + t_model)
    return report
