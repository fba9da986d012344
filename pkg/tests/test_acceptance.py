"""Acceptance criteria, one test per criterion.

Each test appends a one-line verdict that is printed in the pytest terminal
summary (and directly when this file is run as a script).  Tolerances and
sizes are the ones the criteria state; nothing is relaxed here.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ltau import calib, reweight, toylab, trajlog, uqcore
from ltau.knn import build_flat, build_hnsw
from ltau.trajlog import BinGrid, ErrorTrajectoryLog, PdfBank, build_pdf_bank, make_bin_grid

VERDICTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)


def recall(got: np.ndarray, truth: np.ndarray) -> float:
    k = truth.shape[1]
    return float(np.mean([len(set(a) & set(b)) / k for a, b in zip(got, truth)]))


# ---------------------------------------------------------------------------
# 1. exactness of the graph search with a full beam
# ---------------------------------------------------------------------------


def test_criterion_1_hnsw_oracle_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mismatched_queries = 0
    total = 0
    for s in range(50):
        n = int(rng.integers(100, 2001))
        vec = rng.standard_normal((n, 32)).astype(np.float32)
        queries = rng.standard_normal((1000, 32)).astype(np.float32)
        hd, hi = build_hnsw(vec, seed=s).search_arrays(queries, 10, n)
        fd, fi = build_flat(vec).search_arrays(queries, 10)
        for a, b, da, db in zip(hi, fi, hd, fd):
            total += 1
            if set(a) != set(b):
                # ties at the k-th distance may legitimately swap ids
                if not np.array_equal(da, db):
                    mismatched_queries += 1
    elapsed = time.perf_counter() - t0
    ok = mismatched_queries == 0 and elapsed < 60
    verdict(1, ok, f"{total - mismatched_queries}/{total} queries exact, {elapsed:.1f}s (limit 60s)")
    assert mismatched_queries == 0
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. recall and throughput at the default parameters on 100k vectors
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def hundred_k():
    rng = np.random.default_rng(2)
    vec = rng.standard_normal((100_000, 32)).astype(np.float32)
    vec /= np.linalg.norm(vec, axis=1, keepdims=True)
    queries = rng.standard_normal((1000, 32)).astype(np.float32)
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    return vec, queries


def test_criterion_2_hnsw_recall_and_throughput(hundred_k):
    vec, queries = hundred_k
    t0 = time.perf_counter()
    index = build_hnsw(vec)
    build_s = time.perf_counter() - t0
    flat = build_flat(vec)
    flat.search_arrays(queries[:2], 10)
    index.search_arrays(queries[:2], 10)
    t = time.perf_counter()
    _, truth = flat.search_arrays(queries, 10)
    flat_s = time.perf_counter() - t
    t = time.perf_counter()
    _, got16 = index.search_arrays(queries, 10, 16)
    hnsw_s = time.perf_counter() - t
    _, got256 = index.search_arrays(queries, 10, 256)
    r16, r256 = recall(got16, truth), recall(got256, truth)
    speedup = flat_s / hnsw_s
    elapsed = time.perf_counter() - t0
    checks = {"recall@10 efS=16 >= 0.90": r16 >= 0.90, "recall@10 efS=256 >= 0.99": r256 >= 0.99,
              "throughput >= 10x flat": speedup >= 10, "runtime < 300s": elapsed < 300}
    detail = (f"recall16={r16:.4f} recall256={r256:.4f} speedup={speedup:.1f}x "
              f"build={build_s:.1f}s total={elapsed:.1f}s; failing: "
              f"{[k for k, v in checks.items() if not v] or 'none'}")
    verdict(2, all(checks.values()), detail)
    assert r256 >= 0.99 and speedup >= 10 and elapsed < 300
    assert r16 >= 0.90


# ---------------------------------------------------------------------------
# 3. PDF construction on 10^5 randomized trajectories
# ---------------------------------------------------------------------------


def test_criterion_3_pdf_correctness():
    rng = np.random.default_rng(3)
    worst_sum = 0.0
    conserved = True
    clipped = True
    samples = 0
    for batch in range(20):
        n = 5000
        epochs = int(rng.integers(1, 60))
        scale = rng.lognormal(-2, 1.0, size=n)
        errors = (rng.lognormal(0, 1.0, size=(epochs, n)) * scale).astype(np.float32)
        errors[rng.random(errors.shape) < 0.02] = 0.0
        log = ErrorTrajectoryLog(errors)
        spacing = trajlog.LOGARITHMIC if batch % 2 else trajlog.LINEAR
        # alternate between the training maximum and an explicit cap that forces clipping
        cap = None if batch % 4 < 2 else float(np.quantile(errors, 0.9))
        grid = make_bin_grid(log, int(rng.integers(5, 120)), spacing, cap)
        counts = trajlog.histogram_rows(errors, grid)
        conserved &= bool(np.all(counts.sum(axis=1) == epochs))
        above = (errors >= grid.edges[-2]).sum(axis=0)
        clipped &= bool(np.all(counts[:, -1] == above))
        bank = build_pdf_bank(log, grid)
        worst_sum = max(worst_sum, float(np.max(np.abs(bank.pdfs.sum(axis=1) - 1.0))))
        samples += n
    ok = worst_sum <= 1e-9 and conserved and clipped
    verdict(3, ok, f"{samples} trajectories, max |row sum - 1| = {worst_sum:.2e}, "
                   f"counts conserved={conserved}, top-bin clipping={clipped}")
    assert ok


# ---------------------------------------------------------------------------
# 4. calibration oracle
# ---------------------------------------------------------------------------


def test_criterion_4_calibration_oracle():
    rng = np.random.default_rng(4)
    # PDFs as they come out of real trajectories: 100 log bins, 200 epochs per sample
    n = 10_000
    scale = rng.lognormal(-3, 1.0, size=n)
    errors = rng.lognormal(0, 0.8, size=(200, n)) * scale
    log = ErrorTrajectoryLog(errors)
    grid = make_bin_grid(log, 100)
    bank = build_pdf_bank(log, grid)
    # each point's true error is one draw from its own PDF: a bin, then uniform inside it
    u = rng.random((n, 1))
    bins = np.minimum((np.cumsum(bank.pdfs, axis=1) < u).sum(axis=1), grid.num_bins - 1)
    true = rng.uniform(grid.edges[bins], grid.edges[bins + 1])
    report = calib.evaluate_ltau(bank.pdfs, grid, true)
    levels = calib.default_levels(101)
    ones = calib.miscalibration_areas(calib.CalibrationCurve(levels, np.ones(101)))
    zeros = calib.miscalibration_areas(calib.CalibrationCurve(levels, np.zeros(101)))
    ok = report.area_total <= 0.03 and ones[1] == 0.5 and zeros[0] == 0.5
    verdict(4, ok, f"|A|={report.area_total:.4f} (<= 0.03); f=1 gives A-={ones[1]!r}; "
                   f"f=0 gives A+={zeros[0]!r}")
    assert ok


# ---------------------------------------------------------------------------
# 5. metric unit examples
# ---------------------------------------------------------------------------


def _close(a, b, rel):
    return abs(a - b) <= rel * max(abs(b), 1e-300)


def test_criterion_5_metric_examples():
    x = np.arange(10.0)
    g3 = BinGrid([0, 1, 2, 3])
    cases = {
        "pearson y=2x+1": _close(calib.pearson(x, 2 * x + 1), 1.0, 1e-12),
        "spearman decreasing": _close(calib.spearman(x, -x**3), -1.0, 1e-12),
        "spearman [1,3,2]": _close(calib.spearman([1, 2, 3], [1, 3, 2]), 0.5, 1e-12),
        "expected [0.5,0.5]": _close(uqcore.expected_error(np.array([0.5, 0.5]), BinGrid([0, 1, 2])), 1.0, 1e-12),
        "expected [1.0]": _close(uqcore.expected_error(np.array([1.0]), BinGrid([0, 2])), 1.0, 1e-12),
        "expected [0.2,0.3,0.5]": _close(uqcore.expected_error(np.array([0.2, 0.3, 0.5]), g3), 1.8, 1e-12),
        "threshold c=0.5": uqcore.confidence_threshold(np.array([0.2, 0.3, 0.5]), g3, 0.5) == 2.0,
        "threshold c=1": uqcore.confidence_threshold(np.array([0.2, 0.3, 0.5]), g3, 1.0) == 3.0,
        "threshold c=0": uqcore.confidence_threshold(np.array([0.2, 0.3, 0.5]), g3, 0.0) == 0.0,
        "sharpness one-bin": calib.sharpness(np.eye(3), g3) == 0.0,
        "sharpness [0.5,0.5]": _close(calib.sharpness(np.array([[0.5, 0.5]]), BinGrid([0, 1, 2])), 0.5, 1e-12),
    }
    rng = np.random.default_rng(5)
    sig = rng.uniform(0.1, 2, 1000)
    cases["ensemble sharpness"] = _close(calib.ensemble_sharpness(sig),
                                         math.sqrt(math.fsum(sig**2) / 1000), 1e-12)
    raw = rng.random((400, 25))
    bank = PdfBank(BinGrid(np.linspace(0, 1, 26)), raw / raw.sum(1, keepdims=True))
    ids = rng.choice(400, (50, 10))
    direct = np.array([[math.fsum(bank.pdfs[j, b] for j in row) / 10 for b in range(25)] for row in ids])
    cases["neighbor average"] = bool(np.allclose(uqcore.average_pdfs(bank, ids), direct, rtol=1e-12, atol=0))
    failed = [k for k, v in cases.items() if not v]
    verdict(5, not failed, f"{len(cases) - len(failed)}/{len(cases)} examples reproduced; "
                           f"failing: {failed or 'none'}")
    assert not failed


# ---------------------------------------------------------------------------
# 6 and 7. end-to-end trend and OOD separation on the default toy task
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_run():
    t0 = time.perf_counter()
    spec = toylab.ToyTaskSpec(seed=0)
    task = toylab.generate_task(spec)
    result = toylab.train(toylab.ToyModel(spec.input_dim, seed=spec.seed), task, epochs=200,
                          seed=spec.seed)
    bank = build_pdf_bank(result.trajectory, make_bin_grid(result.trajectory))
    index = build_hnsw(result.descriptors)
    threshold = uqcore.fit_ood_threshold(result.descriptors, index)
    model = result.model
    out = {}
    for name, split in (("id", task.test), ("ood", task.ood)):
        est = uqcore.estimate_batch(model.descriptors(split.x), index, bank, threshold=threshold)
        out[name] = (est, np.abs(model.predict(split.x) - split.y), split)
    return out, time.perf_counter() - t0


def test_criterion_6_end_to_end_trend(default_run):
    out, elapsed = default_run
    cs_id = calib.spearman(out["id"][0].expected_errors, out["id"][1])
    cs_ood = calib.spearman(out["ood"][0].expected_errors, out["ood"][1])
    cs_sigma = calib.spearman(out["id"][0].expected_errors, out["id"][2].sigma)
    ok = cs_id >= 0.6 and cs_ood < cs_id and elapsed < 600
    verdict(6, ok, f"C_S(ID)={cs_id:.3f} (>= 0.6), C_S(OOD)={cs_ood:.3f} (< ID), "
                   f"C_S(expected, sigma)={cs_sigma:.3f}, {elapsed:.1f}s (limit 600s)")
    assert ok


def test_criterion_7_ood_separation(default_run):
    out, _ = default_run
    ood_frac = float(np.mean(out["ood"][0].ood_flags))
    id_frac = float(np.mean(out["id"][0].ood_flags))
    ok = ood_frac >= 0.90 and id_frac <= 0.05
    verdict(7, ok, f"OOD above cutoff {ood_frac:.1%} (>= 90%), ID above cutoff {id_frac:.1%} (<= 5%)")
    assert ok


# ---------------------------------------------------------------------------
# 8. loss reweighting trend
# ---------------------------------------------------------------------------


def test_criterion_8_reweighting_trend():
    res = toylab.compare_weightings(range(5))
    gap = {k: v["mean_gap"] for k, v in res.items()}
    tr = {k: v["mean_train_mae"] for k, v in res.items()}
    hard, uni, easy = reweight.UPWEIGHT_HARD, reweight.UNIFORM, reweight.UPWEIGHT_EASY
    order_ok = gap[hard] > gap[uni] > gap[easy]
    train_ok = tr[hard] < tr[uni] and tr[hard] < tr[easy]
    detail = ("gap " + ", ".join(f"{k}={gap[k]:.4f}" for k in (hard, uni, easy)) +
              "; train MAE " + ", ".join(f"{k}={tr[k]:.4f}" for k in (hard, uni, easy)))
    verdict(8, order_ok and train_ok, detail)
    assert order_ok and train_ok


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------

TASK = {"n_train": 1500, "n_val": 200, "n_test": 500, "n_ood": 200, "seed": 11}
STEPS = [
    ["toy-train", "--out-dir", "run", "--config", "task.json", "--epochs", "25"],
    ["build-pdfs", "--errs", "run/train.errs", "--out", "run/train.pdfb"],
    ["build-index", "--desc", "run/train.desc", "--out", "run/train.idx", "--seed", "4"],
    ["build-index", "--flat", "--desc", "run/train.desc", "--out", "run/flat.idx"],
    ["ood-threshold", "--desc", "run/train.desc", "--index", "run/train.idx", "--out", "run/ood.json"],
    ["predict", "--index", "run/train.idx", "--pdfs", "run/train.pdfb", "--queries", "run/test.desc",
     "--ood", "run/ood.json", "--with-pdf", "--out", "run/test.csv"],
    ["predict", "--index", "run/flat.idx", "--pdfs", "run/train.pdfb", "--queries", "run/ood.desc",
     "--ood", "run/ood.json", "--with-pdf", "--out", "run/ood.csv"],
    ["calibrate", "--predictions", "run/test.csv", "--pdfs", "run/train.pdfb", "--truths",
     "run/test.true", "--out-dir", "run/report"],
    ["reweight", "--errs", "run/train.errs", "--scheme", "upweight_easy", "--out", "run/easy.wts"],
    ["toy-train", "--out-dir", "run_easy", "--config", "task.json", "--epochs", "10",
     "--weights", "run/easy.wts"],
]


def _pipeline(root: Path, threads: int) -> dict:
    root.mkdir(parents=True)
    (root / "task.json").write_text(json.dumps(TASK))
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads), OPENBLAS_NUM_THREADS=str(threads),
               OMP_NUM_THREADS=str(threads), MKL_NUM_THREADS=str(threads))
    for step in STEPS:
        proc = subprocess.run([sys.executable, "-m", "ltau.cli", *step], cwd=root, env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, (step, proc.stderr)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(tmp_path):
    runs = [_pipeline(tmp_path / f"r{i}", threads) for i, threads in enumerate((1, 1, 4))]
    same = runs[0] == runs[1] == runs[2]
    verdict(9, same, f"{len(runs[0])} output files compared over 3 runs (threads 1, 1, 4); "
                     f"byte-identical={same}")
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
