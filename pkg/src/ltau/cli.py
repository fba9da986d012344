"""Command-line front end: ``ltau <subcommand> ...``.

Every subcommand is a pure function of its input files and flags.  Failures
exit non-zero and print ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ltau import calib, reweight, trajlog, uqcore
from ltau.knn import HnswParams, build_flat, build_hnsw, deserialize_index, serialize_index

logger = logging.getLogger("ltau")


class UsageError(ValueError):
    pass


def _json_dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _name(path) -> str:
    # config echoes carry file names only, so reruns elsewhere stay byte-identical
    return Path(path).name


def _warn(message: str) -> None:
    print(json.dumps({"warning": message}), file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_pdfs(args) -> None:
    traj = trajlog.read_trajectory_log(args.errs)
    grid = trajlog.make_bin_grid(traj, args.bins, args.spacing, args.eps_max)
    bank = trajlog.build_pdf_bank(traj, grid, args.burn_in)
    trajlog.write_pdf_bank(args.out, bank)


def cmd_build_index(args) -> None:
    desc = trajlog.read_descriptor_set(args.desc)
    if args.flat:
        index = build_flat(desc)
    else:
        params = HnswParams(args.m, args.ef_construction, args.ef_search)
        index = build_hnsw(desc, params, args.seed)
    serialize_index(index, args.out)


def _load_pair(index_path, pdfs_path):
    index = deserialize_index(index_path)
    bank = trajlog.read_pdf_bank(pdfs_path)
    if len(index) != bank.sample_count:
        raise UsageError(f"index holds {len(index)} points but {_name(pdfs_path)} has "
                         f"{bank.sample_count} PDFs")
    return index, bank


def _read_groups(path, n: int) -> np.ndarray:
    groups = np.array([int(line) for line in Path(path).read_text().split()], dtype=np.int64)
    if len(groups) != n:
        raise UsageError(f"{len(groups)} group ids for {n} queries")
    return groups


def cmd_predict(args) -> None:
    index, bank = _load_pair(args.index, args.pdfs)
    queries = trajlog.read_descriptor_set(args.queries).vectors
    if queries.shape[1] != index.dim:
        raise UsageError(f"query dimension {queries.shape[1]} != index dimension {index.dim}")
    groups = _read_groups(args.groups, len(queries)) if args.groups else None
    if groups is not None and not args.group_out:
        raise UsageError("--groups needs --group-out")
    k = args.k
    if k > len(index):
        _warn(f"k={k} exceeds the {len(index)} indexed points; clamped")
        k = len(index)
    threshold = None
    if args.ood:
        threshold = uqcore.OodThreshold.from_dict(json.loads(Path(args.ood).read_text()))
    ef = args.ef_search
    if ef is not None:
        ef = max(ef, k)
    elif index.kind == "hnsw" and index.params.ef_search < k:
        ef = k
    est = uqcore.estimate_batch(queries, index, bank, k, threshold, ef)
    write_predictions(args.out, est, args.with_pdf)
    if groups is not None:
        write_groups(args.group_out, groups, est, args.aggregate)


def _flag_text(flag) -> str:
    return "" if flag is None else ("true" if flag else "false")


def write_predictions(path, est: uqcore.BatchEstimate, with_pdf: bool) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["query_id", "expected_error", "nn1_distance", "ood_flag"]
    w.writerow(head + (["pdf"] if with_pdf else []))
    for i in range(len(est)):
        flag = None if est.ood_flags is None else bool(est.ood_flags[i])
        row = [i, repr(float(est.expected_errors[i])), repr(float(est.nn1_distances[i])),
               _flag_text(flag)]
        if with_pdf:
            row.append(json.dumps([float(v) for v in est.pdfs[i]]))
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_predictions(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {
        "expected_error": np.array([float(r["expected_error"]) for r in rows]),
        "nn1_distance": np.array([float(r["nn1_distance"]) for r in rows]),
        "ood_flag": [r["ood_flag"] for r in rows],
    }
    if rows and "pdf" in rows[0]:
        out["pdf"] = np.array([json.loads(r["pdf"]) for r in rows])
    return out


def write_groups(path, groups: np.ndarray, est: uqcore.BatchEstimate, how: str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group_id", "n_queries", f"{how}_expected_error", "max_nn1_distance", "any_ood"])
    for g in np.unique(groups):
        sel = groups == g
        ee = est.expected_errors[sel]
        agg = ee.max() if how == "max" else ee.mean()
        any_ood = None if est.ood_flags is None else bool(est.ood_flags[sel].any())
        w.writerow([int(g), int(sel.sum()), repr(float(agg)),
                    repr(float(est.nn1_distances[sel].max())), _flag_text(any_ood)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _write_report(out_dir: Path, report: calib.CalibrationReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(out_dir / "report.json", report.to_dict())
    lines = ["expected_confidence,observed_fraction"]
    lines += [f"{c!r},{f!r}" for c, f in zip(report.curve.levels.tolist(),
                                             report.curve.observed.tolist())]
    (out_dir / "curve.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_calibrate(args) -> None:
    levels = calib.default_levels(args.levels)
    out_dir = Path(args.out_dir)
    if args.method == "ltau":
        if not (args.predictions and args.pdfs and args.truths):
            raise UsageError("ltau calibration needs --predictions, --pdfs and --truths")
        preds = read_predictions(args.predictions)
        if "pdf" not in preds:
            raise UsageError("predictions file lacks a pdf column; rerun predict --with-pdf")
        grid = trajlog.read_pdf_bank(args.pdfs).grid
        truths, _ = trajlog.read_array(args.truths, kind="true_errors")
        truths = truths.reshape(-1)
        if len(truths) != len(preds["expected_error"]):
            raise UsageError(f"{len(truths)} true errors for {len(preds['expected_error'])} predictions")
        if preds["pdf"].shape[1] != grid.num_bins:
            raise UsageError("prediction PDFs do not match the bank's bin grid")
        config = {"method": "ltau", "predictions": _name(args.predictions),
                  "pdfs": _name(args.pdfs), "truths": _name(args.truths), "levels": args.levels}
        report = calib.evaluate_ltau(preds["pdf"], grid, truths, levels, config)
    else:
        if not (args.ensemble and args.truths):
            raise UsageError("ensemble calibration needs --ensemble and --truths")
        pred, _ = trajlog.read_array(args.ensemble, kind="ensemble_predictions")
        truths, _ = trajlog.read_array(args.truths, kind="ensemble_truths")
        if pred.ndim != 3 or truths.shape != pred.shape[1:]:
            raise UsageError(f"ensemble {pred.shape} and truths {truths.shape} do not match")
        config = {"method": "ensemble", "ensemble": _name(args.ensemble),
                  "truths": _name(args.truths), "mode": args.mode, "levels": args.levels}
        report = calib.evaluate_ensemble(pred, truths, args.mode, levels, config)
    _write_report(out_dir, report)


def cmd_ood_threshold(args) -> None:
    desc = trajlog.read_descriptor_set(args.desc)
    if args.manual is not None:
        threshold = uqcore.OodThreshold.manual(args.manual)
    else:
        index = deserialize_index(args.index)
        if len(index) != desc.num_samples or index.dim != desc.dim:
            raise UsageError("descriptor set and index disagree in shape")
        threshold = uqcore.fit_ood_threshold(desc, index, args.quantile)
    doc = threshold.to_dict()
    doc["config"] = {"desc": _name(args.desc),
                     "index": _name(args.index) if args.index else None}
    _json_dump(Path(args.out), doc)


def cmd_reweight(args) -> None:
    traj = trajlog.read_trajectory_log(args.errs)
    scores = reweight.difficulty(traj, args.reference)
    scheme = reweight.WeightScheme(args.scheme, args.lam)
    w = reweight.weights(scores, scheme)
    trajlog.write_array(args.out, w.astype(np.float32), kind="weights",
                        extra={"scheme": scheme.kind, "lambda": scheme.effective_lambda,
                               "reference_mae": scores.reference_mae})


def cmd_toy_train(args) -> None:
    from ltau import toylab

    spec_doc = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = toylab.ToyTaskSpec.from_dict(spec_doc)
    task = toylab.generate_task(spec)
    weights = None
    if args.weights:
        weights, _ = trajlog.read_array(args.weights, kind="weights")
        weights = weights.reshape(-1).astype(np.float64)
    model = toylab.ToyModel(spec.input_dim, seed=spec.seed)
    result = toylab.train(model, task, args.epochs, args.lr, args.batch_size, weights,
                          seed=spec.seed)
    config = {"task": spec.to_dict(), "epochs": args.epochs, "lr": args.lr,
              "batch_size": args.batch_size,
              "weights": _name(args.weights) if args.weights else None}
    toylab.write_run(args.out_dir, task, result, config)


def cmd_bench(args) -> None:
    from ltau import profiling

    index, bank = _load_pair(args.index, args.pdfs)
    queries = trajlog.read_descriptor_set(args.queries).vectors
    model = inputs = None
    if args.model:
        from ltau.toylab import ToyModel

        if not args.inputs:
            raise UsageError("--model needs --inputs")
        model = ToyModel.load(args.model)
        inputs, _ = trajlog.read_array(args.inputs, kind="inputs")
        inputs = inputs.astype(np.float64)
    result = profiling.profile_queries(index, bank, queries, args.k, args.repeats,
                                       model=model, inputs=inputs, ef_search=args.ef_search)
    _json_dump(Path(args.out), result)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltau", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-pdfs", help="error trajectory -> per-sample PDF bank")
    s.add_argument("--errs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=100)
    s.add_argument("--spacing", choices=[trajlog.LOGARITHMIC, trajlog.LINEAR],
                   default=trajlog.LOGARITHMIC)
    s.add_argument("--eps-max", type=float, default=None,
                   help="top bin edge (default: largest training error)")
    s.add_argument("--burn-in", type=int, default=0)
    s.set_defaults(func=cmd_build_pdfs)

    s = sub.add_parser("build-index", help="descriptor set -> index file")
    s.add_argument("--desc", required=True)
    s.add_argument("--out", required=True)
    kind = s.add_mutually_exclusive_group()
    kind.add_argument("--flat", action="store_true")
    kind.add_argument("--hnsw", action="store_true", help="default")
    s.add_argument("--m", type=int, default=32)
    s.add_argument("--ef-construction", type=int, default=40)
    s.add_argument("--ef-search", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("predict", help="per-query error PDFs and OOD flags as CSV")
    s.add_argument("--index", required=True)
    s.add_argument("--pdfs", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=uqcore.DEFAULT_K)
    s.add_argument("--ef-search", type=int, default=None)
    s.add_argument("--ood", help="threshold JSON from ood-threshold")
    s.add_argument("--with-pdf", action="store_true")
    s.add_argument("--groups", help="text file with one integer configuration id per query")
    s.add_argument("--group-out")
    s.add_argument("--aggregate", choices=["mean", "max"], default="max")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("calibrate", help="calibration report JSON and curve CSV")
    s.add_argument("--method", choices=["ltau", "ensemble"], default="ltau")
    s.add_argument("--predictions")
    s.add_argument("--pdfs")
    s.add_argument("--ensemble", help="(M, N, C) ensemble_predictions container")
    s.add_argument("--truths", required=True)
    s.add_argument("--mode", choices=[calib.HALF_NORMAL, calib.ONE_SIDED], default=calib.HALF_NORMAL)
    s.add_argument("--levels", type=int, default=101)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("ood-threshold", help="first-neighbor distance cutoff")
    s.add_argument("--desc", required=True)
    s.add_argument("--index")
    s.add_argument("--quantile", type=float, default=uqcore.DEFAULT_OOD_QUANTILE)
    s.add_argument("--manual", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ood_threshold)

    s = sub.add_parser("reweight", help="difficulty-based loss weights")
    s.add_argument("--errs", required=True)
    s.add_argument("--scheme", choices=[reweight.UPWEIGHT_HARD, reweight.UPWEIGHT_EASY,
                                        reweight.UNIFORM], required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--reference", type=float, default=None,
                   help="reference MAE (default: final-epoch training MAE)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reweight)

    s = sub.add_parser("toy-train", help="train the synthetic model and write its logs")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", help="JSON task spec (fields of ToyTaskSpec)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--weights", help="weights container from reweight")
    s.set_defaults(func=cmd_toy_train)

    s = sub.add_parser("bench", help="query throughput and latency")
    s.add_argument("--index", required=True)
    s.add_argument("--pdfs", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int, default=uqcore.DEFAULT_K)
    s.add_argument("--ef-search", type=int, default=None)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--model", help="toy model JSON, to report the UQ share of prediction time")
    s.add_argument("--inputs", help="inputs container matching --queries")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, MemoryError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
