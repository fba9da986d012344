"""Correlation, calibration curves, miscalibration areas and sharpness.

Both UQ methods are evaluated the same way: a method supplies one scalar
uncertainty per test point plus a function mapping a confidence level to
per-point error thresholds.  The calibration curve is the observed fraction
of true errors at or below their thresholds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erfinv, ndtri
from scipy.stats import rankdata

from ltau.trajlog import BinGrid
from ltau.uqcore import confidence_thresholds, expected_error

HALF_NORMAL = "half_normal"
ONE_SIDED = "one_sided"


class UndefinedCorrelationError(ValueError):
    pass


def default_levels(n: int = 101) -> np.ndarray:
    return np.arange(n) / (n - 1)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length vectors with at least two entries")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    return max(-1.0, min(1.0, math.fsum(dx * dy) / math.sqrt(sxx * syy)))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    return pearson(rankdata(x), rankdata(y))


@dataclass(eq=False)
class MethodPredictions:
    uncertainties: np.ndarray
    true_errors: np.ndarray
    thresholds: Callable[[float], np.ndarray]

    def __post_init__(self):
        self.uncertainties = np.asarray(self.uncertainties, dtype=np.float64)
        self.true_errors = np.asarray(self.true_errors, dtype=np.float64)
        if self.uncertainties.shape != self.true_errors.shape or self.uncertainties.ndim != 1:
            raise ValueError("uncertainties and true errors must be equal-length vectors")
        if not (np.all(np.isfinite(self.uncertainties)) and np.all(np.isfinite(self.true_errors))):
            raise ValueError("uncertainties and true errors must be finite")


def ltau_predictions(pdfs: np.ndarray, grid: BinGrid, true_errors) -> MethodPredictions:
    pdfs = np.atleast_2d(pdfs)
    return MethodPredictions(expected_error(pdfs, grid), true_errors,
                             lambda c: confidence_thresholds(pdfs, grid, c))


def gaussian_thresholds(sigma, confidence: float, mode: str = HALF_NORMAL) -> np.ndarray:
    """Error thresholds for zero-mean Gaussian errors with scale ``sigma``.

    ``half_normal`` treats the error as |N(0, sigma^2)|, giving sigma*sqrt(2)*erfinv(c);
    ``one_sided`` uses the plain normal quantile, floored at zero.
    """
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {confidence}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if confidence == 1.0:
        return np.full(sigma.shape, np.inf)
    if mode == HALF_NORMAL:
        z = math.sqrt(2.0) * float(erfinv(confidence))
    elif mode == ONE_SIDED:
        z = max(0.0, float(ndtri(confidence)))
    else:
        raise ValueError(f"unknown threshold mode {mode!r}")
    return sigma * z


def ensemble_uncertainty(predictions, truths, mode: str = HALF_NORMAL) -> MethodPredictions:
    """Spread of an ensemble's vector predictions, shape (M, N, C), against truths (N, C).

    Uncertainty is the population standard deviation over models averaged over
    components; the true error is the L2 norm of (ensemble mean - truth).
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.ndim != 3 or truths.shape != predictions.shape[1:]:
        raise ValueError("predictions must be (M, N, C) and truths (N, C)")
    if predictions.shape[0] < 2:
        raise ValueError("an ensemble needs at least two models")
    sigma = predictions.std(axis=0, ddof=0).mean(axis=1)
    err = np.linalg.norm(predictions.mean(axis=0) - truths, axis=1)
    return MethodPredictions(sigma, err, lambda c: gaussian_thresholds(sigma, c, mode))


@dataclass(eq=False)
class CalibrationCurve:
    levels: np.ndarray
    observed: np.ndarray


def calibration_curve(preds: MethodPredictions, levels=None) -> CalibrationCurve:
    levels = default_levels() if levels is None else np.asarray(levels, dtype=np.float64)
    n = len(preds.true_errors)
    observed = np.array([np.count_nonzero(preds.true_errors <= preds.thresholds(float(c))) / n
                         for c in levels])
    return CalibrationCurve(levels, observed)


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return math.fsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))


def miscalibration_areas(curve: CalibrationCurve) -> tuple[float, float, float]:
    """(overconfidence A+, underconfidence A-, total |A|) by the trapezoidal rule."""
    c, f = curve.levels, curve.observed
    if np.any(np.diff(c) < 0):
        raise ValueError("curve levels must be sorted")
    over = _trapezoid(c, np.maximum(c - f, 0.0))
    under = _trapezoid(c, np.maximum(f - c, 0.0))
    return over, under, over + under


def sharpness(pdfs: np.ndarray, grid: BinGrid) -> float:
    """Root of the mean per-point variance of the predicted error distributions."""
    pdfs = np.atleast_2d(pdfs)
    centers = grid.centers
    mean = (pdfs * centers).sum(axis=1)
    var = (pdfs * centers**2).sum(axis=1) - mean**2
    # variance about the mean is non-negative; guard against cancellation
    var = np.maximum(var, 0.0)
    return math.sqrt(math.fsum(var) / len(var))


def ensemble_sharpness(sigma) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    return math.sqrt(math.fsum(sigma**2) / len(sigma))


@dataclass(eq=False)
class CalibrationReport:
    method: str
    pearson: float
    spearman: float
    curve: CalibrationCurve
    area_over: float
    area_under: float
    area_total: float
    sharpness: float
    n_points: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_points": self.n_points,
            "pearson": self.pearson,
            "spearman": self.spearman,
            "area_over": self.area_over,
            "area_under": self.area_under,
            "area_total": self.area_total,
            "sharpness": self.sharpness,
            "curve": {"levels": self.curve.levels.tolist(),
                      "observed": self.curve.observed.tolist()},
            "config": self.config,
        }


def evaluate(method: str, preds: MethodPredictions, sharp: float, levels=None,
             config: dict | None = None) -> CalibrationReport:
    curve = calibration_curve(preds, levels)
    over, under, total = miscalibration_areas(curve)
    return CalibrationReport(method, pearson(preds.uncertainties, preds.true_errors),
                             spearman(preds.uncertainties, preds.true_errors), curve,
                             over, under, total, sharp, len(preds.true_errors), config or {})


def evaluate_ltau(pdfs, grid: BinGrid, true_errors, levels=None, config=None) -> CalibrationReport:
    return evaluate("ltau", ltau_predictions(pdfs, grid, true_errors), sharpness(pdfs, grid),
                    levels, config)


def evaluate_ensemble(predictions, truths, mode: str = HALF_NORMAL, levels=None,
                      config=None) -> CalibrationReport:
    preds = ensemble_uncertainty(predictions, truths, mode)
    return evaluate("ensemble", preds, ensemble_sharpness(preds.uncertainties), levels, config)


def average_reports(reports: list[CalibrationReport]) -> dict:
    """Scalar metrics averaged over reports, e.g. one per ensemble member's trajectory."""
    keys = ("pearson", "spearman", "area_over", "area_under", "area_total", "sharpness")
    return {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in keys} | {
        "n_reports": len(reports)}
