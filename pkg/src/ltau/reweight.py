"""Per-sample difficulty from error trajectories and exponential loss weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ltau.trajlog import ErrorTrajectoryLog

UPWEIGHT_EASY = "upweight_easy"
UPWEIGHT_HARD = "upweight_hard"
UNIFORM = "uniform"

# lambda values used for the two schemes on Carbon_GAP_20
DEFAULT_LAMBDA = {UPWEIGHT_EASY: 2.0, UPWEIGHT_HARD: 4.5, UNIFORM: 0.0}


@dataclass(eq=False)
class DifficultyScores:
    d: np.ndarray  # fraction of epochs below the reference MAE; 1 = easy
    reference_mae: float

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if np.any((self.d < 0) | (self.d > 1)):
            raise ValueError("difficulty scores must lie in [0, 1]")


@dataclass(frozen=True)
class WeightScheme:
    kind: str = UNIFORM
    lam: float | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_LAMBDA:
            raise ValueError(f"unknown weighting scheme {self.kind!r}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def effective_lambda(self) -> float:
        return DEFAULT_LAMBDA[self.kind] if self.lam is None else float(self.lam)


def difficulty(trajectory: ErrorTrajectoryLog, reference: float | None = None) -> DifficultyScores:
    """Fraction of epochs in which each sample's error was strictly below the reference MAE.

    ``reference=None`` uses the mean training error of the final epoch.
    """
    errors = trajectory.errors.astype(np.float64)
    mae = float(errors[-1].mean()) if reference is None else float(reference)
    below = (errors < mae).sum(axis=0)
    return DifficultyScores(below / trajectory.num_epochs, mae)


def weights(scores: DifficultyScores, scheme: WeightScheme) -> np.ndarray:
    lam = scheme.effective_lambda
    if scheme.kind == UPWEIGHT_HARD:
        return np.exp(lam * (1.0 - scores.d))
    if scheme.kind == UPWEIGHT_EASY:
        return np.exp(lam * scores.d)
    return np.ones_like(scores.d)


def normalize(w: np.ndarray) -> np.ndarray:
    """Rescale to mean one, the form the trainer consumes."""
    w = np.asarray(w, dtype=np.float64)
    return w / w.mean()
