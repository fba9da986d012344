import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ltau import reweight
from ltau.reweight import DifficultyScores, WeightScheme
from ltau.trajlog import ErrorTrajectoryLog


def test_difficulty_examples():
    log = ErrorTrajectoryLog(np.array([[0.1, 0.9, 0.1], [0.1, 0.9, 0.3]]))
    scores = reweight.difficulty(log, reference=0.2)
    np.testing.assert_array_equal(scores.d, [1.0, 0.0, 0.5])
    assert scores.reference_mae == 0.2


def test_reference_defaults_to_final_epoch_mae():
    log = ErrorTrajectoryLog(np.array([[5.0, 5.0], [0.1, 0.3]]))
    scores = reweight.difficulty(log)
    assert scores.reference_mae == pytest.approx(0.2)
    np.testing.assert_array_equal(scores.d, [0.5, 0.0])


def test_ties_count_as_not_below():
    log = ErrorTrajectoryLog(np.array([[0.5], [0.5]]))
    assert reweight.difficulty(log).d[0] == 0.0


def test_weight_values():
    one, zero = DifficultyScores(np.array([1.0]), 0.1), DifficultyScores(np.array([0.0]), 0.1)
    assert reweight.weights(one, WeightScheme(reweight.UPWEIGHT_HARD))[0] == 1.0
    assert reweight.weights(one, WeightScheme(reweight.UPWEIGHT_EASY))[0] == pytest.approx(7.389, abs=5e-4)
    assert reweight.weights(zero, WeightScheme(reweight.UPWEIGHT_HARD))[0] == pytest.approx(90.017, abs=5e-4)
    assert reweight.weights(one, WeightScheme(reweight.UPWEIGHT_EASY))[0] == math.exp(2.0)
    assert reweight.weights(zero, WeightScheme(reweight.UPWEIGHT_HARD))[0] == math.exp(4.5)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 10),
       st.sampled_from([reweight.UPWEIGHT_HARD, reweight.UPWEIGHT_EASY]))
def test_bounds_and_monotonicity(d, lam, kind):
    d = np.sort(np.array(d))
    w = reweight.weights(DifficultyScores(d, 0.0), WeightScheme(kind, lam))
    assert np.all(w >= 1.0) and np.all(w <= math.exp(lam) * (1 + 1e-15))
    step = np.diff(w)
    assert np.all(step <= 0) if kind == reweight.UPWEIGHT_HARD else np.all(step >= 0)


@pytest.mark.parametrize("kind", [reweight.UPWEIGHT_HARD, reweight.UPWEIGHT_EASY])
def test_zero_lambda_is_uniform(kind):
    d = np.linspace(0, 1, 7)
    np.testing.assert_array_equal(reweight.weights(DifficultyScores(d, 0.0), WeightScheme(kind, 0.0)),
                                  np.ones(7))


def test_scheme_validation_and_normalize():
    with pytest.raises(ValueError):
        WeightScheme("heavy")
    with pytest.raises(ValueError):
        WeightScheme(reweight.UPWEIGHT_HARD, -1.0)
    with pytest.raises(ValueError):
        DifficultyScores(np.array([1.5]), 0.0)
    assert reweight.normalize(np.array([1.0, 3.0])).mean() == 1.0
