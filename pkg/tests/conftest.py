import sys

import numpy as np
import pytest

from ltau import toylab


@pytest.fixture(scope="session")
def small_run():
    """A short toylab run, shared by tests that need real trajectories and descriptors."""
    spec = toylab.ToyTaskSpec(n_train=600, n_val=200, n_test=500, n_ood=200, seed=3)
    task = toylab.generate_task(spec)
    model = toylab.ToyModel(spec.input_dim, seed=spec.seed)
    result = toylab.train(model, task, epochs=30, lr=0.01, seed=spec.seed)
    return task, result


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
