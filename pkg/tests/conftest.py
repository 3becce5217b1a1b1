import sys

import numpy as np
import pytest

from adaprune.synth import make_dataset, make_dump


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dump():
    return make_dump(np.random.default_rng(7), "s0", category=5, prompt="How many apples are on the table?")


@pytest.fixture(scope="session")
def synth_dataset():
    return make_dataset(seed=3, per_class=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
