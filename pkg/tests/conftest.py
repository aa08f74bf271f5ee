import numpy as np
import pytest

from tfnas.latmodel import build_lut_synthetic
from tfnas.space import CandidateOpSpec, StageSpec, SupernetConfig


def make_tiny_config(seed: int = 0) -> SupernetConfig:
    ops = [CandidateOpSpec("k3_e2", 3, 2.0, (1.0, 2.0)),
           CandidateOpSpec("k5_e2_se", 5, 2.0, (1.5, 3.0), 0.5)]
    stages = [StageSpec(1, 4, 4, 1, 1, "relu", False, 2.0,
                        CandidateOpSpec("fixed", 3, 1.0, (1.0, 1.0), 0.25)),
              StageSpec(2, 4, 6, 2, 1, "relu", True, 2.0),
              StageSpec(3, 6, 8, 3, 1, "swish", True, 1.0)]
    return SupernetConfig(stages, ops, class_count=3, input_dim=5, seed=seed)


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def tiny_lut(tiny_config):
    return build_lut_synthetic(tiny_config, stride=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERION_LINES = []


@pytest.fixture
def report():
    """Record a criterion verdict line; the lines are repeated in the terminal summary."""
    def emit(n, ok, detail=""):
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        CRITERION_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
