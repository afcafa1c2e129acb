import numpy as np
import pytest

from dynmatch.env import ProblemInstance
from dynmatch.harness import tiny_instance


def example_pmfs():
    """Demand pmfs of the three-period worked example."""
    return (
        np.array([0.2, 0.2, 0.2, 0.2, 0.2, 0, 0, 0, 0]),
        np.array([0.2, 0, 0.2, 0.2, 0.2, 0, 0, 0, 0.2]),
    )


def example_instance(**kw) -> ProblemInstance:
    args = dict(
        capacities=np.array([6, 5]),
        demand_pmfs=example_pmfs(),
        reward=np.array([[10.0, 7.0], [5.0, 8.0]]),
        gamma=0.9,
        horizon_T=3,
    )
    args.update(kw)
    return ProblemInstance(**args)


@pytest.fixture(scope="session")
def worked():
    return example_instance()


@pytest.fixture(scope="session")
def tiny():
    return tiny_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def record_criterion(config, number: int, passed: bool, detail: str) -> None:
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    lines = config.__dict__.setdefault("_acceptance_lines", {})
    lines[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
