"""Shared fixtures and the acceptance-criterion summary printer."""
import re

import numpy as np
import pytest

from fltbench.datasets import generate_synthetic

_CRITERION_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")


@pytest.fixture(scope="session")
def balanced_ds():
    """Small balanced dataset shared by partition-level tests."""
    return generate_synthetic(10, 500, 4, 0.5, seed=1)


@pytest.fixture(scope="session")
def cifar_scale_ds():
    """Balanced stand-in at CIFAR scale: 10 classes x 5000 samples."""
    return generate_synthetic(10, 5000, 4, 0.5, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION_PATTERN.search(getattr(report, "nodeid", ""))
            if match and getattr(report, "when", "call") == "call":
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append((int(match.group(1)), match.group(2), status))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number, name, status in sorted(lines):
            terminalreporter.write_line(f"CRITERION {number:02d} {name}: {status}")
