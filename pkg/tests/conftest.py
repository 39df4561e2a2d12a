import numpy as np
import pytest

from dat_ctta import segnet


TINY = segnet.ModelConfig(in_channels=2, num_classes=3, base_width=4, depth=1, head_dropout_rate=0.1, seed=0)


@pytest.fixture
def tiny_model():
    return segnet.build_model(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance lines are collected here and printed in the terminal summary so
# they show up in plain ``pytest -v`` output, not only on failure.
_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(criterion: str, passed: bool | None, detail: str) -> None:
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        lines.append(f"[{status}] criterion {criterion}: {detail}")
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
