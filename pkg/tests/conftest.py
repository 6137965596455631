import numpy as np
import pytest

from softneg.encoders import init_model
from softneg.loss import build_batch
from softneg.reports import CorpusSpec, generate_corpus

_CRITERION_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERION_LINES] = []


@pytest.fixture
def criterion_report(request):
    """Record one PASS/FAIL line per acceptance criterion; the lines are
    echoed after the run summary, outside pytest's output capture."""
    lines = request.config.stash[_CRITERION_LINES]

    def record(criterion: int, ok: bool, detail: str) -> None:
        status = "PASS" if ok else "FAIL"
        lines.append(f"[criterion {criterion}] {status} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERION_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusSpec(n_reports=300, seed=1))


@pytest.fixture(scope="session")
def desk_params():
    return init_model(0)


@pytest.fixture(scope="session")
def small_batch(small_corpus, desk_params):
    return build_batch(small_corpus[:16], desk_params, hardneg_rate=0.5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
