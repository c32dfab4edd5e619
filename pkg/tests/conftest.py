import numpy as np
import pytest

from cvppc.model import Dataset

_ACCEPTANCE = "acceptance_results"


def pytest_addoption(parser):
    parser.addoption(
        "--reference-data",
        default=None,
        help="group,value CSV of the five-group reference example (enables acceptance criterion 9)",
    )


def pytest_configure(config):
    setattr(config, _ACCEPTANCE, [])
    config.addinivalue_line("markers", "property: invariant/property-based tests")


@pytest.fixture
def record_criterion(request):
    """Record a one-line verdict for an acceptance criterion; ``passed=None`` marks a skip."""
    results = getattr(request.config, _ACCEPTANCE)

    def record(label, passed, detail=""):
        results.append((label, passed if passed is None else bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, _ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(results, key=lambda r: r[0]):
        verdict = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict}  {label}  {detail}")


@pytest.fixture
def five_groups():
    rng = np.random.default_rng(42)
    means = rng.normal(0.0, 1.0, 5)
    return Dataset.from_groups([m + rng.normal(0.0, 1.0, 8) for m in means])
