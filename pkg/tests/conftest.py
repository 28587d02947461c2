import numpy as np
import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line; the terminal summary prints them all."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


class StudyRun:
    def __init__(self, report, path, seconds):
        self.report, self.path, self.seconds = report, path, seconds


def _run_preset(tmp_path_factory, study, threads=1, **overrides):
    import time

    from eigstab.cli import run_config
    from eigstab.config import config_from_mapping

    cfg = config_from_mapping({"study": study, "threads": threads, **overrides})
    out = tmp_path_factory.mktemp(f"{study}_t{threads}")
    start = time.perf_counter()
    report = run_config(cfg, out)
    return StudyRun(report, out, time.perf_counter() - start)


@pytest.fixture(scope="session")
def plx_run(tmp_path_factory):
    return _run_preset(tmp_path_factory, "analytic_plx")


@pytest.fixture(scope="session")
def sparse_run(tmp_path_factory):
    return _run_preset(tmp_path_factory, "analytic_sparse")


@pytest.fixture(scope="session")
def heat_run(tmp_path_factory):
    return _run_preset(tmp_path_factory, "heat_pce")


@pytest.fixture(scope="session")
def example1_run(tmp_path_factory):
    return _run_preset(tmp_path_factory, "example1_scalar")
