import numpy as np
import pytest

from cidra.cellparams import example_cell, setpoint
from cidra.tfgen import electrolyte_eigenvalues


@pytest.fixture(scope="session")
def params():
    return example_cell()


@pytest.fixture(scope="session")
def sp_mid(params):
    return setpoint(params, 0.5)


@pytest.fixture(scope="session")
def eig(params):
    return electrolyte_eigenvalues(params, 10)


@pytest.fixture(scope="session")
def grid64():
    """64 frequencies spread over the band a realisation samples."""
    mag = np.logspace(-4, 1.5, 32)
    return np.concatenate([1j * mag, mag * np.exp(0.25j * np.pi)])


DESK_GRID = dict(hankel_rows=400, hankel_cols=400, tf_sample_hours=1.0, order=6)


@pytest.fixture(scope="session")
def desk_grid(params):
    """Five-SOC model grid at a desk-sized configuration."""
    from cidra.realisation import RealisationConfig, realise_grid

    return realise_grid(params, RealisationConfig(**DESK_GRID))


@pytest.fixture(scope="session")
def default_sweep(params):
    """One sensitivity sweep around the default configuration (about eight minutes, 3 GB)."""
    from types import SimpleNamespace

    from cidra.harness import sensitivity_sweep
    from cidra.realisation import RealisationConfig

    base = RealisationConfig()
    return SimpleNamespace(base=base, report=sensitivity_sweep(base, params))


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_ACCEPTANCE: dict[str, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        name = report.nodeid.split("::")[-1]
        crit = name.split("_")[2]
        detail = "; ".join(v for k, v in report.user_properties if k == "detail")
        _ACCEPTANCE.setdefault(crit, []).append((report.passed, name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE, key=int):
        runs = _ACCEPTANCE[crit]
        ok = all(p for p, _, _ in runs)
        details = " | ".join(d for _, _, d in runs if d)
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {details}")
