import numpy as np
import pytest

from polyfutures.models import REFERENCE_COORDS, reference_params
from polyfutures.simulation import SimulationConfig, simulate_panel


def reference_panel(n_contracts: int, seed: int = 1, n_obs: int = 1000):
    config = SimulationConfig(
        n_obs=n_obs,
        tenors_months=np.arange(1, n_contracts + 1),
        params=reference_params(n_contracts),
        coords=REFERENCE_COORDS,
        seed=seed,
    )
    return simulate_panel(config)


@pytest.fixture(scope="session")
def panel13():
    return reference_panel(13)


@pytest.fixture(scope="session")
def panel20():
    return reference_panel(20)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# Nelder-Mead needs far more than the default 5000 evaluations to settle in 23 to 30 dimensions
LONG_BUDGET = 20_000


def long_fit(regime: str, panel, filter_kind: str = "EKF"):
    from polyfutures.estimation import EstimationConfig, fit
    from polyfutures.simulation import Model

    config = EstimationConfig(
        regime=regime,
        filter=filter_kind,
        model=Model.PD,
        params=reference_params(panel.n_contracts),
        coords=REFERENCE_COORDS,
        max_evals=LONG_BUDGET,
    )
    return fit(config, panel)


@pytest.fixture(scope="session")
def case3_fit13(panel13):
    return long_fit("case3", panel13)


@pytest.fixture(scope="session")
def case3_fit20(panel20):
    return long_fit("case3", panel20)


_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1].split("[")[0]
    if report.when == "call" or report.outcome != "passed":
        if _ACCEPTANCE.get(name) not in ("FAIL", "ERROR"):
            _ACCEPTANCE[name] = (
                "PASS" if report.passed else "SKIP" if report.skipped else "FAIL" if report.when == "call" else "ERROR"
            )


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance")
    for name, outcome in sorted(_ACCEPTANCE.items()):
        label = name.removeprefix("test_").replace("_", " ")
        terminalreporter.write_line(f"{label:<60}{outcome}")
