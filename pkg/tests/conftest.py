import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dnflex.analysis import build_scenario  # noqa: E402
from dnflex.network import builtin_test_feeder  # noqa: E402
from dnflex.powerflow import simulate_horizon  # noqa: E402
from dnflex.sensitivity import estimate_nvs  # noqa: E402


@pytest.fixture(scope="session")
def feeder():
    return builtin_test_feeder()


@pytest.fixture(scope="session")
def nominal_states(feeder):
    net, prof = feeder
    return simulate_horizon(net, prof)


@pytest.fixture(scope="session")
def sens(feeder):
    return estimate_nvs(feeder[0], U=100)


@pytest.fixture(scope="session")
def scenario(feeder, sens):
    net, prof = feeder
    return build_scenario(net, prof, sens=sens)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
