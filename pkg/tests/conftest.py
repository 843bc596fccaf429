import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "game value equals backward induction",
    2: "Skorokhod and mutual singularity residuals",
    3: "contraction threshold and fixed-point decay",
    4: "saddle points",
    5: "mean-field ODE oracle",
    6: "exchangeability",
    7: "decoupling",
    8: "propagation-of-chaos trend",
    9: "stability and K-bound estimates",
    10: "Wasserstein kernel",
    11: "joint-tree oracle agreement",
}
RESULTS: dict = {}
DETAILS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        k = marker.args[0]
        RESULTS[k] = RESULTS.get(k, True) and rep.passed


@pytest.fixture
def detail(request):
    """Append a measured quantity to the acceptance line of the test's criterion."""
    k = request.node.get_closest_marker("criterion").args[0]
    return lambda text: DETAILS.setdefault(k, []).append(text)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k, name in CRITERIA.items():
        if k not in RESULTS:
            continue
        status = "PASS" if RESULTS[k] else "FAIL"
        info = "; ".join(DETAILS.get(k, []))
        terminalreporter.write_line(f"ACCEPTANCE {k:2d} {status}  {name}" + (f"  [{info}]" if info else ""))
