import numpy as np
import pytest

from carformer import kernels
from carformer.data.synth import generate_dataset
from carformer.data.vocab import Vocab


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(400, seed=7)


@pytest.fixture(scope="session")
def vocab(small_data):
    return Vocab.from_world(small_data.world)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -----------------------------------------------------------

_CRITERIA: dict[str, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    label = marker.args[0]
    entry = _CRITERIA.setdefault(label, {"title": marker.args[1], "passed": True, "details": []})
    entry["passed"] &= call.excinfo is None
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: (int(s.rstrip("abc")), s)):
        e = _CRITERIA[label]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(
            f"criterion {label:<3} {'PASS' if e['passed'] else 'FAIL'}  {e['title']}" + (f"  [{detail}]" if detail else ""))
