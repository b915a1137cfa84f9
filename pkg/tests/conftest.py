import numpy as np
import pytest

from mlspde.hierarchy import LevelHierarchy
from mlspde.mesh import build_simplicial_mesh, build_structured_mesh
from mlspde.sampler import MaternParams, Sampler


@pytest.fixture(scope="session")
def hier2d():
    """Three-level 2D hierarchy: unit square inside a box with margin 0.25."""
    return LevelHierarchy.from_config(build_simplicial_mesh("unit_square:2"), 0.25, 3, 2)


@pytest.fixture(scope="session")
def hier3d():
    return LevelHierarchy.from_config(build_simplicial_mesh("unit_cube:1"), 0.25, 2, 1)


@pytest.fixture(scope="session")
def darcy_hier2d():
    """Darcy-only hierarchy; the embedding is unused but required by the type."""
    return LevelHierarchy.from_config(build_simplicial_mesh("unit_square:2"), 0.0, 1, 2)


@pytest.fixture(scope="session")
def sampler2d(hier2d):
    p = MaternParams.from_correlation_length(1.0, 0.3, 2)
    return Sampler(hier2d, p, solver="hybrid", rtol=1e-12, atol=1e-14)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def unit_box(n, d=2):
    return build_structured_mesh([(0.0, 1.0)] * d, [n] * d)


# ------------------------------------------------------ acceptance report
_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else "error"
    _VERDICTS[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, verdict, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n} [{verdict}] {title}: {detail}")
