import numpy as np
import pytest

from kochobstacle.asymptotics import default_base, default_instance
from kochobstacle.geometry import IfsParams, build_domain, regular_polygon
from kochobstacle.meshing import triangulate


@pytest.fixture(scope="session")
def ifs3():
    return IfsParams.from_alpha(3.0)


@pytest.fixture(scope="session")
def domain_n2(ifs3):
    return build_domain(default_base(), 2, ifs3)


@pytest.fixture(scope="session")
def mesh_n2(domain_n2):
    return triangulate(domain_n2, 0.05)


@pytest.fixture(scope="session")
def square_mesh():
    dom = build_domain(regular_polygon(4), 0, IfsParams.from_alpha(3.0))
    return triangulate(dom, 0.2)


@pytest.fixture(scope="session")
def default_k0():
    return default_instance(k=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion; asserts afterwards."""
    def record(number, title, ok, detail, runtime, limit):
        within = runtime < limit
        status = "PASS" if ok and within else "FAIL"
        line = f"[{status}] criterion {number}: {title} | {detail} | {runtime:.2f}s (limit {limit:g}s)"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line
        assert within, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
