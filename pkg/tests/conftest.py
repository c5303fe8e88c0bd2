import pytest

from kamscar.hamiltonian import builtin_flat_torus

ACCEPTANCE_LINES = {}


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    mp.setenv("KAMSCAR_CACHE_DIR", str(tmp_path_factory.mktemp("eigcache")))
    yield
    mp.undo()


@pytest.fixture(scope="session")
def H():
    return builtin_flat_torus()


@pytest.fixture
def record():
    """record(n, passed, detail): one summary line per acceptance criterion."""

    def _record(n, passed, detail):
        ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[n])

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
