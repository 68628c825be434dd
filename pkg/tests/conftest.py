import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qmarkov.lattice import Kind, LatticeSpec, build_lattice

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

_ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[2:])):
        terminalreporter.write_line(_ACCEPTANCE[key])


@pytest.fixture
def record_ac():
    def record(ac: str, passed: bool, detail: str):
        line = f"{ac} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE[ac] = line
        print(line)

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tensor3():
    return build_lattice(LatticeSpec(Kind.TENSOR, (2,), 3))


@pytest.fixture(scope="session")
def fermi3():
    return build_lattice(LatticeSpec(Kind.FERMI, (1,), 3))


@pytest.fixture(scope="session")
def tensor4():
    return build_lattice(LatticeSpec(Kind.TENSOR, (2,), 4))


@pytest.fixture(scope="session")
def fermi4():
    return build_lattice(LatticeSpec(Kind.FERMI, (1,), 4))
