import numpy as np
import pytest

from polychain.graphs import BuildConfig, PolymerRecord

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record(pid="P1", unit="[*]CC[*]", mn=5000.0, d=2.0, m0=None, tg=300.0, unit2=None, phi=(1.0, 0.0)):
    from polychain.psmiles import from_psmiles, molar_mass

    if unit2 is None:
        m0 = m0 or molar_mass(from_psmiles(unit))
        return PolymerRecord(pid, unit, mn, mn * d, m0=m0, tg=tg)
    m1, m2 = molar_mass(from_psmiles(unit)), molar_mass(from_psmiles(unit2))
    return PolymerRecord(pid, unit, mn, mn * d, psmiles_2=unit2, phi=phi, m0_1=m1, m0_2=m2, tg=tg)


@pytest.fixture
def small_config():
    return BuildConfig(n_cups=2, dp_max=30)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def report(name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
