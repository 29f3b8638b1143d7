import numpy as np
import pytest

from fdilab.grid import load_case, parse_matpower_case

BUNDLED = ("case14", "case30", "case39", "case57", "case118")

TWO_BUS = """\
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.1	0.9;
	2	1	50	0	0	0	1	1	0	135	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
"""


def two_bus_text(p_load=50.0, r=0.0, x=0.1):
    return TWO_BUS.replace("\t50\t", f"\t{p_load}\t").replace(
        "1\t2\t0\t0.1", f"1\t2\t{r}\t{x}")


@pytest.fixture(scope="session")
def two_bus():
    return parse_matpower_case(TWO_BUS, name="two_bus")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session", params=BUNDLED)
def bundled(request):
    return load_case(request.param)


def random_states(case, count, rng, vm=(0.9, 1.1), va=(-0.3, 0.3)):
    """Random states with the slack angle pinned at zero."""
    VM = rng.uniform(*vm, size=(count, case.n_bus))
    VA = rng.uniform(*va, size=(count, case.n_bus))
    VA[:, case.slack] = 0.0
    return VM, VA


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from shared import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")
