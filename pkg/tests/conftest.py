from fractions import Fraction

import pytest
from hypothesis import strategies as st

from barrier_synth.poly import Polynomial
from barrier_synth.synthesis import SearchConfig, attempt
from barrier_synth.system import bundled_system_path, load_system

VARS = ("x1", "x2", "x3")

small_fractions = st.fractions(min_value=-5, max_value=5, max_denominator=7)


@st.composite
def polynomials(draw, vars=VARS[:2], max_degree=3, max_terms=5):
    n = len(vars)
    k = draw(st.integers(0, max_terms))
    terms = {}
    for _ in range(k):
        mono = tuple(draw(st.lists(st.integers(0, max_degree), min_size=n, max_size=n)))
        if sum(mono) > max_degree:
            continue
        terms[mono] = draw(small_fractions)
    return Polynomial(vars, terms)


@pytest.fixture(scope="session")
def ex1():
    return load_system(bundled_system_path("ex1"))


@pytest.fixture(scope="session")
def ex2():
    return load_system(bundled_system_path("ex2"))


@pytest.fixture(scope="session")
def fig3():
    return load_system(bundled_system_path("fig3"))


@pytest.fixture(scope="session")
def ex1_cert(ex1):
    """Quadratic certificate for Example 1 at lambda = -1."""
    a, cert = attempt(ex1, Fraction(-1), 2, SearchConfig())
    assert cert is not None, a.reason
    return cert


@pytest.fixture(scope="session")
def ex2_cert(ex2):
    a, cert = attempt(ex2, Fraction(-1, 5), 4, SearchConfig())
    assert cert is not None, a.reason
    return cert


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'} - {detail}")
