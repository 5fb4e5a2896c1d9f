import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrier_synth.system import (
    EmptySetError,
    SemialgebraicSet,
    SystemFormatError,
    bundled_system_path,
    load_system,
    membership,
    render_system,
    sample,
)

from conftest import polynomials


def test_load_example_1(ex1):
    assert ex1.n == 2
    assert len(ex1.modes) == 1 and not ex1.transitions
    assert ex1.is_continuous
    m = ex1.mode("1")
    assert m.invariant.is_universe
    assert m.init.contains({"x1": 1.5, "x2": 0.5})


def test_load_example_2(ex2):
    assert ex2.n == 3
    assert len(ex2.modes) == 2 and len(ex2.transitions) == 2
    assert all(t.identity_reset for t in ex2.transitions)
    assert [t.edge for t in ex2.transitions] == ["1->2", "2->1"]
    assert ex2.mode("1").unsafe.is_empty
    assert ex2.mode("2").init.is_empty


def test_dangling_target():
    doc = json.loads(bundled_system_path("ex2").read_text())
    doc["transitions"][0]["target"] = "l3"
    with pytest.raises(SystemFormatError, match="l3"):
        load_system(doc)


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["modes"][0]["field"].pop(), "components"),
    (lambda d: d["modes"][0]["init"].append("x1 +"), "init"),
    (lambda d: d.pop("vars"), "vars"),
    (lambda d: d["modes"][0].update(colour="red"), "unknown"),
])
def test_schema_errors_carry_location(mutate, needle):
    doc = json.loads(bundled_system_path("ex1").read_text())
    mutate(doc)
    with pytest.raises(SystemFormatError, match=needle):
        load_system(doc)


def test_membership_examples(ex1, ex2):
    x0 = ex1.mode("1").init
    assert membership(x0, {"x1": 1.5, "x2": 0})
    assert not membership(x0, {"x1": 3, "x2": 0})
    u1 = ex2.mode("1").unsafe
    rng = np.random.default_rng(3)
    for p in rng.normal(scale=5, size=(20, 3)):
        assert not membership(u1, dict(zip(ex2.vars, p)))


def test_sample_initial_disc(ex1):
    s = sample(ex1.mode("1").init, [(-3, 3), (-3, 3)], 100, seed=7, order=ex1.vars)
    assert len(s) == 100
    assert np.all((s.points[:, 0] - 1.5) ** 2 + s.points[:, 1] ** 2 <= 0.25)
    again = sample(ex1.mode("1").init, [(-3, 3), (-3, 3)], 100, seed=7, order=ex1.vars)
    assert np.array_equal(s.points, again.points)
    # disc area / box area
    assert s.acceptance_rate == pytest.approx(np.pi * 0.25 / 36, rel=0.5)


def test_sample_empty_set():
    with pytest.raises(EmptySetError, match="empty"):
        sample(SemialgebraicSet.empty_set(), [(-1, 1)], 10, seed=0)


def test_sample_infeasible_inequalities_reports_empty(ex1):
    s = SemialgebraicSet((ex1.mode("1").init.polys[0] - 100,))
    with pytest.raises(EmptySetError):
        sample(s, [(-3, 3), (-3, 3)], 10, seed=0, order=ex1.vars, max_attempts=10_000)


def test_sample_guard_annulus(ex2):
    g = next(t for t in ex2.transitions if t.edge == "2->1").guard
    s = sample(g, [(-1, 1)] * 3, 50, seed=1, order=ex2.vars)
    r2 = np.sum(s.points**2, axis=1)
    assert len(s) == 50
    assert np.all((0.03 <= r2) & (r2 <= 0.05))


def test_sample_rejects_bad_input():
    with pytest.raises(ValueError):
        sample(SemialgebraicSet.universe(), [(-1, 1)], -1, seed=0)
    with pytest.raises(ValueError):
        sample(SemialgebraicSet.universe(), [(1, -1)], 5, seed=0)
    with pytest.raises(ValueError):
        sample(SemialgebraicSet.universe(), [(-np.inf, 1)], 5, seed=0)


# -- properties ---------------------------------------------------------------

X = ("x1", "x2")
poly_text = polynomials(X, max_degree=2, max_terms=3).map(lambda p: p.to_string())


@st.composite
def system_docs(draw):
    nmodes = draw(st.integers(1, 2))
    modes = []
    for i in range(nmodes):
        modes.append({
            "id": str(i + 1),
            "field": draw(st.lists(poly_text, min_size=2, max_size=2)),
            "invariant": draw(st.lists(poly_text, max_size=2)),
            "init": draw(st.lists(poly_text, max_size=2)),
            "unsafe": draw(st.lists(poly_text, max_size=2)),
        })
    transitions = []
    if nmodes == 2:
        for s, t in (("1", "2"), ("2", "1")):
            if draw(st.booleans()):
                reset = "identity" if draw(st.booleans()) else ["x1' - x1", "x2'^2 - 1/4"]
                transitions.append({"source": s, "target": t, "guard": draw(st.lists(poly_text, max_size=2)),
                                    "reset": reset})
    return {"vars": list(X), "modes": modes, "transitions": transitions}


@given(system_docs())
@settings(max_examples=60, deadline=None)
def test_render_round_trip(doc):
    H = load_system(doc)
    assert load_system(render_system(H)) == H
    assert load_system(json.dumps(render_system(H))) == H


@given(st.lists(polynomials(X, max_degree=3), min_size=1, max_size=3),
       st.lists(st.floats(-4, 4), min_size=2, max_size=2))
def test_membership_matches_direct_eval(polys, pt):
    s = SemialgebraicSet(tuple(polys))
    point = dict(zip(X, pt))
    expected = all(p.eval(point) >= 0 for p in polys)
    assert membership(s, point) == expected
    assert bool(s.mask(np.array([pt]), X)[0]) == expected
