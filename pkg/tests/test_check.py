import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from barrier_synth.check import (
    CertificateMismatch,
    GridTooLarge,
    Tolerances,
    check_exponential_bound,
    falsify,
    full_check,
    level_set,
    sample_region,
    simulate_continuous,
    simulate_hybrid,
    trajectory_check,
)
from barrier_synth.poly import Polynomial, parse_polynomial
from barrier_synth.synthesis import Certificate
from barrier_synth.system import load_system

X = ("x1", "x2")
PUBLISHED = parse_polynomial("-.86153 - .87278*x1 - 1.1358*x2 - .23944*x1^2 - .5866*x1*x2", X)


def planar(field, **mode):
    return load_system({"vars": list(X), "modes": [{"id": "1", "field": field, **mode}]})


OSC = planar(["x2", "-x1"])


def bare_certificate(H, barriers, lam, multipliers=None):
    return Certificate(H.name, tuple(H.vars), barriers, multipliers or {}, {},
                       {m.id: Fraction(lam) for m in H.modes}, {t.edge: Fraction(1) for t in H.transitions},
                       Fraction(1, 100), 2)


def corrupt(cert):
    """Flip the sign of the largest quadratic coefficient of the barrier."""
    phi = cert.barriers["1"]
    mono = max((m for m in phi.terms if sum(m) == 2), key=lambda m: abs(phi.terms[m]))
    terms = dict(phi.terms)
    terms[mono] = -terms[mono]
    return replace(cert, barriers={"1": Polynomial(phi.vars, terms)}, report=None)


# -- Tier A / Tier B -------------------------------------------------------------------


def test_synthesized_certificate_passes(ex1, ex1_cert):
    report = full_check(ex1, ex1_cert)
    assert report.passed
    assert not report.inconsistent
    assert {r.name for r in report.tier_b} == {"init[1]", "flow[1]", "unsafe[1]"}
    assert all(r.coefficient_residual <= 1e-6 for r in report.tier_a)


def test_published_certificate(ex1):
    mults = {"mu[1][0]": Polynomial.constant(X, Fraction("0.75965")),
             "eta[1][0]": Polynomial.constant(X, Fraction("0.73845"))}
    cert = bare_certificate(ex1, {"1": PUBLISHED}, -1, mults)
    report = full_check(ex1, cert, Tolerances(samples=20_000))
    assert report.tier_b_passed, report.failures()
    # five printed digits do not make the SOS identities exact; report only
    init = next(r for r in report.tier_a if r.name == "init[1]")
    assert init.coefficient_residual > 1e-6


def test_constant_one_fails_on_initial_set(ex1):
    cert = bare_certificate(ex1, {"1": Polynomial.constant(X, 1)}, -1)
    report = full_check(ex1, cert, Tolerances(samples=2000), tiers="B")
    bad = {r.name: r for r in report.tier_b if not r.passed}
    assert "init[1]" in bad
    w = bad["init[1]"].witness
    assert (w[0] - 1.5) ** 2 + w[1] ** 2 <= 0.25 + 1e-12


def test_falsify(ex1, ex1_cert):
    assert falsify(ex1, ex1_cert, samples=20_000) == []
    assert falsify(ex1, corrupt(ex1_cert), samples=20_000)


def test_wrong_system_is_a_mismatch(ex2, ex1_cert):
    with pytest.raises(CertificateMismatch, match="variables"):
        full_check(ex2, ex1_cert)


def test_tier_a_catches_gram_tampering(ex1, ex1_cert):
    grams = dict(ex1_cert.grams)
    g = grams["flow[1]"]
    M = g.matrix.copy()
    M[0, 0] += 1e-3
    grams["flow[1]"] = replace(g, matrix=M)
    report = full_check(ex1, replace(ex1_cert, grams=grams, report=None), tiers="A")
    bad = [r.name for r in report.tier_a if not r.passed]
    assert bad == ["flow[1]"]


def test_sampler_covers_thin_annulus_uniformly():
    r2 = parse_polynomial("x1^2 + x2^2", X)
    shell = (r2 - Fraction(99, 100), Fraction(101, 100) - r2)
    pts = sample_region(shell, X, np.array([[-10, 10], [-10, 10]]), 4000, seed=2)
    assert len(pts) == 4000
    rr = np.sum(pts.points**2, axis=1)
    assert np.all((rr >= 0.99 - 1e-12) & (rr <= 1.01 + 1e-12))
    angle = (np.arctan2(pts.points[:, 1], pts.points[:, 0]) + np.pi) / (2 * np.pi)
    assert stats.kstest(angle, "uniform").pvalue > 1e-3


def test_sampler_measure_zero_region():
    line = (parse_polynomial("x1 - x2", X), parse_polynomial("x2 - x1", X))
    pts = sample_region(line, X, np.array([[-1, 1], [-1, 1]]), 200, seed=0)
    assert len(pts) > 0
    assert np.max(np.abs(pts.points[:, 0] - pts.points[:, 1])) <= 1e-6


# -- continuous simulation ----------------------------------------------------------


def test_harmonic_oscillator_closes():
    tr = simulate_continuous(OSC, "1", (1.0, 0.0), 2 * math.pi, 1e-3)
    assert tr.t[-1] == pytest.approx(2 * math.pi)
    assert np.linalg.norm(tr.X[-1] - [1.0, 0.0]) <= 1e-4


def _oscillator_error(h):
    tr = simulate_continuous(OSC, "1", (1.0, 0.0), 2 * math.pi, h)
    return np.linalg.norm(tr.X[-1] - [1.0, 0.0])


def test_rk4_order():
    # T / h must be an integer for both step sizes; 2 pi / 0.1 is not, so use the grid the integrator picks
    ratio = _oscillator_error(2 * math.pi / 64) / _oscillator_error(2 * math.pi / 128)
    assert 12 <= ratio <= 20


def test_zero_field_is_constant():
    H = planar(["0", "0"])
    tr = simulate_continuous(H, "1", (0.3, -2.0), 1.0, 0.01)
    assert np.all(tr.X == [0.3, -2.0])


def test_example_1_trajectory_avoids_unsafe(ex1):
    tr = simulate_continuous(ex1, "1", (1.5, 0.0), 20.0, 1e-3)
    assert not tr.diverged
    assert not ex1.mode("1").unsafe.mask(tr.X, ex1.vars).any()


def test_divergence_flagged():
    H = planar(["x1^2", "0"])
    tr = simulate_continuous(H, "1", (1.0, 0.0), 2.0, 1e-3)
    assert tr.diverged and tr.t[-1] <= 1.0 + 1e-9  # blow-up time is exactly 1


def test_convex_rate_bound_is_monotonicity():
    energy = parse_polynomial("x1^2 + x2^2", X)
    tr = simulate_continuous(OSC, "1", (1.0, 0.5), 10.0, 1e-2)
    gap, _, ok = check_exponential_bound(energy, tr, 0)
    vals = tr.X[:, 0] ** 2 + tr.X[:, 1] ** 2
    assert gap == pytest.approx(np.max(vals - vals[0]))
    assert ok
    grow = simulate_continuous(planar(["x1", "0"]), "1", (1.0, 0.0), 1.0, 1e-2)
    gap, when, ok = check_exponential_bound(energy, grow, 0)
    assert not ok and gap > 1 and when == pytest.approx(1.0)


def test_trajectory_bound_holds(ex1, ex1_cert):
    recs = trajectory_check(ex1, ex1_cert, runs=10, T=5.0, h=1e-3, allowance=1e-2)
    assert len(recs) == 10
    assert all(r.passed and not r.entered_unsafe for r in recs)


def test_corrupted_certificate_breaks_bound(ex1, ex1_cert):
    recs = trajectory_check(ex1, corrupt(ex1_cert), runs=10, T=5.0, h=1e-3, allowance=1e-2)
    bad = [r for r in recs if not r.passed]
    assert bad
    assert all(r.max_violation > 1e-2 and r.witness_time > 0 for r in bad)


# -- hybrid simulation --------------------------------------------------------------


def _guard_holds(H, edge, x, tol=1e-6):
    t = next(t for t in H.transitions if t.edge == edge)
    return t.guard.contains(dict(zip(H.vars, x)), tol)


@pytest.mark.parametrize("policy", ["eager", "uniform-delay"])
def test_example_2_alternates(ex2, policy):
    tr = simulate_hybrid(ex2, ("1", (0.05, 0, 0)), 30.0, policy=policy, seed=0)
    assert tr.status == "ok"
    locs = [s.location for s in tr.segments]
    assert len(locs) >= 3
    assert locs == [("1", "2")[i % 2] for i in range(len(locs))]
    for j in tr.jumps:
        assert _guard_holds(ex2, j.edge, j.pre)
        assert j.pre == j.post


def test_short_horizon_single_segment(ex2):
    tr = simulate_hybrid(ex2, ("1", (0.05, 0, 0)), 0.5)
    assert len(tr.segments) == 1 and not tr.jumps
    assert tr.segments[0].t[-1] == pytest.approx(0.5)


def test_blocked_by_invariant():
    H = planar(["1", "0"], invariant=["1 - x1"])
    tr = simulate_hybrid(H, ("1", (0, 0)), 5.0, h=1e-2)
    assert tr.status == "blocked"
    assert tr.segments[-1].X[-1][0] <= 1 + 1e-9


def test_jump_cap():
    H = load_system({"vars": list(X), "modes": [
        {"id": "a", "field": ["x2", "-x1"]}, {"id": "b", "field": ["x2", "-x1"]}],
        "transitions": [{"source": "a", "target": "b", "guard": ["x1 - 0.9"]},
                        {"source": "b", "target": "a", "guard": ["x2 - 0.9"]}]})
    tr = simulate_hybrid(H, ("a", (0, 1)), 100.0, h=1e-2, max_jumps=5)
    assert tr.status == "jump-cap" and len(tr.jumps) == 5


def test_general_reset_lands_in_reset_set(fig3):
    tr = simulate_hybrid(fig3, ("1", (0.05,)), 5.0, h=1e-3)
    back = [j for j in tr.jumps if j.edge == "2->1"]
    assert back and all(abs(j.post[0]) <= 1e-6 for j in back)
    forward = [j for j in tr.jumps if j.edge == "1->2"]
    assert all(1 - 1e-9 <= j.pre[0] <= 1.2 for j in forward)


def test_jumps_preserve_barrier_sign(ex2, ex2_cert):
    tr = simulate_hybrid(ex2, ("1", (0.05, 0, 0)), 30.0)
    phi = ex2_cert.barriers
    for j in tr.jumps:
        pre = phi[j.source].eval(dict(zip(ex2.vars, j.pre)))
        post = phi[j.target].eval(dict(zip(ex2.vars, j.post)))
        assert float(ex2_cert.gammas[j.edge]) * pre - post >= -1e-6
    for s in tr.segments:
        vals = [phi[s.location].eval(dict(zip(ex2.vars, x))) for x in s.X[::50]]
        assert max(vals) <= 1e-6


# -- level sets ---------------------------------------------------------------------


def test_level_set_separates_initial_and_unsafe(ex1, ex1_cert):
    phi = ex1_cert.barriers["1"]
    ls = level_set(phi, X, "x1", "x2", (-4, 4), (-4, 4), 400, 400)
    assert ls.values.shape == (400, 400)
    assert ls.contours
    GX, GY = np.meshgrid(ls.xs, ls.ys)
    grid = np.column_stack([GX.ravel(), GY.ravel()])
    v = ls.values.ravel()
    assert np.all(v[ex1.mode("1").init.mask(grid, X)] < 0)
    assert np.all(v[ex1.mode("1").unsafe.mask(grid, X)] > 0)
    pts = np.vstack(ls.contours)
    assert not ex1.mode("1").init.mask(pts, X).any()
    assert not ex1.mode("1").unsafe.mask(pts, X).any()
    # contour points sit on the zero level up to grid interpolation
    vals = np.array([phi.eval(dict(zip(X, p))) for p in pts[::20]])
    spacing = 8 / 399
    assert np.max(np.abs(vals)) <= 50 * spacing


def test_level_set_constant_has_no_contour():
    ls = level_set(Polynomial.constant(X, 1), X, "x1", "x2", (-1, 1), (-1, 1), 50, 50)
    assert ls.contours == []


def test_level_set_slice_stays_off_unsafe_band(ex2, ex2_cert):
    ls = level_set(ex2_cert.barriers["2"], ex2.vars, "x1", "x2", (-10, 10), (-10, 10), 400, 400,
                   fixed={"x3": 0})
    spacing = 20 / 399
    for c in ls.contours:
        assert np.all(np.abs(c[:, 0]) < 3.2 + spacing)


def test_level_set_limits():
    with pytest.raises(GridTooLarge):
        level_set(PUBLISHED, X, "x1", "x2", (-1, 1), (-1, 1), 2000, 2000)
    with pytest.raises(ValueError, match="x3"):
        level_set(PUBLISHED, ("x1", "x2", "x3"), "x1", "x2", (-1, 1), (-1, 1), 10, 10)
