"""End-to-end acceptance criteria; each test prints one pass/fail line."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from barrier_synth.check import (
    Tolerances,
    full_check,
    gram_form,
    sample_region,
    simulate_continuous,
    simulate_hybrid,
    trajectory_check,
)
from barrier_synth.poly import Polynomial, compile_polynomials, lie_derivative, monomials_up_to, parse_polynomial
from barrier_synth.sdp import FEASIBLE, INFEASIBLE, NUMERICAL_FAILURE, residual_report, solve
from barrier_synth.sos import gram_lift, polynomial_program
from barrier_synth.synthesis import SUCCESS, SearchConfig, attempt, sweep_report, synthesize
from barrier_synth.system import load_system

from conftest import record_criterion
from sdp_instances import random_feasible, random_infeasible

pytestmark = pytest.mark.slow


def test_criterion_1_feasibility_pattern(ex1):
    cfg = SearchConfig(lambdas=[0, Fraction(-1, 8), Fraction(-1, 4), -1], d_min=2, d_max=10)
    table = sweep_report(ex1, cfg)
    status = {(Fraction(a.lam), a.degree): a for a in table.rows}
    assert len(status) == 36
    problems = []
    for lam in (Fraction(-1), Fraction(-1, 4), Fraction(-1, 8)):
        for d in range(2, 7):
            if status[lam, d].status != SUCCESS:
                problems.append(f"lambda={lam} d={d}: {status[lam, d].status}")
    for d in (2, 3):
        if status[Fraction(0), d].status == SUCCESS:
            problems.append(f"lambda=0 d={d}: unexpected success")
    if status[Fraction(0), 4].status != SUCCESS:
        problems.append(f"lambda=0 d=4: {status[Fraction(0), 4].status}")
    slow = [f"lambda={k[0]} d={k[1]}: {a.seconds:.1f}s" for k, a in status.items() if a.seconds > 60]
    problems += slow
    ungated = ", ".join(f"lambda={k[0]} d={k[1]}: {a.status}" for k, a in sorted(status.items()) if k[1] >= 7)
    detail = "; ".join(problems) if problems else "pattern matches"
    record_criterion(1, not problems, f"{detail} (ungated d>=7: {ungated})")
    assert not problems, detail


def test_criterion_2_quadratic_certificate(ex1, ex1_cert):
    report = full_check(ex1, ex1_cert, Tolerances(samples=100_000, seed=0))
    a_ok = all(r.coefficient_residual <= 1e-6 and r.min_eigenvalue >= -1e-7 for r in report.tier_a)
    b_ok = report.tier_b_passed and all(r.samples == 100_000 for r in report.tier_b)
    worst = max(r.coefficient_residual for r in report.tier_a)
    ok = a_ok and b_ok and ex1_cert.barriers["1"].total_degree() == 2
    record_criterion(2, ok, f"tier A max residual {worst:.2e}, tier B {'pass' if b_ok else report.failures()}")
    assert ok


def test_criterion_3_exponential_bound(ex1, ex1_cert):
    recs = trajectory_check(ex1, ex1_cert, runs=100, T=20.0, h=1e-3, seed=0, allowance=1e-2)
    ok = len(recs) == 100 and all(r.passed for r in recs) and not any(r.entered_unsafe for r in recs)
    worst = max(r.max_violation for r in recs)
    record_criterion(3, ok, f"{len(recs)} trajectories, worst gap {worst:.2e}")
    assert ok


def test_criterion_4_hybrid_example(ex2):
    t0 = time.perf_counter()
    a, cert = attempt(ex2, Fraction(-1, 5), 4, SearchConfig(gammas=1))
    elapsed = time.perf_counter() - t0
    if cert is None:
        record_criterion(4, False, f"synthesis failed: {a.status} {a.reason}")
        pytest.fail(a.reason)
    phis = {l: compile_polynomials([p.bind(ex2.vars)], ex2.vars)[0] for l, p in cert.barriers.items()}
    starts = sample_region(ex2.mode("1").init.polys, ex2.vars, np.array([[-1, 1]] * 3), 10, seed=4).points
    worst_phi, worst_jump, worst_x1, jumps, problems, diverged = -math.inf, math.inf, 0.0, 0, [], 0
    for policy in ("eager", "uniform-delay"):
        for i, x0 in enumerate(starts):
            tr = simulate_hybrid(ex2, ("1", x0), 30.0, policy=policy, seed=i)
            # finite escape in the uncontrolled mode truncates the run; the checks cover what was simulated
            diverged += tr.status == "diverged"
            if tr.status not in ("ok", "diverged"):
                problems.append(f"{policy} run {i}: {tr.status} {tr.message}")
            for s in tr.segments:
                worst_phi = max(worst_phi, float(np.max(phis[s.location](s.X))))
                if s.location == "2":
                    worst_x1 = max(worst_x1, float(np.max(np.abs(s.X[:, 0]))))
            for j in tr.jumps:
                pre = float(cert.barriers[j.source].eval(dict(zip(ex2.vars, j.pre))))
                post = float(cert.barriers[j.target].eval(dict(zip(ex2.vars, j.post))))
                worst_jump = min(worst_jump, float(cert.gammas[j.edge]) * pre - post)
                jumps += 1
    ok = (cert.report.passed and elapsed <= 600 and not problems and worst_phi <= 1e-6
          and worst_jump >= -1e-6 and worst_x1 < 3.2 and jumps > 0)
    record_criterion(4, ok, f"synthesis {elapsed:.1f}s, 20 runs, {jumps} jumps, max phi {worst_phi:.3g}, "
                            f"min jump margin {worst_jump:.3g}, max |x1| in mode 2 {worst_x1:.3g}, "
                            f"{diverged} runs truncated by finite escape in mode 1"
                            + (f"; {problems}" if problems else ""))
    assert ok


def test_criterion_5_constant_reset_regression(fig3):
    res = synthesize(fig3, SearchConfig(lambdas=[0], d_min=2, d_max=6, gammas=1))
    ok = not res.found and len(res.attempts) == 5 and all(a.status != SUCCESS for a in res.attempts)
    record_criterion(5, ok, ", ".join(f"d={a.degree}:{a.status}" for a in res.attempts))
    assert ok


def test_criterion_6_sdp_oracle_suite():
    rng = np.random.default_rng(20240601)
    bad = []
    numerical = 0
    for k in range(200):
        P, _, _ = random_feasible(rng)
        sol = solve(P)
        numerical += sol.status == NUMERICAL_FAILURE
        if sol.status != FEASIBLE:
            bad.append(f"feasible #{k}: {sol.status}")
            continue
        r = residual_report(P, sol)
        if r.equality > 1e-8 or r.min_eig < -1e-8:
            bad.append(f"feasible #{k}: residual {r.equality:.2e}, min eig {r.min_eig:.2e}")
    for k in range(200):
        sol = solve(random_infeasible(rng))
        numerical += sol.status == NUMERICAL_FAILURE
        if sol.status != INFEASIBLE:
            bad.append(f"infeasible #{k}: {sol.status}")
    ok = not bad and numerical == 0
    record_criterion(6, ok, f"400 instances, {len(bad)} wrong, {numerical} numerical failures")
    assert ok, bad[:5]


def _random_sos(rng):
    n = int(rng.integers(1, 4))
    vars = ("x1", "x2", "x3")[:n]
    p = Polynomial.zero(vars)
    for _ in range(int(rng.integers(1, 4))):
        deg = int(rng.integers(1, 4))
        monos = monomials_up_to(n, deg)
        q = Polynomial(vars, {m: Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 5)))
                              for m in monos if rng.random() < 0.6})
        p = p + q * q
    return p


def test_criterion_7_sos_suite():
    rng = np.random.default_rng(7)
    certified, inconsistent, zero = 0, 0, 0
    for k in range(100):
        p = _random_sos(rng)
        if p.is_zero():
            zero += 1
            p = Polynomial.constant(p.vars, 1)
        lifted = gram_lift(polynomial_program([p]))
        sol = solve(lifted.sdp)
        if sol.status != FEASIBLE:
            continue
        certified += 1
        block = lifted.blocks[0]
        M = lifted.gram_matrices(sol)[block.constraint]
        diff = p - gram_form(block.vars, block.basis, M)
        scale = 1 + max(abs(float(c)) for c in p.terms.values())
        tier_a = (max((abs(float(c)) for c in diff.terms.values()), default=0.0) <= 1e-6 * scale
                  and np.linalg.eigvalsh(M)[0] >= -1e-7 * scale)
        pts = rng.uniform(-10, 10, (20_000, len(p.vars)))
        (f,) = compile_polynomials([p], p.vars)
        tier_b = float(np.min(f(pts))) >= -1e-6
        inconsistent += tier_a and not tier_b
        if not tier_a:
            certified -= 1
    motzkin = parse_polynomial("x1^4*x2^2 + x1^2*x2^4 - 3*x1^2*x2^2 + 1", ("x1", "x2"))
    m_status = solve(gram_lift(polynomial_program([motzkin])).sdp).status
    ok = certified == 100 and inconsistent == 0 and m_status == INFEASIBLE
    record_criterion(7, ok, f"{certified}/100 certified, Motzkin {m_status}, {inconsistent} inconsistent")
    assert ok


def _random_poly(rng, vars, max_deg=3):
    monos = monomials_up_to(len(vars), max_deg)
    return Polynomial(vars, {m: Fraction(int(rng.integers(-20, 21)), 10) for m in monos if rng.random() < 0.5})


def test_criterion_8_numerical_kernels():
    rng = np.random.default_rng(8)
    h = 1e-6
    failures = 0
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        vars = ("x1", "x2", "x3")[:n]
        p = _random_poly(rng, vars)
        f = [_random_poly(rng, vars) for _ in vars]
        x = rng.uniform(-1, 1, n)
        pt = dict(zip(vars, x))
        fx = np.array([fi.eval(pt) for fi in f])
        fd = (p.eval(dict(zip(vars, x + h * fx))) - p.eval(pt)) / h
        exact = lie_derivative(p, f).eval(pt)
        err = abs(fd - exact) / max(1.0, abs(exact))
        worst = max(worst, err)
        failures += err > 1e-3
    osc = load_system({"vars": ["x1", "x2"], "modes": [{"id": "1", "field": ["x2", "-x1"]}]})

    def endpoint_error(steps):
        tr = simulate_continuous(osc, "1", (1.0, 0.0), 2 * math.pi, 2 * math.pi / steps)
        return float(np.linalg.norm(tr.X[-1] - [1.0, 0.0]))

    factor = endpoint_error(64) / endpoint_error(128)
    ok = failures == 0 and 12 <= factor <= 20
    record_criterion(8, ok, f"1000 Lie/FD cases, worst rel. error {worst:.2e}; RK4 order factor {factor:.2f}")
    assert ok
