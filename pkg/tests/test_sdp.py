import numpy as np
import pytest

from barrier_synth.sdp import (
    FEASIBLE,
    INFEASIBLE,
    SdpBuilder,
    SdpProblem,
    read_dump,
    residual_report,
    solve,
)
from barrier_synth.sos import build_program, gram_lift

from sdp_instances import random_feasible, random_infeasible


def farkas_ok(problem: SdpProblem, y: np.ndarray, tol: float = 1e-7) -> bool:
    """Independent check of an infeasibility ray: A_u^T y = 0, A_X^T y PSD, b.y < 0."""
    y = np.asarray(y, dtype=float)
    if float(problem.b @ y) >= 0:
        return False
    scale = max(1.0, float(np.max(np.abs(y))))
    if problem.n_free and np.max(np.abs(problem.dense_free().T @ y)) > tol * scale:
        return False
    for j in range(problem.n_blocks):
        rows, A = problem.dense_block(j)
        S = np.einsum("k,kab->ab", y[rows], A) if len(rows) else np.zeros((problem.block_dims[j],) * 2)
        if np.linalg.eigvalsh(S)[0] < -tol * scale:
            return False
    return True


def one_by_one(rhs):
    B = SdpBuilder()
    B.add_block(1)
    r = B.add_row(rhs)
    B.block_coef(r, 0, 0, 0, 1.0)
    return B.build()


def test_scalar_feasible():
    sol = solve(one_by_one(3.0))
    assert sol.status == FEASIBLE
    assert sol.X[0][0, 0] == pytest.approx(3.0, abs=1e-8)


def test_scalar_infeasible_with_ray():
    P = one_by_one(-1.0)
    sol = solve(P)
    assert sol.status == INFEASIBLE
    assert farkas_ok(P, sol.dual_ray)


def test_two_by_two_against_grid():
    B = SdpBuilder()
    B.add_block(2)
    r = B.add_row(2.0)
    B.block_coef(r, 0, 0, 0, 1.0)
    B.block_coef(r, 0, 1, 1, 1.0)
    r = B.add_row(0.9)
    B.block_coef(r, 0, 0, 1, 0.5)  # contributes 2 * 0.5 * X12
    P = B.build()
    sol = solve(P)
    assert sol.status == FEASIBLE
    X = sol.X[0]
    assert X[0, 1] == pytest.approx(0.9, abs=1e-7)
    assert np.trace(X) == pytest.approx(2.0, abs=1e-7)
    assert np.linalg.eigvalsh(X)[0] >= -1e-8
    # oracle: grid over the diagonal; PSD iff both diagonals >= 0 and det >= 0
    g = np.linspace(0, 2, 401)
    a, d = np.meshgrid(g, g)
    ok = (np.abs(a + d - 2) < 1e-9) & (a * d - 0.81 >= 0)
    assert ok.any()
    assert a[ok].min() == pytest.approx(1 - np.sqrt(0.19), abs=0.01)


def test_residuals_on_example_program(ex1):
    lifted = gram_lift(build_program(ex1, -1, degrees=2))
    sol = solve(lifted.sdp)
    assert sol.status == FEASIBLE
    res = residual_report(lifted.sdp, sol)
    assert res.equality <= 1e-8
    assert res.min_eig >= -1e-8

    X = [np.array(x) for x in sol.X]
    j = lifted.blocks[0].block
    X[j][0, 0] += 1e-3
    bumped = residual_report(lifted.sdp, (sol.u, X))
    assert bumped.equality_abs >= 1e-4


def test_zero_problem_identity():
    P = SdpProblem(block_dims=[3], n_free=0, b=np.zeros(0))
    res = residual_report(P, (None, [np.eye(3)]))
    assert res.min_eig == pytest.approx(1.0)
    assert res.equality == 0.0
    assert solve(P).status == FEASIBLE


def test_deterministic():
    P, _, _ = random_feasible(np.random.default_rng(11))
    a, b = solve(P, seed=4), solve(P, seed=4)
    assert (a.status, a.iterations) == (b.status, b.iterations)
    assert all(np.array_equal(x, y) for x, y in zip(a.X, b.X))
    assert np.array_equal(a.u, b.u)


def test_dump_round_trip(tmp_path, ex1):
    P = gram_lift(build_program(ex1, -1, degrees=2)).sdp
    path = tmp_path / "p.txt"
    P.dump(path)
    Q = read_dump(path)
    assert Q.block_dims == P.block_dims and Q.n_free == P.n_free
    assert np.array_equal(Q.b, P.b)
    a, b = solve(P), solve(Q)
    assert (a.status, a.iterations) == (b.status, b.iterations)


@pytest.mark.parametrize("seed", range(10))
def test_random_feasible(seed):
    P, _, _ = random_feasible(np.random.default_rng(1000 + seed))
    sol = solve(P)
    assert sol.status == FEASIBLE, sol.message
    res = residual_report(P, sol)
    assert res.equality <= 1e-8 and res.min_eig >= -1e-8


@pytest.mark.parametrize("seed", range(10))
def test_random_infeasible(seed):
    P = random_infeasible(np.random.default_rng(2000 + seed))
    sol = solve(P)
    assert sol.status == INFEASIBLE, sol.message
    assert farkas_ok(P, sol.dual_ray)
