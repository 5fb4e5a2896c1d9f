"""Block-diagonal semidefinite feasibility problems and an interior-point solver.

Problem form::

    find / minimize   c_u . u + sum_j <C_j, X_j>
    subject to        A_u u + sum_j A_j(X_j) = b
                      X_j positive semidefinite,  u free

Each equality row ``k`` carries sparse coefficients on the free variables and
on the entries of the blocks.  A block entry ``(k, i, j, v)`` with ``i <= j``
means the symmetric coefficient matrix of row ``k`` has ``A[i, j] = A[j, i] = v``,
so an off-diagonal entry contributes ``2 v X[i, j]`` to the row.

The solver is a homogeneous self-dual embedding with Nesterov-Todd scaling
and a Mehrotra predictor-corrector step.  Free variables stay free: they enter
the Newton system through a saddle-point block next to the Schur complement.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"


# -- problem data ----------------------------------------------------------------


@dataclass
class SdpProblem:
    block_dims: list[int]
    n_free: int
    b: np.ndarray
    free_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    free_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    free_vals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # one (rows, i, j, vals) tuple of arrays per block, i <= j
    block_entries: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    c_free: np.ndarray | None = None
    # one (i, j, vals) tuple per block or None
    c_blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray] | None] | None = None
    row_tags: list[str] | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.block_dims = [int(d) for d in self.block_dims]
        if not self.block_entries:
            empty = (np.zeros(0, dtype=int),) * 3 + (np.zeros(0),)
            self.block_entries = [empty for _ in self.block_dims]
        if len(self.block_entries) != len(self.block_dims):
            raise ValueError("one entry list per block is required")
        if self.c_free is None:
            self.c_free = np.zeros(self.n_free)
        if self.c_blocks is None:
            self.c_blocks = [None] * len(self.block_dims)
        m = self.m
        if len(self.free_rows) and (self.free_rows.max() >= m or self.free_cols.max() >= self.n_free):
            raise ValueError("free-variable entry out of range")
        for d, (rows, ii, jj, _) in zip(self.block_dims, self.block_entries):
            if len(rows) and (rows.max() >= m or max(ii.max(), jj.max()) >= d):
                raise ValueError("block entry out of range")
            if len(rows) and np.any(ii > jj):
                raise ValueError("block entries must have i <= j")

    @property
    def m(self) -> int:
        return len(self.b)

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    # dense views ---------------------------------------------------------------

    def dense_free(self) -> np.ndarray:
        A = np.zeros((self.m, self.n_free))
        np.add.at(A, (self.free_rows, self.free_cols), self.free_vals)
        return A

    def dense_block(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Rows touching block ``j`` and their symmetric coefficient matrices."""
        rows, ii, jj, vals = self.block_entries[j]
        n = self.block_dims[j]
        uniq, local = np.unique(rows, return_inverse=True)
        A = np.zeros((len(uniq), n, n))
        np.add.at(A, (local, ii, jj), vals)
        off = ii != jj
        np.add.at(A, (local[off], jj[off], ii[off]), vals[off])
        return uniq, A

    def dense_objective(self, j: int) -> np.ndarray:
        n = self.block_dims[j]
        C = np.zeros((n, n))
        cb = self.c_blocks[j]
        if cb is not None:
            ii, jj, vals = cb
            np.add.at(C, (ii, jj), vals)
            off = ii != jj
            np.add.at(C, (jj[off], ii[off]), vals[off])
        return C

    # residuals --------------------------------------------------------------

    def apply(self, u: np.ndarray, X: Sequence[np.ndarray]) -> np.ndarray:
        """``A_u u + sum_j A_j(X_j)``."""
        out = np.zeros(self.m)
        if self.n_free:
            np.add.at(out, self.free_rows, self.free_vals * np.asarray(u)[self.free_cols])
        for (rows, ii, jj, vals), Xj in zip(self.block_entries, X):
            w = np.where(ii == jj, 1.0, 2.0)
            np.add.at(out, rows, w * vals * np.asarray(Xj)[ii, jj])
        return out

    def objective(self, u: np.ndarray, X: Sequence[np.ndarray]) -> float:
        val = float(np.dot(self.c_free, u)) if self.n_free else 0.0
        for j, Xj in enumerate(X):
            if self.c_blocks[j] is not None:
                val += float(np.sum(self.dense_objective(j) * Xj))
        return val

    # text dump ---------------------------------------------------------------

    def dump(self, path: str | Path | None = None) -> str:
        """Sparse text form; see :func:`read_dump` for the grammar."""
        lines = [
            "# sparse SDP: minimize c.x  s.t.  A x = b, blocks PSD, free vars unrestricted",
            "# A/c block lines use i <= j and mean a symmetric coefficient pair",
            f"blocks {self.n_blocks} " + " ".join(str(d) for d in self.block_dims),
            f"free {self.n_free}",
            f"equalities {self.m}",
        ]
        for k, v in enumerate(self.b):
            if v:
                lines.append(f"b {k} {float(v)!r}")
        for r, c, v in zip(self.free_rows, self.free_cols, self.free_vals):
            lines.append(f"A {r} free {c} {float(v)!r}")
        for j, (rows, ii, jj, vals) in enumerate(self.block_entries):
            for r, i, jx, v in zip(rows, ii, jj, vals):
                lines.append(f"A {r} {j} {i} {jx} {float(v)!r}")
        for c, v in enumerate(self.c_free):
            if v:
                lines.append(f"c free {c} {float(v)!r}")
        for j, cb in enumerate(self.c_blocks):
            if cb is not None:
                for i, jx, v in zip(*cb):
                    lines.append(f"c {j} {i} {jx} {float(v)!r}")
        if self.row_tags:
            for k, tag in enumerate(self.row_tags):
                lines.append(f"tag {k} {tag}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def read_dump(source: str | Path) -> SdpProblem:
    """Parse the text written by :meth:`SdpProblem.dump` (a path or the text itself)."""
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    dims: list[int] = []
    n_free = 0
    m = 0
    b: dict[int, float] = {}
    fr, fc, fv = [], [], []
    blk: dict[int, list[tuple[int, int, int, float]]] = {}
    cf: dict[int, float] = {}
    cb: dict[int, list[tuple[int, int, float]]] = {}
    tags: dict[int, str] = {}
    for lineno, raw in enumerate(str(text).splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            key = parts[0]
            if key == "blocks":
                dims = [int(x) for x in parts[2:]]
                if len(dims) != int(parts[1]):
                    raise ValueError("block count mismatch")
            elif key == "free":
                n_free = int(parts[1])
            elif key == "equalities":
                m = int(parts[1])
            elif key == "b":
                b[int(parts[1])] = float(parts[2])
            elif key == "A" and parts[2] == "free":
                fr.append(int(parts[1]))
                fc.append(int(parts[3]))
                fv.append(float(parts[4]))
            elif key == "A":
                blk.setdefault(int(parts[2]), []).append(
                    (int(parts[1]), int(parts[3]), int(parts[4]), float(parts[5]))
                )
            elif key == "c" and parts[1] == "free":
                cf[int(parts[2])] = float(parts[3])
            elif key == "c":
                cb.setdefault(int(parts[1]), []).append((int(parts[2]), int(parts[3]), float(parts[4])))
            elif key == "tag":
                tags[int(parts[1])] = " ".join(parts[2:])
            else:
                raise ValueError(f"unknown record {key!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}: {raw!r}") from None
    bvec = np.zeros(m)
    for k, v in b.items():
        bvec[k] = v
    entries = []
    for j in range(len(dims)):
        e = blk.get(j, [])
        entries.append(
            (
                np.array([x[0] for x in e], dtype=int),
                np.array([x[1] for x in e], dtype=int),
                np.array([x[2] for x in e], dtype=int),
                np.array([x[3] for x in e], dtype=float),
            )
        )
    c_free = np.zeros(n_free)
    for k, v in cf.items():
        c_free[k] = v
    c_blocks = []
    for j in range(len(dims)):
        e = cb.get(j)
        c_blocks.append(
            None
            if not e
            else (
                np.array([x[0] for x in e], dtype=int),
                np.array([x[1] for x in e], dtype=int),
                np.array([x[2] for x in e], dtype=float),
            )
        )
    return SdpProblem(
        block_dims=dims,
        n_free=n_free,
        b=bvec,
        free_rows=np.array(fr, dtype=int),
        free_cols=np.array(fc, dtype=int),
        free_vals=np.array(fv, dtype=float),
        block_entries=entries,
        c_free=c_free,
        c_blocks=c_blocks,
        row_tags=[tags.get(k, "") for k in range(m)] if tags else None,
    )


class SdpBuilder:
    """Incremental construction of an :class:`SdpProblem`."""

    def __init__(self):
        self.block_dims: list[int] = []
        self.n_free = 0
        self.b: list[float] = []
        self.tags: list[str] = []
        self._free: list[tuple[int, int, float]] = []
        self._blk: list[list[tuple[int, int, int, float]]] = []
        self._c_free: dict[int, float] = {}
        self._c_blk: dict[int, list[tuple[int, int, float]]] = {}

    def add_block(self, dim: int) -> int:
        self.block_dims.append(int(dim))
        self._blk.append([])
        return len(self.block_dims) - 1

    def add_free(self, count: int = 1) -> int:
        start = self.n_free
        self.n_free += count
        return start

    def add_row(self, rhs: float, tag: str = "") -> int:
        self.b.append(float(rhs))
        self.tags.append(tag)
        return len(self.b) - 1

    def free_coef(self, row: int, col: int, val: float):
        if val:
            self._free.append((row, col, float(val)))

    def block_coef(self, row: int, block: int, i: int, j: int, val: float):
        if i > j:
            i, j = j, i
        if val:
            self._blk[block].append((row, i, j, float(val)))

    def objective_free(self, col: int, val: float):
        self._c_free[col] = self._c_free.get(col, 0.0) + float(val)

    def objective_block(self, block: int, i: int, j: int, val: float):
        self._c_blk.setdefault(block, []).append((min(i, j), max(i, j), float(val)))

    def build(self) -> SdpProblem:
        entries = []
        for e in self._blk:
            entries.append(
                (
                    np.array([x[0] for x in e], dtype=int),
                    np.array([x[1] for x in e], dtype=int),
                    np.array([x[2] for x in e], dtype=int),
                    np.array([x[3] for x in e], dtype=float),
                )
            )
        c_free = np.zeros(self.n_free)
        for k, v in self._c_free.items():
            c_free[k] = v
        c_blocks = []
        for j in range(len(self.block_dims)):
            e = self._c_blk.get(j)
            c_blocks.append(
                None
                if not e
                else tuple(np.array([x[k] for x in e], dtype=int if k < 2 else float) for k in range(3))
            )
        return SdpProblem(
            block_dims=list(self.block_dims),
            n_free=self.n_free,
            b=np.array(self.b),
            free_rows=np.array([x[0] for x in self._free], dtype=int),
            free_cols=np.array([x[1] for x in self._free], dtype=int),
            free_vals=np.array([x[2] for x in self._free], dtype=float),
            block_entries=entries,
            c_free=c_free,
            c_blocks=c_blocks,
            row_tags=list(self.tags),
        )


# -- solution ----------------------------------------------------------------------


@dataclass
class Residuals:
    equality: float  # max |A x - b| / (1 + max |b|)
    equality_abs: float
    min_eigs: list[float]
    slack: float | None = None

    @property
    def min_eig(self) -> float:
        return min(self.min_eigs, default=math.inf)


@dataclass
class SdpSolution:
    status: str
    X: list[np.ndarray]
    u: np.ndarray
    residuals: Residuals | None
    iterations: int
    dual_ray: np.ndarray | None = None
    certified_violation: float | None = None
    objective: float | None = None
    message: str = ""
    solve_time: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


def residual_report(problem: SdpProblem, solution: SdpSolution | tuple) -> Residuals:
    """Recompute residuals of a candidate point directly from the sparse data."""
    if isinstance(solution, SdpSolution):
        u, X = solution.u, solution.X
    else:
        u, X = solution
    u = np.zeros(problem.n_free) if u is None else np.asarray(u, dtype=float)
    r = problem.apply(u, X) - problem.b
    eq_abs = float(np.max(np.abs(r))) if len(r) else 0.0
    scale = 1.0 + (float(np.max(np.abs(problem.b))) if len(problem.b) else 0.0)
    eigs = []
    for Xj in X:
        Xj = np.asarray(Xj, dtype=float)
        Xs = 0.5 * (Xj + Xj.T)
        eigs.append(float(np.linalg.eigvalsh(Xs)[0]) if Xs.size else math.inf)
    return Residuals(equality=eq_abs / scale, equality_abs=eq_abs, min_eigs=eigs)


# -- solver ------------------------------------------------------------------------


@dataclass
class SolverOptions:
    tol_eq: float = 1e-8
    tol_psd: float = 1e-8
    max_iter: int = 200
    seed: int = 0
    feastol: float = 1e-10
    gaptol: float = 1e-10
    step: float = 0.98
    verbose: bool = False


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.swapaxes(-1, -2))


def _svec_index(n: int):
    iu = np.triu_indices(n)
    w = np.where(iu[0] == iu[1], 1.0, math.sqrt(2.0))
    return iu, w


class _Data:
    """Dense, row-scaled copy of the problem with dependent rows removed."""

    def __init__(self, problem: SdpProblem):
        self.problem = problem
        m = problem.m
        self.dims = problem.block_dims
        self.Au = problem.dense_free()
        self.blocks = [problem.dense_block(j) for j in range(problem.n_blocks)]
        self.C = [problem.dense_objective(j) for j in range(problem.n_blocks)]
        self.cu = np.asarray(problem.c_free, dtype=float).copy()
        self.b = problem.b.copy()
        # full matrix in (u, svec X_1, svec X_2, ...) coordinates
        self.svec = [_svec_index(n) for n in self.dims]
        cols = problem.n_free + sum(len(w) for _, w in self.svec)
        F = np.zeros((m, cols))
        F[:, : problem.n_free] = self.Au
        off = problem.n_free
        self.offsets = []
        for (rows, A), (iu, w) in zip(self.blocks, self.svec):
            self.offsets.append(off)
            if len(rows):
                F[rows, off : off + len(w)] = A[:, iu[0], iu[1]] * w
            off += len(w)
        self.F = F
        norms = np.linalg.norm(F, axis=1)
        self.row_norms = norms

    def presolve(self):
        """Drop zero and dependent rows; return an infeasibility ray if inconsistent."""
        F, b, norms = self.F, self.b, self.row_norms
        m = len(b)
        bscale = 1.0 + (np.max(np.abs(b)) if m else 0.0)
        zero = norms <= 1e-14 * max(1.0, norms.max(initial=0.0))
        for k in np.flatnonzero(zero):
            if abs(b[k]) > 1e-12 * bscale:
                y = np.zeros(m)
                y[k] = -np.sign(b[k])
                return None, y
        keep = np.flatnonzero(~zero)
        if len(keep) == 0:
            return keep, None
        Fs = F[keep] / norms[keep, None]
        _, R, piv = sla.qr(Fs.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > 1e-11 * diag[0])) if len(diag) else 0
        indep = np.sort(keep[piv[:rank]])
        dep = np.setdiff1d(keep, indep)
        if len(dep):
            coef, *_ = np.linalg.lstsq(F[indep].T, F[dep].T, rcond=None)
            mismatch = b[dep] - coef.T @ b[indep]
            k = int(np.argmax(np.abs(mismatch)))
            if abs(mismatch[k]) > 1e-9 * bscale:
                y = np.zeros(m)
                y[indep] = coef[:, k]
                y[dep[k]] = -1.0
                if b @ y > 0:
                    y = -y
                return None, y
        return indep, None


class _Iterate:
    __slots__ = ("u", "X", "y", "Z", "tau", "kappa")

    def __init__(self, u, X, y, Z, tau, kappa):
        self.u, self.X, self.y, self.Z, self.tau, self.kappa = u, X, y, Z, tau, kappa


def _nt_scaling(X: np.ndarray, Z: np.ndarray):
    L = np.linalg.cholesky(X)
    Lz = np.linalg.cholesky(Z)
    U, lam, Vt = np.linalg.svd(Lz.T @ L)
    isq = 1.0 / np.sqrt(lam)
    r = (L @ Vt.T) * isq
    rti = (Lz @ U) * isq
    return r, rti, lam


def _saddle_solver(S: np.ndarray, Au: np.ndarray, QA):
    """Solver for ``[[-S, Au], [Au^T, 0]] [dy; du] = [r1; r2]``.

    ``Au`` has full column rank; the free variables are eliminated on the
    null space of ``Au^T`` where ``S`` is positive definite.
    """
    m, nf = Au.shape
    if nf == 0:
        Q1 = np.zeros((m, 0))
        Q2 = None
        R1 = np.zeros((0, 0))
        Sr = S
    else:
        Q, R = QA
        Q1, Q2, R1 = Q[:, :nf], Q[:, nf:], R[:nf, :nf]
        Sr = Q2.T @ S @ Q2
    Sr = 0.5 * (Sr + Sr.T)
    fac = None
    if Sr.size:
        try:
            fac = ("chol", sla.cho_factor(Sr, check_finite=False))
        except np.linalg.LinAlgError:
            ev, V = np.linalg.eigh(Sr)
            cut = 1e-14 * max(abs(ev[-1]), 1e-300)
            inv = np.where(ev > cut, 1.0 / np.where(ev > cut, ev, 1.0), 0.0)
            fac = ("eig", (V, inv))

    def red_solve(rhs):
        if fac is None:
            return rhs[:0]
        kind, f = fac
        if kind == "chol":
            return sla.cho_solve(f, rhs, check_finite=False)
        V, inv = f
        return V @ (inv * (V.T @ rhs))

    def solve_once(r1, r2):
        if nf == 0:
            dy = -red_solve(r1)
            return dy, np.zeros(0)
        y1 = Q1 @ sla.solve_triangular(R1, r2, trans="T", check_finite=False)
        w = -red_solve(Q2.T @ (r1 + S @ y1)) if Q2.shape[1] else np.zeros(0)
        dy = y1 + (Q2 @ w if Q2.shape[1] else 0.0)
        du = sla.solve_triangular(R1, Q1.T @ (r1 + S @ dy), check_finite=False)
        return dy, du

    def ksolve(rhs):
        r1, r2 = rhs[:m], rhs[m:]
        dy, du = solve_once(r1, r2)
        # one step of iterative refinement
        e1 = r1 - (-S @ dy + Au @ du)
        e2 = r2 - Au.T @ dy
        ddy, ddu = solve_once(e1, e2)
        return dy + ddy, du + ddu

    return ksolve


def _max_step(lam: np.ndarray, D: np.ndarray) -> float:
    """Largest alpha with diag(lam) + alpha D PSD (inf if unbounded)."""
    s = 1.0 / np.sqrt(lam)
    M = _sym(D * s[:, None] * s[None, :])
    ev = np.linalg.eigvalsh(M)[0]
    return math.inf if ev >= 0 else -1.0 / ev


def solve(
    problem: SdpProblem,
    tol_eq: float = 1e-8,
    tol_psd: float = 1e-8,
    max_iter: int = 200,
    seed: int = 0,
    verbose: bool | None = None,
    options: SolverOptions | None = None,
) -> SdpSolution:
    """Solve ``problem``; see the module docstring for the problem form.

    Status ``feasible`` guarantees the recomputed equality residual is at most
    ``tol_eq`` (relative to ``1 + max|b|``) and every block has smallest
    eigenvalue at least ``-tol_psd``.  Status ``infeasible`` comes with a
    Farkas ray ``y`` (``A_u^T y = 0``, ``A_X^T y`` PSD, ``b.y = -1``).  The
    iteration is deterministic; ``seed`` is accepted for interface symmetry.
    """
    opts = options or SolverOptions(tol_eq=tol_eq, tol_psd=tol_psd, max_iter=max_iter, seed=seed)
    if verbose is None:
        verbose = opts.verbose or os.environ.get("BARRIER_SYNTH_LOG", "").lower() in ("debug", "2", "verbose")
    t0 = time.perf_counter()
    sol = _solve(problem, opts, verbose)
    sol.solve_time = time.perf_counter() - t0
    return sol


def _certify_ray(problem: SdpProblem, data: _Data, y: np.ndarray, opts: SolverOptions):
    """Normalise a candidate Farkas ray and measure its quality."""
    by = float(problem.b @ y)
    if not by < 0:
        return None, 0.0, math.inf
    y = y / -by
    aty_u = data.Au.T @ y if problem.n_free else np.zeros(0)
    worst = float(np.max(np.abs(aty_u))) if len(aty_u) else 0.0
    for (rows, A), n in zip(data.blocks, data.dims):
        if not len(rows):
            continue
        S = np.tensordot(y[rows], A, axes=1)
        ev = np.linalg.eigvalsh(_sym(S))[0]
        worst = max(worst, -ev)
    ynorm = float(np.sum(np.abs(y)))
    violation = 1.0 / ynorm if ynorm > 0 else math.inf
    return y, violation, worst


def _ray_ok(y, violation: float, worst: float, opts: SolverOptions) -> bool:
    return y is not None and worst <= 1e-7 and violation >= 10 * opts.tol_eq


def _solve(problem: SdpProblem, opts: SolverOptions, verbose: bool) -> SdpSolution:
    data = _Data(problem)
    nb = problem.n_blocks
    dims = problem.block_dims
    nf = problem.n_free
    keep, ray = data.presolve()
    if ray is not None:
        y, viol, worst = _certify_ray(problem, data, ray, opts)
        return SdpSolution(
            INFEASIBLE,
            [np.eye(n) for n in dims],
            np.zeros(nf),
            None,
            0,
            dual_ray=y,
            certified_violation=viol,
            message="inconsistent linear equalities",
        )

    # working copy restricted to independent rows, each scaled to unit norm
    scale = 1.0 / data.row_norms[keep]
    b = data.b[keep] * scale
    Au_full = data.Au[keep] * scale[:, None]
    # free columns: keep an independent set, the rest stay at zero
    free_cols = np.zeros(0, dtype=int)
    if nf and len(keep):
        _, Rf, pf = sla.qr(Au_full, mode="economic", pivoting=True)
        dg = np.abs(np.diag(Rf))
        rk = int(np.sum(dg > 1e-11 * dg[0])) if len(dg) and dg[0] > 0 else 0
        free_cols = np.sort(pf[:rk])
    Au = Au_full[:, free_cols]
    cu_full = data.cu
    nf = len(free_cols)
    pos = -np.ones(problem.m, dtype=int)
    pos[keep] = np.arange(len(keep))
    blocks = []
    for rows, A in data.blocks:
        sel = pos[rows] >= 0
        r = pos[rows[sel]]
        blocks.append((r, A[sel] * scale[r][:, None, None] if len(r) else A[sel]))
    # rescale the cost so its magnitude does not dominate the embedding
    cnorm = max(
        float(np.max(np.abs(data.cu))) if nf else 0.0,
        max((float(np.max(np.abs(C))) for C in data.C), default=0.0),
    )
    cscale = 1.0 / cnorm if cnorm > 0 else 1.0
    cu = cu_full[free_cols] * cscale
    C = [Cj * cscale for Cj in data.C]
    m = len(b)

    def A_op(u, X):
        out = Au @ u if nf else np.zeros(m)
        for (r, A), Xj in zip(blocks, X):
            if len(r):
                out[r] += np.tensordot(A, Xj, axes=([1, 2], [0, 1]))
        return out

    def At_op(y):
        Xs = []
        for (r, A), n in zip(blocks, dims):
            Xs.append(np.tensordot(y[r], A, axes=1) if len(r) else np.zeros((n, n)))
        return Au.T @ y if nf else np.zeros(0), Xs

    QA = np.linalg.qr(Au, mode="complete") if nf else None
    it = _Iterate(
        np.zeros(nf),
        [np.eye(n) for n in dims],
        np.zeros(m),
        [np.eye(n) for n in dims],
        1.0,
        1.0,
    )
    degree = sum(dims) + 1
    bnorm = 1.0 + np.linalg.norm(b)
    cnorm2 = 1.0 + math.sqrt(np.dot(cu, cu) + sum(np.sum(Cj * Cj) for Cj in C))
    status = None
    message = ""
    best, best_pres = None, math.inf
    best_ray, best_pinf = None, math.inf

    def _lift(yk):
        full = np.zeros(problem.m)
        full[keep] = yk * scale
        return full
    k = 0
    for k in range(opts.max_iter + 1):
        u, X, y, Z, tau, kappa = it.u, it.X, it.y, it.Z, it.tau, it.kappa
        Aty_u, Aty_X = At_op(y)
        r_u = Aty_u + cu * tau
        r_X = [Aty_X[j] - Z[j] + C[j] * tau for j in range(nb)]
        Ax = A_op(u, X)
        r_y = -Ax + b * tau
        cx = float(cu @ u) + sum(float(np.sum(C[j] * X[j])) for j in range(nb))
        by = float(b @ y)
        r_tau = kappa + cx + by
        xz = sum(float(np.sum(X[j] * Z[j])) for j in range(nb))
        mu = (xz + tau * kappa) / degree

        pres = np.linalg.norm(r_y) / tau / bnorm
        dres = math.sqrt(np.dot(r_u, r_u) + sum(np.sum(R * R) for R in r_X)) / tau / cnorm2
        pobj, dobj = cx / tau, -by / tau
        gap = xz / tau**2
        relgap = gap / (1.0 + abs(pobj) + abs(dobj))
        # certificate qualities
        pinf = math.inf
        if by < 0:
            pinf = (
                math.sqrt(np.dot(Aty_u, Aty_u) + sum(np.sum((Aty_X[j] - Z[j]) ** 2) for j in range(nb)))
                / -by
            )
        dinf = math.inf
        if cx < 0:
            dinf = math.sqrt(np.dot(Ax, Ax) + 0.0) / -cx
        if verbose:
            log.info(
                "it %3d  pobj % .8e  dobj % .8e  pres %.2e  dres %.2e  gap %.2e  tau %.2e  kappa %.2e  pinf %.2e",
                k, pobj, dobj, pres, dres, gap, tau, kappa, pinf,
            )
        if pres <= opts.feastol and dres <= opts.feastol and (gap <= opts.gaptol or relgap <= opts.gaptol):
            status = FEASIBLE
            break
        if -by > tau and pinf < best_pinf:
            best_ray, best_pinf = y.copy(), pinf
        if pinf <= opts.feastol and -by > tau:
            status = INFEASIBLE
            break
        if pinf <= 1e3 * opts.feastol and -by > tau and _ray_ok(*_certify_ray(problem, data, _lift(y), opts), opts):
            status = INFEASIBLE
            break
        if dinf <= opts.feastol:
            status = "unbounded"
            break
        if k == opts.max_iter:
            message = "iteration limit"
            break
        if tau > 0 and pres < best_pres:
            best, best_pres = it, pres

        try:
            scal = [_nt_scaling(X[j], Z[j]) for j in range(nb)]
        except np.linalg.LinAlgError:
            message = "lost positive definiteness"
            break
        Rm = [s[0] @ s[0].T for s in scal]  # W^T W = R . R

        def H(j, M):
            return Rm[j] @ M @ Rm[j]

        S = np.zeros((m, m))
        for j, (r, A) in enumerate(blocks):
            if not len(r):
                continue
            T = np.matmul(np.matmul(Rm[j], A), Rm[j])
            S[np.ix_(r, r)] += A.reshape(len(r), -1) @ T.reshape(len(r), -1).T
        try:
            ksolve = _saddle_solver(S, Au, QA)
        except np.linalg.LinAlgError:
            message = "singular Newton system"
            break

        HC = [H(j, C[j]) for j in range(nb)]
        q1 = b + A_op(np.zeros(nf), HC)
        dy_b, du_b = ksolve(np.concatenate([q1, -cu]))
        _, AtX_b = At_op(dy_b)
        dX_b = [-H(j, AtX_b[j] + C[j]) for j in range(nb)]
        den = -kappa / tau + float(cu @ du_b) + sum(float(np.sum(C[j] * dX_b[j])) for j in range(nb)) + float(b @ dy_b)

        def newton(eta, ds, dk):
            # ds: per block target for lambda o (W^-T dX + W dZ); dk for kappa dtau + tau dkappa
            WTds = []
            for j in range(nb):
                r_, rti, lam = scal[j]
                dst = 2.0 * ds[j] / (lam[:, None] + lam[None, :])
                WTds.append(r_ @ dst @ r_.T)
            Hr = [H(j, r_X[j]) for j in range(nb)]
            rhs1 = eta * r_y - A_op(np.zeros(nf), WTds) + eta * A_op(np.zeros(nf), Hr)
            rhs2 = -eta * r_u
            dy_a, du_a = ksolve(np.concatenate([rhs1, rhs2]))
            _, AtX_a = At_op(dy_a)
            dX_a = [WTds[j] - H(j, AtX_a[j] + eta * r_X[j]) for j in range(nb)]
            num = (
                -eta * r_tau
                - dk / tau
                - float(cu @ du_a)
                - sum(float(np.sum(C[j] * dX_a[j])) for j in range(nb))
                - float(b @ dy_a)
            )
            dtau = num / den
            dy = dy_a + dtau * dy_b
            du = du_a + dtau * du_b
            dX = [_sym(dX_a[j] + dtau * dX_b[j]) for j in range(nb)]
            _, AtX = At_op(dy)
            dZ = [_sym(AtX[j] + C[j] * dtau + eta * r_X[j]) for j in range(nb)]
            dkappa = (dk - kappa * dtau) / tau
            return du, dX, dy, dZ, dtau, dkappa

        def scaled(dX, dZ):
            sx, sz = [], []
            for j in range(nb):
                r_, rti, lam = scal[j]
                sx.append(_sym(rti.T @ dX[j] @ rti))
                sz.append(_sym(r_.T @ dZ[j] @ r_))
            return sx, sz

        def step_length(dX, dZ, dtau, dkappa):
            sx, sz = scaled(dX, dZ)
            a = math.inf
            for j in range(nb):
                lam = scal[j][2]
                a = min(a, _max_step(lam, sx[j]), _max_step(lam, sz[j]))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a, sx, sz

        with np.errstate(all="ignore"):
            try:
                # predictor
                ds_aff = [-np.diag(scal[j][2] ** 2) for j in range(nb)]
                d_aff = newton(1.0, ds_aff, -tau * kappa)
                a_aff, sx_a, sz_a = step_length(d_aff[1], d_aff[3], d_aff[4], d_aff[5])
                a_aff = min(1.0, a_aff)
                sigma = max(0.0, min(1.0, 1.0 - a_aff)) ** 3
                # corrector
                ds = []
                for j in range(nb):
                    lam = scal[j][2]
                    corr = 0.5 * (sx_a[j] @ sz_a[j] + sz_a[j] @ sx_a[j])
                    ds.append(-np.diag(lam**2) + sigma * mu * np.eye(len(lam)) - corr)
                dk = -tau * kappa + sigma * mu - d_aff[4] * d_aff[5]
                d = newton(1.0 - sigma, ds, dk)
                a_max, _, _ = step_length(d[1], d[3], d[4], d[5])
                alpha = min(1.0, opts.step * a_max)
            except (np.linalg.LinAlgError, ValueError):
                message = "Newton direction broke down"
                break
        if verbose:
            log.info("      mu %.3e  sigma %.3e  alpha_aff %.3e  alpha %.3e  dtau %.3e", mu, sigma, a_aff, alpha, d[4])
        if not np.isfinite(alpha) or alpha < 1e-12:
            message = "step length collapsed"
            break
        du, dX, dy, dZ, dtau, dkappa = d
        new = _Iterate(
            u + alpha * du,
            [_sym(X[j] + alpha * dX[j]) for j in range(nb)],
            y + alpha * dy,
            [_sym(Z[j] + alpha * dZ[j]) for j in range(nb)],
            tau + alpha * dtau,
            kappa + alpha * dkappa,
        )
        if not (np.isfinite(new.tau) and np.isfinite(new.kappa) and np.all(np.isfinite(new.y))):
            message = "non-finite iterate"
            break
        # keep the embedding normalised (the problem is homogeneous)
        nrm = new.tau + new.kappa
        if nrm > 1e6 or nrm < 1e-6:
            f = 1.0 / nrm
            new = _Iterate(new.u * f, [x * f for x in new.X], new.y * f, [z * f for z in new.Z], new.tau * f, new.kappa * f)
        it = new

    iters = k
    it.u = _expand(it.u, free_cols, problem.n_free)

    rays = []
    if status == INFEASIBLE or (float(b @ it.y) < 0 and -float(b @ it.y) > it.tau):
        rays.append(it.y)
    if best_ray is not None:
        rays.append(best_ray)
    for ray in rays:
        yv, viol, worst = _certify_ray(problem, data, _lift(ray), opts)
        if _ray_ok(yv, viol, worst, opts):
            return SdpSolution(
                INFEASIBLE,
                [x / max(it.tau, 1e-300) for x in it.X],
                it.u,
                None,
                iters,
                dual_ray=yv,
                certified_violation=viol,
                message="primal infeasibility certificate" + (f" ({message})" if message else ""),
            )
        if status == INFEASIBLE:
            message = message or f"weak infeasibility certificate (quality {worst:.2e}, violation {viol:.2e})"

    if status == "unbounded":
        return _failure(problem, it, iters, "objective unbounded below")

    if status == FEASIBLE or it.tau > 0:
        candidates = [it] if best is None or best is it else [it, best]
        first = None
        for cand in candidates:
            if cand is not it:
                cand.u = _expand(cand.u, free_cols, problem.n_free)
            raw_u = cand.u / cand.tau
            raw_X = [x / cand.tau for x in cand.X]
            for u, X in (
                _polish(data, keep, raw_u, raw_X),
                _scaled_polish(data, keep, raw_u, raw_X),
                (raw_u, raw_X),
            ):
                res = residual_report(problem, (u, X))
                ok = res.equality <= opts.tol_eq and res.min_eig >= -opts.tol_psd
                if first is None:
                    first = (u, X, res)
                if ok:
                    obj = problem.objective(u, X)
                    msg = "converged" if status == FEASIBLE else (message or "stalled") + " at a feasible point"
                    return SdpSolution(FEASIBLE, X, u, res, iters, objective=obj, message=msg)
        u, X, res = first
        msg = message or "converged but failed the residual contract"
        return SdpSolution(NUMERICAL_FAILURE, X, u, res, iters, objective=problem.objective(u, X), message=msg)
    return _failure(problem, it, iters, message or "no convergence")


def _expand(u: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    if len(u) == n:
        return u
    out = np.zeros(n)
    out[cols] = u
    return out


def _failure(problem: SdpProblem, it: _Iterate, iters: int, message: str) -> SdpSolution:
    tau = max(it.tau, 1e-300)
    X = [x / tau for x in it.X]
    u = it.u / tau
    try:
        res = residual_report(problem, (u, X))
    except (FloatingPointError, np.linalg.LinAlgError):
        res = None
    return SdpSolution(NUMERICAL_FAILURE, X, u, res, iters, message=message)


def _polish(data: _Data, keep: np.ndarray, u: np.ndarray, X: list[np.ndarray]):
    """Least-norm correction onto the affine equality set."""
    if not len(keep):
        return u, X
    p = data.problem
    r = p.b - p.apply(u, X)
    F = data.F[keep]
    delta, *_ = np.linalg.lstsq(F, r[keep], rcond=None)
    u = u + delta[: p.n_free]
    X2 = []
    for Xj, (iu, w), off in zip(X, data.svec, data.offsets):
        d = np.zeros_like(Xj)
        d[iu] = delta[off : off + len(w)] / w
        d = d + np.triu(d, 1).T
        X2.append(Xj + d)
    return u, X2


def _scaled_polish(data: _Data, keep: np.ndarray, u: np.ndarray, X: list[np.ndarray], rounds: int = 3):
    """Correction onto the equality set measured in the metric of ``X``.

    The step ``dX = X A^T(w) X`` stays inside the range of ``X`` and therefore
    keeps positive semidefiniteness much better than a Euclidean projection
    when the feasible set has no interior.
    """
    if not len(keep):
        return u, X
    p = data.problem
    Au = data.Au[keep]
    blocks = []
    for rows, A in data.blocks:
        pos = np.searchsorted(keep, rows)
        sel = (pos < len(keep)) & (keep[np.minimum(pos, len(keep) - 1)] == rows)
        blocks.append((pos[sel], A[sel]))
    X = [Xj.copy() for Xj in X]
    u = u.copy()
    for _ in range(rounds):
        r = (p.b - p.apply(u, X))[keep]
        if not np.any(r):
            break
        M = Au @ Au.T
        for (r_idx, A), Xj in zip(blocks, X):
            if len(r_idx):
                T = np.matmul(np.matmul(Xj, A), Xj)
                M[np.ix_(r_idx, r_idx)] += A.reshape(len(r_idx), -1) @ T.reshape(len(r_idx), -1).T
        w, *_ = np.linalg.lstsq(M, r, rcond=1e-14)
        u = u + Au.T @ w
        for j, ((r_idx, A), Xj) in enumerate(zip(blocks, X)):
            if len(r_idx):
                G = np.tensordot(w[r_idx], A, axes=1)
                X[j] = _sym(Xj + Xj @ G @ Xj)
    return u, X
