"""Independent verification of barrier certificates.

Nothing here reuses the SOS compiler: constraint polynomials are rebuilt from
the certificate's own barrier and multiplier polynomials.

* Tier A subtracts ``v(x)^T M v(x)`` from each rebuilt constraint in exact
  arithmetic and checks the Gram spectra.
* Tier B samples every condition region inside a bounding box and checks the
  sign conditions pointwise.

The trajectory tools (RK4, hybrid executor, exponential-bound check) are
falsification aids on top of the two tiers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np

from .poly import Polynomial, compile_polynomials, compile_scalar, lie_derivative
from .system import EmptySetError, HybridSystem, Transition

if TYPE_CHECKING:  # pragma: no cover
    from .synthesis import Certificate

log = logging.getLogger(__name__)


class CertificateMismatch(ValueError):
    """The certificate does not fit the system (missing barrier, wrong variables)."""


class GridTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Tolerances:
    coef: float = 1e-6
    min_eig: float = -1e-7
    slack: float = 1e-6
    samples: int = 10_000
    box: float | tuple[tuple[float, float], ...] = 10.0
    seed: int = 0

    def bounds(self, n: int) -> np.ndarray:
        return box_bounds(self.box, n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = np.asarray(self.box, dtype=float).tolist() if not isinstance(self.box, (int, float)) else self.box
        return d


def box_bounds(box, n: int) -> np.ndarray:
    """``10`` -> ``[-10, 10]^n``; a ``(lo, hi)`` pair or a per-axis list also work."""
    if isinstance(box, (int, float)):
        return np.tile([-float(box), float(box)], (n, 1))
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        return np.tile(arr, (n, 1))
    if arr.shape != (n, 2):
        raise ValueError(f"box must be a number, a (lo, hi) pair or {n} pairs, got shape {arr.shape}")
    return arr


# -- region sampling ---------------------------------------------------------------


@dataclass
class RegionSamples:
    points: np.ndarray
    attempts: int
    method: str  # "rejection", "rejection+hit-and-run", "projection" ...

    def __len__(self) -> int:
        return len(self.points)


def _violation(fs, X: np.ndarray) -> np.ndarray:
    out = np.zeros(len(X))
    with np.errstate(all="ignore"):
        for f in fs:
            out = np.maximum(out, -f(X))
    return out


def _project(polys: Sequence[Polynomial], order: Sequence[str], X: np.ndarray, lo, hi, iters: int = 60) -> np.ndarray:
    """Batched Gauss-Newton projection of the rows of ``X`` onto ``{p >= 0}``.

    Only violated inequalities are linearised at each step, so points already
    inside stay put.  Returns the rows that end within ``1e-10`` of the region.
    """
    fs = compile_polynomials(list(polys), order)
    grads = [compile_polynomials([p.bind(order).derivative(v) for v in order], order) for p in polys]
    X = np.array(X, dtype=float)
    for _ in range(iters):
        with np.errstate(all="ignore"):
            V = np.column_stack([f(X) for f in fs])
        active = V < 0
        if not active.any():
            break
        with np.errstate(all="ignore"):
            J = np.stack([np.column_stack([g(X) for g in gs]) for gs in grads], axis=1)  # (N, m, n)
        J = np.where(active[..., None], J, 0.0)
        J[~np.isfinite(J)] = 0.0
        r = np.where(active, V, 0.0)
        step = np.einsum("nij,nj->ni", np.linalg.pinv(J), r)
        X = np.clip(X - step, lo, hi)
        X[~np.all(np.isfinite(X), axis=1)] = lo
    return X[_violation(fs, X) <= 1e-10] if len(X) else X


def _project_points(polys, order, lo, hi, rng, want: int) -> np.ndarray:
    n = len(lo)
    got: list[np.ndarray] = []
    total = 0
    for _ in range(20):
        Y = _project(polys, order, lo + (hi - lo) * rng.random((max(2 * want, 64), n)), lo, hi)
        if len(Y):
            got.append(Y)
            total += len(Y)
        if total >= want:
            break
    return np.vstack(got)[:want] if got else np.zeros((0, n))


def _hit_and_run(fs, degrees, lo, hi, seeds: np.ndarray, count: int, rng, chains: int = 64, thin: int = 2, burn: int = 20):
    """Hit-and-run over ``{g_i >= 0} ∩ box``, all chains advanced together.

    Along a chord each ``g_i`` is a univariate polynomial of known degree: it
    is fitted exactly at a few nodes and its real roots split the chord into
    pieces.  Feasible pieces are found by testing midpoints and the next point
    is uniform over their union.
    """
    n = len(lo)
    deg = max(1, max(degrees) if degrees else 1)
    nodes = np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1))  # on [-1, 1]
    V = np.vander(nodes, deg + 1, increasing=True)
    Vinv = np.linalg.inv(V)
    X = seeds[rng.integers(len(seeds), size=chains)].astype(float)
    C = chains
    out: list[np.ndarray] = []
    it = 0
    idle = 0
    while len(out) * C < count and idle < 50:
        D = rng.standard_normal((C, n))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - X) / D
            t2 = (hi - X) / D
        tmin = np.max(np.where(D != 0, np.minimum(t1, t2), -np.inf), axis=1)
        tmax = np.min(np.where(D != 0, np.maximum(t1, t2), np.inf), axis=1)
        mid, half = 0.5 * (tmin + tmax), 0.5 * (tmax - tmin)
        cuts = [tmin[:, None], tmax[:, None]]
        P = (X[:, None, :] + (mid[:, None] + half[:, None] * nodes[None, :])[..., None] * D[:, None, :]).reshape(-1, n)
        with np.errstate(all="ignore"):
            for f in fs:
                vals = f(P).reshape(C, deg + 1)
                coef = vals @ Vinv.T  # power basis in s, chord parameter t = mid + half*s
                lead = coef[:, -1:]
                scale = np.max(np.abs(coef), axis=1, keepdims=True)
                # trim numerically vanished leading terms by keeping the full
                # degree and letting spurious roots fall outside [-1, 1]
                safe = np.where(np.abs(lead) > 1e-13 * scale, lead, np.nan)
                if deg == 1:
                    r = (-coef[:, 0] / safe[:, 0])[:, None].astype(complex)
                else:
                    comp = np.zeros((C, deg, deg))
                    comp[:, 1:, :-1] = np.eye(deg - 1)
                    comp[:, :, -1] = -coef[:, :-1] / safe
                    ok = np.all(np.isfinite(comp), axis=(1, 2))
                    r = np.full((C, deg), np.nan, dtype=complex)
                    if ok.any():
                        r[ok] = np.linalg.eigvals(comp[ok])
                real = (np.abs(r.imag) < 1e-9) & (r.real > -1) & (r.real < 1)
                s_ = np.where(real, r.real, -1.0)
                cuts.append(mid[:, None] + half[:, None] * s_)
        cuts = np.sort(np.concatenate(cuts, axis=1), axis=1)
        L = np.diff(cuts, axis=1)
        mids = 0.5 * (cuts[:, :-1] + cuts[:, 1:])
        M = (X[:, None, :] + mids[..., None] * D[:, None, :]).reshape(-1, n)
        feas = (_violation(fs, M) <= 0).reshape(L.shape)
        w = np.where(feas, L, 0.0)
        cum = np.cumsum(w, axis=1)
        total = cum[:, -1]
        u = rng.random(C) * total
        idx = np.minimum(np.argmax(cum > u[:, None], axis=1), L.shape[1] - 1)
        rows = np.arange(C)
        pos = cuts[rows, idx] + (u - (cum[rows, idx] - w[rows, idx]))
        Y = X + pos[:, None] * D
        good = (total > 1e-14) & (_violation(fs, Y) <= 0) & np.all(np.isfinite(Y), axis=1)
        X = np.where(good[:, None], Y, X)
        idle = idle + 1 if not good.any() else 0
        it += 1
        if it > burn and it % thin == 0:
            out.append(X[good])
    pts = np.vstack(out) if out else np.zeros((0, n))
    return list(pts[:count])


def sample_region(
    polys: Sequence[Polynomial],
    order: Sequence[str],
    bounds: np.ndarray,
    count: int,
    seed: int,
    rejection_budget: int | None = None,
    batch: int = 200_000,
) -> RegionSamples:
    """Seeded points of ``{p >= 0 for p in polys}`` inside ``bounds``.

    Uniform rejection first.  Thin regions (guard shells, small disks in a big
    box) are topped up with hit-and-run chains started from accepted points,
    or from optimisation-projected points when rejection found nothing.
    Measure-zero regions fall back to projection alone.
    """
    order = tuple(order)
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    n = len(order)
    rng = np.random.default_rng(seed)
    if count <= 0:
        return RegionSamples(np.zeros((0, n)), 0, "none")
    fs = compile_polynomials(list(polys), order) if polys else []
    budget = rejection_budget if rejection_budget is not None else max(50 * count, 5_000_000)
    got: list[np.ndarray] = []
    total = 0
    attempts = 0
    while total < count and attempts < budget:
        k = min(batch, budget - attempts)
        X = lo + (hi - lo) * rng.random((k, n))
        attempts += k
        keep = X[_violation(fs, X) <= 0] if fs else X
        if len(keep):
            got.append(keep[: count - total])
            total += len(got[-1])
        if not fs:
            break
    if total >= count:
        return RegionSamples(np.vstack(got), attempts, "rejection")
    method = "rejection"
    if total:
        seeds = np.vstack(got)
    else:
        seeds = _project_points(polys, order, lo, hi, rng, 64)
        method = "projection"
    if len(seeds) == 0:
        raise EmptySetError(f"region appears empty inside box {bounds.tolist()}")
    pts = list(np.vstack(got)) if total else []
    need = count - len(pts)
    walk = _hit_and_run(fs, [p.total_degree() for p in polys], lo, hi, seeds, need, rng)
    if walk:
        method += "+hit-and-run"
        pts.extend(walk)
    if len(pts) < count:
        # measure-zero or badly conditioned region: project fresh random points
        more = _project_points(polys, order, lo, hi, rng, count - len(pts))
        if len(more):
            method += "+projection"
        pts.extend(more)
    if not pts:
        pts = list(seeds)
    return RegionSamples(np.array(pts[:count]), attempts, method)


# -- rebuilding constraints --------------------------------------------------------


@dataclass
class Condition:
    """One condition to verify: ``polynomial >= 0`` on ``region`` (Tier B uses ``violation``)."""

    name: str
    kind: str
    sos: Polynomial  # the rebuilt SOS-side constraint polynomial
    violation: Polynomial  # pass iff violation <= slack on region
    region: tuple[Polynomial, ...]
    order: tuple[str, ...]
    threshold: float = 0.0


def _structure(H: HybridSystem, cert: "Certificate") -> None:
    if len(cert.vars) != H.n:
        raise CertificateMismatch(
            f"certificate has {len(cert.vars)} variables {list(cert.vars)}, system has {H.n} {list(H.vars)}"
        )
    if tuple(cert.vars) != tuple(H.vars):
        raise CertificateMismatch(f"variable names differ: certificate {list(cert.vars)}, system {list(H.vars)}")
    for m in H.modes:
        if m.id not in cert.barriers:
            raise CertificateMismatch(f"no barrier for location {m.id!r}")
    extra = set(cert.barriers) - {m.id for m in H.modes}
    if extra:
        raise CertificateMismatch(f"barriers for unknown locations {sorted(extra)}")
    for p in cert.barriers.values():
        unknown = set(p._used_vars()) - set(H.vars)
        if unknown:
            raise CertificateMismatch(f"barrier uses unknown variables {sorted(unknown)}")


def _mult(cert: "Certificate", owner: str, vars: Sequence[str]) -> Polynomial:
    p = cert.multipliers.get(owner)
    return Polynomial.zero(vars) if p is None else p


def rebuild_conditions(H: HybridSystem, cert: "Certificate") -> list[Condition]:
    """Rebuild every constraint polynomial from the certificate alone."""
    _structure(H, cert)
    x = tuple(H.vars)
    xp = H.primed_vars
    prime = dict(zip(x, xp))
    phi = {l: p.bind(x) for l, p in cert.barriers.items()}
    eps = Fraction(cert.epsilon)
    out: list[Condition] = []
    mult_regions: list[tuple[str, Polynomial, tuple[str, ...]]] = []

    def weighted(expr: Polynomial, family: str, tag: str, sets: Sequence[Polynomial], vars) -> Polynomial:
        for i, g in enumerate(sets):
            owner = f"{family}[{tag}][{i}]"
            s = _mult(cert, owner, vars)
            mult_regions.append((owner, s, tuple(vars)))
            expr = expr - s * g
        return expr

    for m in H.modes:
        l = m.id
        p = phi[l]
        if not m.init.is_empty:
            sos = weighted(-p, "mu", l, m.init.polys, x)
            out.append(Condition(f"init[{l}]", "init", sos, p, m.init.polys, x))
        lam = Fraction(cert.lambdas[l])
        lie = lie_derivative(p, m.field)
        sos = weighted(p * lam - lie, "theta", l, m.invariant.polys, x)
        out.append(Condition(f"flow[{l}]", "flow", sos, lie - p * lam, m.invariant.polys, x))
    for t in H.transitions:
        g = Fraction(cert.gammas[t.edge])
        src, dst = phi[t.source], phi[t.target]
        if t.identity_reset:
            main = src * g - dst
            sos = weighted(main, "kappa", t.edge, t.guard.polys, x)
            out.append(Condition(f"jump[{t.edge}]", "jump", sos, -main, t.guard.polys, x))
        else:
            both = x + xp
            main = (src * g - dst.rename(prime)).bind(both)
            sos = weighted(main, "kappa", t.edge, [q.bind(both) for q in t.guard.polys], x)
            sos = weighted(sos, "sigma", t.edge, [r.bind(both) for r in t.reset.polys], xp)
            region = tuple(q.bind(both) for q in t.guard.polys) + tuple(r.bind(both) for r in t.reset.polys)
            out.append(Condition(f"jump[{t.edge}]", "jump", sos.bind(both), -main, region, both))
    for m in H.modes:
        if m.unsafe.is_empty:
            continue
        l = m.id
        p = phi[l]
        sos = weighted(p - eps, "eta", l, m.unsafe.polys, x)
        out.append(Condition(f"unsafe[{l}]", "unsafe", sos, eps - p, m.unsafe.polys, x))
    for owner, s, vars in mult_regions:
        out.append(Condition(f"sos:{owner}", "multiplier", s.bind(vars), -s.bind(vars), (), vars))
    return out


# -- Tier A -----------------------------------------------------------------------


@dataclass
class TierARecord:
    name: str
    coefficient_residual: float
    min_eigenvalue: float
    basis_size: int
    passed: bool
    note: str = ""


def gram_form(vars: Sequence[str], basis: Sequence[tuple[int, ...]], M: np.ndarray) -> Polynomial:
    """``v(x)^T M v(x)`` in exact arithmetic (entries taken as exact binary floats)."""
    terms: dict[tuple[int, ...], Fraction] = {}
    k = len(basis)
    for a in range(k):
        for b in range(a, k):
            v = float(M[a, b]) if a == b else float(M[a, b]) + float(M[b, a])
            if v == 0.0:
                continue
            mono = tuple(i + j for i, j in zip(basis[a], basis[b]))
            terms[mono] = terms.get(mono, Fraction(0)) + Fraction(v)
    return Polynomial(vars, terms)


def tier_a(conditions: Sequence[Condition], cert: "Certificate", tol: Tolerances) -> list[TierARecord]:
    records = []
    for c in conditions:
        gram = cert.grams.get(c.name)
        if gram is None:
            # no Gram block: only acceptable when the constraint is identically zero
            res = max((abs(float(v)) for v in c.sos.terms.values()), default=0.0)
            records.append(TierARecord(c.name, res, 0.0, 0, res <= tol.coef, "no Gram block"))
            continue
        M = np.asarray(gram.matrix, dtype=float)
        if M.size:
            asym = float(np.max(np.abs(M - M.T)))
            Ms = 0.5 * (M + M.T)
            lam = float(np.linalg.eigvalsh(Ms)[0])
        else:
            asym, Ms, lam = 0.0, M, 0.0
        diff = c.sos.bind(gram.vars) - gram_form(gram.vars, gram.basis, Ms)
        res = max((abs(float(v)) for v in diff.terms.values()), default=0.0)
        note = f"asymmetry {asym:.3g}" if asym > 0 else ""
        records.append(TierARecord(c.name, res, lam, len(gram.basis), res <= tol.coef and lam >= tol.min_eig, note))
    return records


# -- Tier B -----------------------------------------------------------------------


@dataclass
class TierBRecord:
    name: str
    kind: str
    samples: int
    worst_violation: float
    witness: list[float] | None
    passed: bool
    method: str = ""
    note: str = ""


def _seed_for(base: int, name: str) -> int:
    # stable per-condition stream; Python's hash() is salted per process
    return (base * 1_000_003 + sum((i + 1) * ord(ch) for i, ch in enumerate(name))) % (2**32)


def tier_b_condition(c: Condition, bounds: np.ndarray, count: int, seed: int, slack: float) -> TierBRecord:
    if c.kind == "multiplier":
        region_bounds = bounds if len(c.order) == len(bounds) else np.vstack([bounds] * (len(c.order) // len(bounds)))
    else:
        region_bounds = bounds if len(c.order) == len(bounds) else np.vstack([bounds, bounds])
    region_bounds = region_bounds[: len(c.order)]
    try:
        pts = sample_region(c.region, c.order, region_bounds, count, _seed_for(seed, c.name))
    except EmptySetError as exc:
        return TierBRecord(c.name, c.kind, 0, float("-inf"), None, True, "", f"vacuous: {exc}")
    (f,) = compile_polynomials([c.violation], c.order)
    with np.errstate(all="ignore"):
        v = f(pts.points)
    v = np.where(np.isnan(v), np.inf, v)
    i = int(np.argmax(v))
    worst = float(v[i])
    note = "" if len(pts) >= count else f"only {len(pts)} of {count} points found"
    return TierBRecord(c.name, c.kind, len(pts), worst, pts.points[i].tolist(), worst <= slack, pts.method, note)


def tier_b(conditions: Sequence[Condition], tol: Tolerances, n: int, jobs: int = 1) -> list[TierBRecord]:
    bounds = tol.bounds(n)
    todo = [c for c in conditions if c.kind != "multiplier"]
    if jobs > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(tier_b_condition, c, bounds, tol.samples, tol.seed, tol.slack) for c in todo]
            return [f.result() for f in futs]
    return [tier_b_condition(c, bounds, tol.samples, tol.seed, tol.slack) for c in todo]


# -- report -----------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    start: list[float]
    location: str
    max_violation: float
    witness_time: float
    passed: bool
    entered_unsafe: bool = False
    diverged: bool = False


@dataclass
class VerificationReport:
    tier_a: list[TierARecord]
    tier_b: list[TierBRecord]
    tolerances: Tolerances
    trajectories: list[TrajectoryRecord] = field(default_factory=list)

    @property
    def tier_a_passed(self) -> bool:
        return all(r.passed for r in self.tier_a)

    @property
    def tier_b_passed(self) -> bool:
        return all(r.passed for r in self.tier_b)

    @property
    def trajectories_passed(self) -> bool:
        return all(r.passed for r in self.trajectories)

    @property
    def passed(self) -> bool:
        return self.tier_a_passed and self.tier_b_passed and self.trajectories_passed

    @property
    def inconsistent(self) -> bool:
        """Tier A passed while Tier B found a violation: should never happen."""
        return self.tier_a_passed and not self.tier_b_passed

    def failures(self) -> list[str]:
        out = [f"tier A {r.name}: residual {r.coefficient_residual:.3g}, min eig {r.min_eigenvalue:.3g}"
               for r in self.tier_a if not r.passed]
        out += [f"tier B {r.name}: violation {r.worst_violation:.3g} at {r.witness}" for r in self.tier_b if not r.passed]
        out += [f"trajectory from {r.start}: violation {r.max_violation:.3g} at t={r.witness_time:.4g}"
                for r in self.trajectories if not r.passed]
        return out

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
            return v

        def rec(r):
            return {k: clean(v) for k, v in asdict(r).items()}

        return {
            "verdict": "pass" if self.passed else "fail",
            "tier_a": {"passed": self.tier_a_passed, "constraints": [rec(r) for r in self.tier_a]},
            "tier_b": {"passed": self.tier_b_passed, "conditions": [rec(r) for r in self.tier_b]},
            "trajectories": {"passed": self.trajectories_passed, "runs": [rec(r) for r in self.trajectories]},
            "tolerances": self.tolerances.to_dict(),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def full_check(
    H: HybridSystem,
    cert: "Certificate",
    tolerances: Tolerances | None = None,
    jobs: int = 1,
    tiers: str = "AB",
) -> VerificationReport:
    """Tier A and Tier B verification of ``cert`` against ``H``.

    Raises :class:`CertificateMismatch` when the certificate does not fit the
    system.
    """
    tol = tolerances or Tolerances()
    conds = rebuild_conditions(H, cert)
    a = tier_a(conds, cert, tol) if "A" in tiers else []
    b = tier_b(conds, tol, H.n, jobs) if "B" in tiers else []
    report = VerificationReport(a, b, tol)
    if report.inconsistent:
        log.error("tier A passed but tier B failed: %s", report.failures())
    return report


def falsify(
    H: HybridSystem,
    cert: "Certificate",
    samples: int = 100_000,
    seed: int = 0,
    box=10.0,
    slack: float = 1e-6,
    jobs: int = 1,
) -> list[TierBRecord]:
    """Sampling search for condition violations; returns the failing records."""
    tol = Tolerances(slack=slack, samples=samples, box=box, seed=seed)
    recs = tier_b(rebuild_conditions(H, cert), tol, H.n, jobs)
    return [r for r in recs if not r.passed]


# -- continuous simulation ----------------------------------------------------------

OVERFLOW = 1e8


@dataclass
class Trajectory:
    location: str
    t: np.ndarray
    X: np.ndarray
    diverged: bool = False


def _grid(T: float, h: float) -> tuple[int, float]:
    if not (h > 0) or not (T >= 0):
        raise ValueError(f"need h > 0 and T >= 0, got h={h}, T={T}")
    steps = max(0, math.ceil(T / h - 1e-9))
    return steps, (T / steps if steps else h)


def rk4_step(f: Callable, x: tuple, h: float) -> tuple:
    k1 = f(*x)
    k2 = f(*[a + 0.5 * h * b for a, b in zip(x, k1)])
    k3 = f(*[a + 0.5 * h * b for a, b in zip(x, k2)])
    k4 = f(*[a + h * b for a, b in zip(x, k3)])
    return tuple(a + h / 6.0 * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(x, k1, k2, k3, k4))


def _scalar_field(H: HybridSystem, mode: str):
    return compile_scalar(list(H.mode(mode).field), H.vars)


def simulate_continuous(H: HybridSystem, mode: str, x0: Sequence[float], T: float, h: float = 1e-3) -> Trajectory:
    """Classical RK4 with ``ceil(T/h)`` equal steps (so the last one lands on ``T``).

    Stops early and flags ``diverged`` once ``|x|`` exceeds the overflow guard.
    """
    steps, dt = _grid(T, h)
    f = _scalar_field(H, mode)
    x = tuple(float(v) for v in x0)
    if len(x) != H.n:
        raise ValueError(f"start state has {len(x)} components, system has {H.n}")
    out = [x]
    diverged = False
    for _ in range(steps):
        try:
            x = rk4_step(f, x, dt)
        except OverflowError:
            diverged = True
            break
        if not all(math.isfinite(v) for v in x) or max(abs(v) for v in x) > OVERFLOW:
            diverged = True
            break
        out.append(x)
    X = np.array(out)
    return Trajectory(mode, dt * np.arange(len(X)), X, diverged)


def simulate_batch(H: HybridSystem, mode: str, X0: np.ndarray, T: float, h: float = 1e-3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised RK4 for many starts at once: ``(t, states[step, run, var], diverged[run])``.

    Diverged runs are frozen (NaN from then on).
    """
    steps, dt = _grid(T, h)
    fs = compile_polynomials(list(H.mode(mode).field), H.vars)

    def F(X):
        return np.column_stack([f(X) for f in fs])

    X = np.array(X0, dtype=float, ndmin=2)
    out = np.empty((steps + 1,) + X.shape)
    out[0] = X
    dead = np.zeros(len(X), dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(steps):
            k1 = F(X)
            k2 = F(X + 0.5 * dt * k1)
            k3 = F(X + 0.5 * dt * k2)
            k4 = F(X + dt * k3)
            X = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = ~np.all(np.isfinite(X), axis=1) | (np.max(np.abs(X), axis=1) > OVERFLOW)
            dead |= bad
            X[dead] = np.nan
            out[k + 1] = X
    return dt * np.arange(steps + 1), out, dead


def check_exponential_bound(
    phi: Polynomial, trajectory: Trajectory, lam, h: float | None = None, vars: Sequence[str] | None = None
) -> tuple[float, float, bool]:
    """``max_t phi(x(t)) - phi(x0) e^{lam t}`` with its time; pass iff ``<= 1e-6 + 10 h``."""
    order = tuple(vars) if vars is not None else phi.vars
    (f,) = compile_polynomials([phi], order)
    vals = f(trajectory.X)
    bound = vals[0] * np.exp(float(lam) * trajectory.t)
    gap = vals - bound
    i = int(np.argmax(gap))
    step = h if h is not None else (trajectory.t[1] - trajectory.t[0] if len(trajectory.t) > 1 else 0.0)
    return float(gap[i]), float(trajectory.t[i]), bool(gap[i] <= 1e-6 + 10 * step)


def trajectory_check(
    H: HybridSystem,
    cert: "Certificate",
    runs: int = 100,
    T: float = 20.0,
    h: float = 1e-3,
    seed: int = 0,
    box=10.0,
    allowance: float | None = None,
) -> list[TrajectoryRecord]:
    """Exponential-bound check on seeded starts drawn from each location's initial set.

    ``allowance`` defaults to ``1e-6 + 10 h``.
    """
    allow = 1e-6 + 10 * h if allowance is None else allowance
    out = []
    bounds = box_bounds(box, H.n)
    for m in H.modes:
        if m.init.is_empty:
            continue
        starts = sample_region(m.init.polys, H.vars, bounds, runs, _seed_for(seed, f"traj[{m.id}]")).points
        t, S, dead = simulate_batch(H, m.id, starts, T, h)
        (f,) = compile_polynomials([cert.barriers[m.id].bind(H.vars)], H.vars)
        lam = float(cert.lambdas[m.id])
        unsafe = m.unsafe
        for r in range(len(starts)):
            X = S[:, r, :]
            ok = np.all(np.isfinite(X), axis=1)
            X = X[ok]
            tt = t[ok]
            vals = f(X)
            gap = vals - vals[0] * np.exp(lam * tt)
            i = int(np.argmax(gap))
            hit = bool(unsafe.mask(X, H.vars).any()) if not unsafe.is_empty else False
            out.append(TrajectoryRecord(starts[r].tolist(), m.id, float(gap[i]), float(tt[i]),
                                        bool(gap[i] <= allow) and not hit, hit, bool(dead[r])))
    return out


# -- hybrid simulation -------------------------------------------------------------


@dataclass
class Segment:
    location: str
    t: np.ndarray
    X: np.ndarray


@dataclass
class JumpEvent:
    time: float
    edge: str
    source: str
    target: str
    pre: list[float]
    post: list[float]


@dataclass
class HybridTrajectory:
    segments: list[Segment]
    jumps: list[JumpEvent]
    status: str = "ok"  # ok | blocked | diverged | jump-cap
    policy: str = "eager"
    seed: int = 0
    message: str = ""

    @property
    def flagged(self) -> bool:
        return self.status != "ok"

    def rows(self, vars: Sequence[str], barriers: Mapping[str, Polynomial] | None = None) -> list[list]:
        """CSV rows ``t, x1..xn, location, phi`` (phi blank without a certificate)."""
        out = []
        evals = {}
        if barriers:
            for l, p in barriers.items():
                evals[l] = compile_polynomials([p.bind(vars)], vars)[0]
        for s in self.segments:
            phis = evals[s.location](s.X) if s.location in evals else [None] * len(s.X)
            for t, x, v in zip(s.t, s.X, phis):
                out.append([float(t), *map(float, x), s.location, None if v is None else float(v)])
        return out


class _GuardEval:
    def __init__(self, t: Transition, vars: Sequence[str]):
        self.t = t
        self.fs = compile_scalar(list(t.guard.polys), vars) if t.guard.polys else None

    def margin(self, x) -> float:
        """``min_i g_i(x)``: guard holds iff >= 0."""
        if self.fs is None:
            return math.inf
        return min(self.fs(*x))

    def entry(self, f, x, y, step: float, resolution: float) -> float | None:
        """Earliest sub-step at which the flow from ``x`` enters the guard, if any.

        Each inequality that turns nonnegative during the step is bisected on
        its own, so thin shells crossed within one step are still caught.
        """
        if self.fs is None or self.margin(x) >= 0:
            return None
        gx, gy = self.fs(*x), self.fs(*y)
        best = None
        crossing = [i for i, (a, b) in enumerate(zip(gx, gy)) if a < 0 <= b]
        if self.margin(y) >= 0:
            crossing.append(-1)
        for i in crossing:
            test = (lambda z: self.margin(z)) if i < 0 else (lambda z, i=i: self.fs(*z)[i])
            lo, hi = 0.0, step
            while hi - lo > resolution:
                mid = 0.5 * (lo + hi)
                if test(rk4_step(f, x, mid)) >= 0:
                    hi = mid
                else:
                    lo = mid
            if self.margin(rk4_step(f, x, hi)) >= -1e-9 and (best is None or hi < best):
                best = hi
        return best


def _reset_point(H: HybridSystem, t: Transition, x, rng, bounds: np.ndarray) -> np.ndarray | None:
    """A post state for a general reset: rejection first, then projection."""
    if t.identity_reset:
        return np.array(x, dtype=float)
    n = H.n
    sub = {v: float(c) for v, c in zip(H.vars, x)}
    polys = [r.substitute(sub).bind(H.primed_vars) for r in t.reset.polys]
    fs = compile_polynomials(polys, H.primed_vars) if polys else []
    lo, hi = bounds[:, 0], bounds[:, 1]
    X = lo + (hi - lo) * rng.random((20_000, n))
    ok = _violation(fs, X) <= 0
    if ok.any():
        return X[np.argmax(ok)]
    pts = _project_points(polys, H.primed_vars, lo, hi, rng, 1)
    return pts[0] if len(pts) else None


def simulate_hybrid(
    H: HybridSystem,
    start: tuple[str, Sequence[float]],
    T: float,
    h: float = 1e-3,
    policy: str = "eager",
    seed: int = 0,
    max_jumps: int = 10_000,
    box=10.0,
    time_resolution: float = 1e-9,
) -> HybridTrajectory:
    """Run the hybrid system with RK4 flows and guard-triggered jumps.

    ``eager`` jumps at the first guard entry, located by bisection on the
    step length down to ``time_resolution``.  ``uniform-delay`` looks ahead
    while the guard holds and jumps at a seeded uniformly chosen step of that
    window (possibly never, if the window runs past ``T``).
    """
    if policy not in ("eager", "uniform-delay"):
        raise ValueError(f"unknown jump policy {policy!r}")
    loc, x0 = start
    mode = H.mode(loc)
    x = tuple(float(v) for v in x0)
    if len(x) != H.n:
        raise ValueError(f"start state has {len(x)} components, system has {H.n}")
    if not mode.init.is_empty and not mode.init.contains(dict(zip(H.vars, x)), 1e-9):
        log.warning("start state %s is not in the initial set of location %s", x, loc)
    rng = np.random.default_rng(seed)
    bounds = box_bounds(box, H.n)
    steps, dt = _grid(T, h)
    fields = {m.id: _scalar_field(H, m.id) for m in H.modes}
    guards = {m.id: [_GuardEval(t, H.vars) for t in H.outgoing(m.id)] for m in H.modes}
    invs = {m.id: (compile_scalar(list(m.invariant.polys), H.vars) if m.invariant.polys else None) for m in H.modes}

    def in_inv(l, y) -> bool:
        g = invs[l]
        return g is None or min(g(*y)) >= -1e-9

    segments: list[Segment] = []
    jumps: list[JumpEvent] = []
    t = 0.0
    seg_t, seg_x = [t], [x]
    status, message = "ok", ""

    def close_segment():
        segments.append(Segment(loc, np.array(seg_t), np.array(seg_x)))

    def do_jump(ge: _GuardEval, y, when):
        nonlocal loc, x, t, seg_t, seg_x
        post = _reset_point(H, ge.t, y, rng, bounds)
        if post is None:
            return False
        close_segment()
        jumps.append(JumpEvent(when, ge.t.edge, ge.t.source, ge.t.target, list(map(float, y)), post.tolist()))
        loc, x, t = ge.t.target, tuple(float(v) for v in post), when
        seg_t, seg_x = [t], [x]
        return True

    pending: tuple[_GuardEval, float] | None = None  # uniform-delay: (transition, jump time)
    just_jumped = False
    while t < T - 1e-12:
        f = fields[loc]
        # a guard already holding at the very start counts as an entry; after a
        # jump only fresh entries fire, otherwise eager runs would ping-pong
        if pending is None:
            ready = [g for g in guards[loc] if g.margin(x) >= 0]
            if ready and not just_jumped:
                if policy == "eager":
                    if not do_jump(ready[0], x, t):
                        status, message = "blocked", f"reset of {ready[0].t.edge} has no post state"
                        break
                    just_jumped = True
                    if len(jumps) >= max_jumps:
                        status, message = "jump-cap", f"{max_jumps} jumps reached"
                        break
                    continue
                pending = _schedule(ready, x, t, T, dt, f, rng)
        just_jumped = False
        if pending is not None and pending[1] <= t + 1e-12:
            ge = pending[0]
            pending = None
            if not do_jump(ge, x, t):
                status, message = "blocked", f"reset of {ge.t.edge} has no post state"
                break
            if len(jumps) >= max_jumps:
                status, message = "jump-cap", f"{max_jumps} jumps reached"
                break
            just_jumped = True
            continue
        step = min(dt, T - t)
        try:
            y = rk4_step(f, x, step)
        except OverflowError:
            status, message = "diverged", f"overflow at t={t:.6g}"
            break
        if not all(math.isfinite(v) for v in y) or max(abs(v) for v in y) > OVERFLOW:
            status, message = "diverged", f"state norm above {OVERFLOW:g} at t={t + step:.6g}"
            break
        if pending is None:
            best = None
            for g in guards[loc]:
                s = g.entry(f, x, y, step, time_resolution)
                if s is not None and (best is None or s < best[1]):
                    best = (g, s)
            if best is not None:
                g, s = best
                z = rk4_step(f, x, s)
                if policy == "eager":
                    seg_t.append(t + s)
                    seg_x.append(z)
                    if not do_jump(g, z, t + s):
                        status, message = "blocked", f"reset of {g.t.edge} has no post state"
                        break
                    just_jumped = True
                    if len(jumps) >= max_jumps:
                        status, message = "jump-cap", f"{max_jumps} jumps reached"
                        break
                    continue
                # uniform-delay: the entry point becomes a step of this segment
                t += s
                x = z
                seg_t.append(t)
                seg_x.append(x)
                pending = _schedule([gg for gg in guards[loc] if gg.margin(x) >= -1e-9], x, t, T, dt, f, rng)
                continue
        if not in_inv(loc, y):
            if pending is not None or any(g.margin(x) >= 0 for g in guards[loc]):
                ge = pending[0] if pending is not None else next(g for g in guards[loc] if g.margin(x) >= 0)
                pending = None
                if do_jump(ge, x, t):
                    just_jumped = True
                    continue
            status, message = "blocked", f"invariant of location {loc} violated at t={t + step:.6g} with no enabled transition"
            break
        t += step
        x = y
        seg_t.append(t)
        seg_x.append(x)
    close_segment()
    return HybridTrajectory(segments, jumps, status, policy, seed, message)


def _schedule(ready: list[_GuardEval], x, t: float, T: float, dt: float, f, rng) -> tuple[_GuardEval, float] | None:
    """Pick an enabled transition and a uniform jump time inside its guard window."""
    if not ready:
        return None
    g = ready[int(rng.integers(len(ready)))]
    # look ahead on the same step grid while the guard keeps holding
    times = [t]
    y, s = x, t
    while s < T - 1e-12:
        step = min(dt, T - s)
        y = rk4_step(f, y, step)
        s += step
        if g.margin(y) < 0 or not all(math.isfinite(v) for v in y):
            break
        times.append(s)
    return g, times[int(rng.integers(len(times)))]


# -- level sets -------------------------------------------------------------------


@dataclass
class LevelSet:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # shape (len(ys), len(xs))
    contours: list[np.ndarray]  # each (k, 2) in plot coordinates
    xvar: str
    yvar: str


def level_set(
    phi: Polynomial,
    vars: Sequence[str],
    xvar: str,
    yvar: str,
    xrange: tuple[float, float],
    yrange: tuple[float, float],
    nx: int = 400,
    ny: int = 400,
    fixed: Mapping[str, float] | None = None,
    level: float = 0.0,
    max_cells: int = 1_000_000,
) -> LevelSet:
    """Evaluate ``phi`` on a grid and trace its ``level`` contour by marching squares."""
    from skimage.measure import find_contours

    if nx * ny > max_cells:
        raise GridTooLarge(f"{nx}x{ny} grid exceeds {max_cells} cells")
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 points per axis")
    vars = tuple(vars)
    for v in (xvar, yvar):
        if v not in vars:
            raise ValueError(f"unknown plot variable {v!r}")
    fixed = dict(fixed or {})
    missing = [v for v in vars if v not in (xvar, yvar) and v not in fixed]
    if missing:
        raise ValueError(f"fixed values needed for {missing}")
    xs = np.linspace(*xrange, nx)
    ys = np.linspace(*yrange, ny)
    GX, GY = np.meshgrid(xs, ys)
    cols = []
    for v in vars:
        if v == xvar:
            cols.append(GX.ravel())
        elif v == yvar:
            cols.append(GY.ravel())
        else:
            cols.append(np.full(GX.size, float(fixed[v])))
    (f,) = compile_polynomials([phi.bind(vars)], vars)
    Z = f(np.column_stack(cols)).reshape(GX.shape)
    contours = []
    if Z.min() < level < Z.max():
        for c in find_contours(Z, level):
            r, q = c[:, 0], c[:, 1]
            contours.append(np.column_stack([np.interp(q, np.arange(nx), xs), np.interp(r, np.arange(ny), ys)]))
    return LevelSet(xs, ys, Z, contours, xvar, yvar)
