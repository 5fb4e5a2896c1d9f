"""Search for barrier certificates over exponent rates and degrees.

For each degree ``d`` (ascending) and each rate ``lambda`` in the candidate
list, the SOS program is built, lowered to an SDP, solved and independently
verified.  A numerically feasible solution that fails verification goes
through prune-and-retry: coefficients below a threshold are pinned to zero and
the SDP is solved again.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .check import Tolerances, VerificationReport, full_check
from .poly import Polynomial, as_rational
from .sdp import FEASIBLE, INFEASIBLE, SdpSolution, SolverOptions, solve
from .sos import BasisTooLarge, DegreeError, LiftedProgram, build_program, gram_lift
from .system import HybridSystem

log = logging.getLogger(__name__)

FORMAT = "barrier-certificate/1"

DEFAULT_LAMBDAS: tuple[Fraction, ...] = (Fraction(-1), Fraction(-1, 2), Fraction(-1, 4), Fraction(-1, 8))


def default_gammas(H: HybridSystem) -> dict[str, Fraction]:
    """1 on every edge, 0 where the reset ignores the pre-state."""
    out = {}
    for t in H.transitions:
        independent = not t.identity_reset and all(
            not (set(r._used_vars()) & set(H.vars)) for r in t.reset.polys
        )
        out[t.edge] = Fraction(0) if independent else Fraction(1)
    return out


@dataclass
class SearchConfig:
    lambdas: Sequence[Any] = DEFAULT_LAMBDAS  # numbers, or per-location maps
    d_min: int = 2
    d_max: int = 10
    epsilon: Fraction = Fraction(1, 100)
    gammas: Any = None  # None -> default_gammas; number or edge map otherwise
    prune_threshold: float = 1e-5
    max_prune_rounds: int = 5
    tol_eq: float = 1e-8
    tol_psd: float = 1e-8
    max_iter: int = 200
    seed: int = 0
    jobs: int = 1
    tolerances: Tolerances = field(default_factory=Tolerances)
    degrees: Mapping[str, int] | None = None  # multiplier degree overrides

    def validate(self) -> None:
        if self.d_min > self.d_max:
            raise ValueError(f"empty degree range {self.d_min}..{self.d_max}")
        if self.d_min < 1:
            raise ValueError("degrees start at 1")
        if as_rational(self.epsilon) <= 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {
            "lambdas": [_lam_doc(l) for l in self.lambdas],
            "d_min": self.d_min,
            "d_max": self.d_max,
            "epsilon": _exact(as_rational(self.epsilon)),
            "gammas": None if self.gammas is None else _lam_doc(self.gammas),
            "prune_threshold": self.prune_threshold,
            "max_prune_rounds": self.max_prune_rounds,
            "tol_eq": self.tol_eq,
            "tol_psd": self.tol_psd,
            "max_iter": self.max_iter,
            "seed": self.seed,
            "jobs": self.jobs,
            "tolerances": self.tolerances.to_dict(),
            "degrees": dict(self.degrees) if self.degrees else None,
        }


def _lam_doc(v):
    if isinstance(v, Mapping):
        return {k: _exact(as_rational(x)) for k, x in v.items()}
    return _exact(as_rational(v))


def _exact(c: Fraction) -> str:
    """Shortest decimal when it is exact, ``p/q`` otherwise."""
    if c.denominator == 1:
        return str(c.numerator)
    f = float(c)
    if math.isfinite(f) and Fraction(repr(f)) == c:
        return repr(f)
    return f"{c.numerator}/{c.denominator}"


# -- certificate ------------------------------------------------------------------


@dataclass
class GramBlock:
    vars: tuple[str, ...]
    basis: list[tuple[int, ...]]
    matrix: np.ndarray


def _poly_doc(p: Polynomial) -> dict:
    return {
        "vars": list(p.vars),
        "terms": [[list(m), _exact(c)] for m, c in p.sorted_terms()],
        "text": p.to_string(decimal=True),
    }


def _poly_from(doc: Mapping) -> Polynomial:
    vars = tuple(doc["vars"])
    terms = {}
    for mono, c in doc["terms"]:
        if len(mono) != len(vars):
            raise ValueError(f"monomial {mono} does not match variables {list(vars)}")
        terms[tuple(int(e) for e in mono)] = Fraction(c)
    return Polynomial(vars, terms)


@dataclass
class Certificate:
    system: str
    vars: tuple[str, ...]
    barriers: dict[str, Polynomial]
    multipliers: dict[str, Polynomial]
    grams: dict[str, GramBlock]
    lambdas: dict[str, Fraction]
    gammas: dict[str, Fraction]
    epsilon: Fraction
    degree: int
    tolerances: Tolerances = field(default_factory=Tolerances)
    provenance: dict = field(default_factory=dict)
    report: VerificationReport | None = None

    def to_dict(self) -> dict:
        doc = {
            "format": FORMAT,
            "system": self.system,
            "vars": list(self.vars),
            "degree": self.degree,
            "lambda": {k: _exact(v) for k, v in self.lambdas.items()},
            "gamma": {k: _exact(v) for k, v in self.gammas.items()},
            "epsilon": _exact(self.epsilon),
            "barriers": {k: _poly_doc(p) for k, p in self.barriers.items()},
            "multipliers": {k: _poly_doc(p) for k, p in self.multipliers.items()},
            "grams": {
                k: {"vars": list(g.vars), "basis": [list(m) for m in g.basis],
                    "matrix": np.asarray(g.matrix, dtype=float).tolist()}
                for k, g in self.grams.items()
            },
            "tolerances": self.tolerances.to_dict(),
            "provenance": self.provenance,
        }
        if self.report is not None:
            doc["report"] = self.report.to_dict()
        return doc

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Certificate":
        if doc.get("format") != FORMAT:
            raise ValueError(f"not a certificate file (format {doc.get('format')!r})")
        tol = doc.get("tolerances") or {}
        box = tol.get("box", 10.0)
        if isinstance(box, list):
            box = tuple(tuple(b) for b in box) if box and isinstance(box[0], list) else tuple(box)
        tolerances = Tolerances(
            coef=tol.get("coef", 1e-6), min_eig=tol.get("min_eig", -1e-7), slack=tol.get("slack", 1e-6),
            samples=tol.get("samples", 10_000), box=box, seed=tol.get("seed", 0),
        )
        return cls(
            system=doc.get("system", ""),
            vars=tuple(doc["vars"]),
            barriers={k: _poly_from(v) for k, v in doc["barriers"].items()},
            multipliers={k: _poly_from(v) for k, v in doc.get("multipliers", {}).items()},
            grams={
                k: GramBlock(tuple(g["vars"]), [tuple(m) for m in g["basis"]],
                             np.array(g["matrix"], dtype=float).reshape(len(g["basis"]), len(g["basis"])))
                for k, g in doc.get("grams", {}).items()
            },
            lambdas={k: Fraction(v) for k, v in doc["lambda"].items()},
            gammas={k: Fraction(v) for k, v in doc.get("gamma", {}).items()},
            epsilon=Fraction(doc["epsilon"]),
            degree=int(doc["degree"]),
            tolerances=tolerances,
            provenance=dict(doc.get("provenance", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Certificate":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)


def certificate_from_solution(
    H: HybridSystem, lifted: LiftedProgram, sol: SdpSolution, degree: int, tolerances: Tolerances, provenance: dict
) -> Certificate:
    prog = lifted.program
    u = lifted.unknown_values(sol)
    values = {k: as_rational(float(v)) for k, v in enumerate(u)}
    barriers, mults = {}, {}
    for owner in prog.unknowns.owners():
        p = prog.unknowns.polynomial(owner, values)
        if owner.startswith("phi["):
            barriers[owner[4:-1]] = p
        else:
            mults[owner] = p
    grams = {}
    for b, M in zip(lifted.blocks, lifted.gram_matrices(sol).values()):
        grams[b.constraint] = GramBlock(tuple(b.vars), list(b.basis), M)
    return Certificate(H.name, tuple(H.vars), barriers, mults, grams, dict(prog.lambdas), dict(prog.gammas),
                       prog.epsilon, degree, tolerances, provenance)


# -- one grid cell ----------------------------------------------------------------

SUCCESS = "success"
FAILED_INFEASIBLE = "infeasible"
FAILED_NUMERICAL = "numerical"
FAILED_VERIFICATION = "verification-failed"


@dataclass
class Attempt:
    lam: Any
    degree: int
    status: str
    reason: str = ""
    seconds: float = 0.0
    slack: float | None = None
    prune_rounds: int = 0
    iterations: int = 0

    @property
    def success(self) -> bool:
        return self.status == SUCCESS

    def row(self) -> dict:
        return {
            "lambda": _lam_doc(self.lam),
            "degree": self.degree,
            "status": self.status,
            "reason": self.reason,
            "seconds": round(self.seconds, 4),
            "slack": "" if self.slack is None else f"{self.slack:.3e}",
            "prune_rounds": self.prune_rounds,
            "iterations": self.iterations,
        }


def _solve(lifted: LiftedProgram, cfg: SearchConfig) -> SdpSolution:
    opts = SolverOptions(tol_eq=cfg.tol_eq, tol_psd=cfg.tol_psd, max_iter=cfg.max_iter, seed=cfg.seed)
    return solve(lifted.sdp, options=opts)


def _degrees(d: int, cfg: SearchConfig):
    if not cfg.degrees:
        return d
    out = dict(cfg.degrees)
    out.setdefault("phi", d)
    return out


def _verify(H, lifted, sol, d, cfg, prov) -> tuple[Certificate, VerificationReport]:
    cert = certificate_from_solution(H, lifted, sol, d, cfg.tolerances, prov)
    report = full_check(H, cert, cfg.tolerances)
    cert.report = report
    return cert, report


@dataclass
class PruneOutcome:
    certificate: Certificate | None
    solution: SdpSolution | None
    rounds: int
    reason: str


def prune_and_retry(
    H: HybridSystem, lifted: LiftedProgram, solution: SdpSolution, cfg: SearchConfig, degree: int | None = None
) -> PruneOutcome:
    """Pin near-zero coefficients to zero and re-solve, up to ``max_prune_rounds`` times.

    Gives up when nothing is below the threshold, when a barrier template
    would become identically zero, or when a re-solve is not feasible.
    """
    d = degree if degree is not None else max(p.total_degree() for p in lifted.program.unknowns.templates.values())
    program = lifted.program
    sol = solution
    for rnd in range(1, cfg.max_prune_rounds + 1):
        u = lifted.unknown_values(sol)
        small = {k for k, v in enumerate(u) if abs(v) < cfg.prune_threshold and k not in program.pinned}
        if not small:
            return PruneOutcome(None, sol, rnd - 1, "no coefficient below the prune threshold")
        pins = program.pinned | small
        for owner in program.unknowns.owners():
            if owner.startswith("phi[") and set(program.unknowns.owner_ids(owner)) <= pins:
                return PruneOutcome(None, sol, rnd, f"pruning empties {owner}")
        program = program.with_pins(small)
        lifted = gram_lift(program)
        sol = _solve(lifted, cfg)
        if sol.status != FEASIBLE:
            return PruneOutcome(None, sol, rnd, f"re-solve after pruning: {sol.status}")
        prov = {"prune_rounds": rnd, "iterations": sol.iterations, "slack": lifted.slack(sol)}
        cert, report = _verify(H, lifted, sol, d, cfg, prov)
        if report.passed:
            return PruneOutcome(cert, sol, rnd, "")
    return PruneOutcome(None, sol, cfg.max_prune_rounds, "prune rounds exhausted")


def attempt(H: HybridSystem, lam, d: int, cfg: SearchConfig) -> tuple[Attempt, Certificate | None]:
    """Build, solve and verify one ``(lambda, d)`` cell."""
    t0 = time.perf_counter()
    gammas = default_gammas(H) if cfg.gammas is None else cfg.gammas
    try:
        program = build_program(H, lam, gammas, cfg.epsilon, _degrees(d, cfg))
        lifted = gram_lift(program)
    except DegreeError as exc:
        return Attempt(lam, d, FAILED_INFEASIBLE, f"degree structure: {exc}", time.perf_counter() - t0), None
    except BasisTooLarge as exc:
        return Attempt(lam, d, FAILED_NUMERICAL, str(exc), time.perf_counter() - t0), None
    sol = _solve(lifted, cfg)
    if sol.status == INFEASIBLE:
        return Attempt(lam, d, FAILED_INFEASIBLE, sol.message, time.perf_counter() - t0, iterations=sol.iterations), None
    if sol.status != FEASIBLE:
        return Attempt(lam, d, FAILED_NUMERICAL, sol.message, time.perf_counter() - t0, iterations=sol.iterations), None
    slack = lifted.slack(sol)
    prov = {"prune_rounds": 0, "iterations": sol.iterations, "slack": slack}
    cert, report = _verify(H, lifted, sol, d, cfg, prov)
    if report.passed:
        return Attempt(lam, d, SUCCESS, "", time.perf_counter() - t0, slack, 0, sol.iterations), cert
    first = "; ".join(report.failures()[:3])
    pr = prune_and_retry(H, lifted, sol, cfg, d)
    if pr.certificate is not None:
        return Attempt(lam, d, SUCCESS, f"after pruning ({first})", time.perf_counter() - t0, slack,
                       pr.rounds, sol.iterations), pr.certificate
    return Attempt(lam, d, FAILED_VERIFICATION, f"{first}; {pr.reason}", time.perf_counter() - t0, slack,
                   pr.rounds, sol.iterations), None


# -- search -----------------------------------------------------------------------


@dataclass
class SynthesisResult:
    certificate: Certificate | None
    attempts: list[Attempt]

    @property
    def found(self) -> bool:
        return self.certificate is not None

    def summary(self) -> str:
        lines = [f"lambda={_lam_doc(a.lam)} d={a.degree}: {a.status}" + (f" ({a.reason})" if a.reason else "")
                 for a in self.attempts]
        return "\n".join(lines)


def cells(cfg: SearchConfig) -> list[tuple[Any, int]]:
    """Sweep order: ascending degree outside, rates in the given order inside."""
    return [(lam, d) for d in range(cfg.d_min, cfg.d_max + 1) for lam in cfg.lambdas]


def _run_cell(args):
    H, lam, d, cfg = args
    return attempt(H, lam, d, cfg)


def synthesize(H: HybridSystem, cfg: SearchConfig | None = None) -> SynthesisResult:
    """First verified certificate in sweep order, or the list of failed attempts."""
    cfg = cfg or SearchConfig()
    cfg.validate()
    grid = cells(cfg)
    attempts: list[Attempt] = []
    if cfg.jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            futs = [ex.submit(_run_cell, (H, lam, d, cfg)) for lam, d in grid]
            try:
                for fut in futs:  # in sweep order, whatever finishes first
                    a, cert = fut.result()
                    attempts.append(a)
                    if cert is not None:
                        return SynthesisResult(cert, attempts)
            finally:
                for fut in futs:
                    fut.cancel()
        return SynthesisResult(None, attempts)
    for lam, d in grid:
        a, cert = attempt(H, lam, d, cfg)
        log.info("lambda=%s d=%d: %s %s (%.2fs)", _lam_doc(lam), d, a.status, a.reason, a.seconds)
        attempts.append(a)
        if cert is not None:
            return SynthesisResult(cert, attempts)
    return SynthesisResult(None, attempts)


@dataclass
class SweepTable:
    rows: list[Attempt]

    def status(self) -> dict[tuple[str, int], str]:
        return {(str(_lam_doc(a.lam)), a.degree): a.status for a in self.rows}

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        cols = ["lambda", "degree", "status", "reason", "seconds", "slack", "prune_rounds", "iterations"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for a in self.rows:
            row = a.row()
            if isinstance(row["lambda"], dict):
                row["lambda"] = json.dumps(row["lambda"], sort_keys=True)
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def sweep_report(H: HybridSystem, cfg: SearchConfig | None = None) -> SweepTable:
    """Every cell of the grid, no early exit."""
    cfg = cfg or SearchConfig()
    grid = cells(cfg)
    if not grid:
        return SweepTable([])
    cfg.validate()
    if cfg.jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(_run_cell, [(H, lam, d, cfg) for lam, d in grid]))
        return SweepTable([a for a, _ in results])
    rows = []
    for lam, d in grid:
        a, _ = attempt(H, lam, d, cfg)
        log.info("lambda=%s d=%d: %s (%.2fs)", _lam_doc(lam), d, a.status, a.seconds)
        rows.append(a)
    return SweepTable(rows)
