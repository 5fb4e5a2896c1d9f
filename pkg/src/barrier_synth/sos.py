"""Sum-of-squares programs for barrier certificates and their Gram-matrix lifting.

Every constraint is a polynomial that must be a sum of squares.  Its
coefficients depend affinely on unknown template coefficients (the barrier
functions and the multipliers), which are represented by
:class:`AffinePolynomial`.  :func:`gram_lift` turns a program into a
block-diagonal :class:`~barrier_synth.sdp.SdpProblem`: one Gram block per
constraint, one free variable per unknown coefficient, one equality row per
monomial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .poly import Monomial, Polynomial, as_rational, monomials_up_to
from .sdp import SdpBuilder, SdpProblem, SdpSolution
from .system import HybridSystem

CONST = None  # key of the constant part inside an affine coefficient

Affine = dict  # {None | unknown id: Fraction}


class DegreeError(ValueError):
    """A constraint has odd top degree that no unknown can cancel."""


class BasisTooLarge(ValueError):
    pass


def _add_affine(into: Affine, other: Affine, factor: Fraction = Fraction(1)) -> None:
    for k, v in other.items():
        s = into.get(k, Fraction(0)) + v * factor
        if s:
            into[k] = s
        else:
            into.pop(k, None)


class AffinePolynomial:
    """Polynomial whose coefficients are affine in unknown symbols.

    ``terms`` maps a monomial to ``{None: constant, uid: coefficient, ...}``.
    """

    __slots__ = ("vars", "terms")

    def __init__(self, vars: Sequence[str], terms: Mapping[Monomial, Affine] | None = None):
        self.vars = tuple(vars)
        self.terms: dict[Monomial, Affine] = {}
        for mono, aff in (terms or {}).items():
            clean = {k: as_rational(v) for k, v in aff.items() if v}
            if clean:
                self.terms[tuple(mono)] = clean

    @classmethod
    def from_polynomial(cls, p: Polynomial) -> "AffinePolynomial":
        return cls(p.vars, {m: {CONST: c} for m, c in p.terms.items()})

    @classmethod
    def zero(cls, vars: Sequence[str]) -> "AffinePolynomial":
        return cls(vars)

    # -- variables ------------------------------------------------------------

    def bind(self, vars: Sequence[str]) -> "AffinePolynomial":
        vars = tuple(vars)
        if vars == self.vars:
            return self
        index = {v: i for i, v in enumerate(vars)}
        out = AffinePolynomial(vars)
        for mono, aff in self.terms.items():
            new = [0] * len(vars)
            for i, e in enumerate(mono):
                if e:
                    if self.vars[i] not in index:
                        raise ValueError(f"variable {self.vars[i]!r} is used but not in {vars}")
                    new[index[self.vars[i]]] = e
            out.terms[tuple(new)] = dict(aff)
        return out

    def rename(self, mapping: Mapping[str, str]) -> "AffinePolynomial":
        out = AffinePolynomial(tuple(mapping.get(v, v) for v in self.vars))
        out.terms = {m: dict(a) for m, a in self.terms.items()}
        return out

    def _unify(self, other: "AffinePolynomial"):
        if self.vars == other.vars:
            return self, other
        merged = self.vars + tuple(v for v in other.vars if v not in self.vars)
        return self.bind(merged), other.bind(merged)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "AffinePolynomial":
        if isinstance(other, Polynomial):
            other = AffinePolynomial.from_polynomial(other)
        elif not isinstance(other, AffinePolynomial):
            other = AffinePolynomial(self.vars, {(0,) * len(self.vars): {CONST: as_rational(other)}})
        a, b = self._unify(other)
        out = AffinePolynomial(a.vars)
        out.terms = {m: dict(v) for m, v in a.terms.items()}
        for mono, aff in b.terms.items():
            cur = out.terms.setdefault(mono, {})
            _add_affine(cur, aff)
            if not cur:
                del out.terms[mono]
        return out

    def __neg__(self) -> "AffinePolynomial":
        return self.scale(-1)

    def __sub__(self, other) -> "AffinePolynomial":
        if isinstance(other, (AffinePolynomial, Polynomial)):
            return self + (-other)
        return self + (-as_rational(other))

    def scale(self, factor) -> "AffinePolynomial":
        f = as_rational(factor)
        out = AffinePolynomial(self.vars)
        if f:
            out.terms = {m: {k: v * f for k, v in a.items()} for m, a in self.terms.items()}
        return out

    def times(self, p: Polynomial) -> "AffinePolynomial":
        """Multiply by a polynomial with constant coefficients."""
        a = self
        pb = p
        if p.vars != self.vars:
            merged = self.vars + tuple(v for v in p.vars if v not in self.vars)
            a = self.bind(merged)
            pb = p.bind(merged)
        out = AffinePolynomial(a.vars)
        for m1, aff in a.terms.items():
            for m2, c in pb.terms.items():
                mono = tuple(x + y for x, y in zip(m1, m2))
                cur = out.terms.setdefault(mono, {})
                _add_affine(cur, aff, c)
                if not cur:
                    del out.terms[mono]
        return out

    def __mul__(self, other) -> "AffinePolynomial":
        if isinstance(other, Polynomial):
            return self.times(other)
        return self.scale(other)

    __rmul__ = __mul__

    def derivative(self, name: str) -> "AffinePolynomial":
        i = self.vars.index(name)
        out = AffinePolynomial(self.vars)
        for mono, aff in self.terms.items():
            e = mono[i]
            if e:
                new = mono[:i] + (e - 1,) + mono[i + 1:]
                out.terms[new] = {k: v * e for k, v in aff.items()}
        return out

    # -- queries --------------------------------------------------------------

    def unknowns(self) -> set[int]:
        return {k for a in self.terms.values() for k in a if k is not CONST}

    def constant_part(self) -> Polynomial:
        return Polynomial(self.vars, {m: a[CONST] for m, a in self.terms.items() if CONST in a})

    def total_degree(self) -> int:
        return max((sum(m) for m in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def substitute(self, values: Mapping[int, object]) -> Polynomial:
        """Plug exact values in for every unknown; missing unknowns count as zero."""
        out: dict[Monomial, Fraction] = {}
        for mono, aff in self.terms.items():
            s = Fraction(0)
            for k, v in aff.items():
                if k is CONST:
                    s += v
                elif k in values:
                    s += v * as_rational(values[k])
            if s:
                out[mono] = s
        return Polynomial(self.vars, out)

    def __repr__(self) -> str:
        return f"AffinePolynomial({self.vars}, {len(self.terms)} terms)"


def lie_derivative_affine(phi: AffinePolynomial, field: Sequence[Polynomial]) -> AffinePolynomial:
    if len(field) != len(phi.vars):
        raise ValueError(f"field has {len(field)} components for {len(phi.vars)} variables")
    out = AffinePolynomial.zero(phi.vars)
    for v, f in zip(phi.vars, field):
        d = phi.derivative(v)
        if d.terms:
            out = out + d.times(f.bind(phi.vars))
    return out


# -- unknowns ----------------------------------------------------------------------


@dataclass(frozen=True)
class Unknown:
    id: int
    owner: str
    monomial: Monomial


class UnknownRegistry:
    """Coefficient symbols of all templates, tagged by owner and monomial."""

    def __init__(self):
        self.unknowns: list[Unknown] = []
        self.templates: dict[str, AffinePolynomial] = {}
        self.degrees: dict[str, int] = {}

    def template(self, owner: str, vars: Sequence[str], degree: int) -> AffinePolynomial:
        """Complete polynomial of ``degree`` in ``vars`` with fresh coefficients."""
        if owner in self.templates:
            raise ValueError(f"duplicate template owner {owner!r}")
        if degree < 0:
            raise ValueError(f"{owner}: negative degree")
        terms = {}
        for mono in monomials_up_to(len(vars), degree):
            uid = len(self.unknowns)
            self.unknowns.append(Unknown(uid, owner, mono))
            terms[mono] = {uid: Fraction(1)}
        t = AffinePolynomial(vars, terms)
        self.templates[owner] = t
        self.degrees[owner] = degree
        return t

    def __len__(self) -> int:
        return len(self.unknowns)

    def owner_ids(self, owner: str) -> list[int]:
        return [u.id for u in self.unknowns if u.owner == owner]

    def owners(self) -> list[str]:
        return list(self.templates)

    def polynomial(self, owner: str, values: Mapping[int, object]) -> Polynomial:
        return self.templates[owner].substitute(values)


# -- program -----------------------------------------------------------------------

KINDS = ("init", "flow", "jump", "unsafe", "multiplier")


@dataclass
class SosConstraint:
    name: str
    kind: str
    tag: str
    expr: AffinePolynomial
    # monomials of odd top degree forced to vanish by equality rows
    eliminated: tuple[Monomial, ...] = ()
    degenerate: bool = False

    @property
    def degree(self) -> int:
        """Degree the Gram basis has to cover (after elimination)."""
        elim = set(self.eliminated)
        return max((sum(m) for m in self.expr.terms if m not in elim), default=0)


@dataclass
class SosProgram:
    system: HybridSystem | None
    constraints: list[SosConstraint]
    unknowns: UnknownRegistry
    lambdas: dict[str, Fraction]
    gammas: dict[str, Fraction]
    epsilon: Fraction
    pinned: frozenset[int] = frozenset()

    def constraint(self, name: str) -> SosConstraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def main_constraints(self) -> list[SosConstraint]:
        return [c for c in self.constraints if c.kind != "multiplier"]

    def with_pins(self, pins: Iterable[int]) -> "SosProgram":
        return replace(self, pinned=frozenset(self.pinned) | frozenset(pins))


def _per_mode(value, H: HybridSystem, what: str) -> dict[str, Fraction]:
    if isinstance(value, Mapping):
        missing = [m.id for m in H.modes if m.id not in value]
        if missing:
            raise ValueError(f"{what} missing for modes {missing}")
        return {m.id: as_rational(value[m.id]) for m in H.modes}
    return {m.id: as_rational(value) for m in H.modes}


def _per_edge(value, H: HybridSystem) -> dict[str, Fraction]:
    out = {}
    for t in H.transitions:
        if isinstance(value, Mapping):
            v = value.get(t.edge, value.get("*", 1))
        else:
            v = value
        g = as_rational(v)
        if g < 0:
            raise ValueError(f"edge {t.edge}: jump factor must be >= 0, got {g}")
        out[t.edge] = g
    return out


def multiplier_degree(target: int, g_degree: int) -> int:
    """Smallest even degree ``m >= 0`` with ``m + g_degree >= target``.

    The product then reaches the degree of the barrier part; an odd top degree
    this may create is removed later by :func:`eliminate_odd_top`.
    """
    m = max(target - g_degree, 0)
    return m + (m % 2)


class _Degrees:
    def __init__(self, spec: int | Mapping[str, int]):
        if isinstance(spec, Mapping):
            self.map = dict(spec)
        else:
            self.map = {"phi": int(spec)}

    def phi(self, mode: str) -> int:
        d = self.map.get(f"phi[{mode}]", self.map.get("phi"))
        if d is None:
            raise ValueError(f"no degree given for phi[{mode}]")
        if d < 1:
            raise ValueError(f"phi[{mode}]: degree must be >= 1, got {d}")
        return int(d)

    def multiplier(self, owner: str, default: int) -> int:
        family = owner.split("[", 1)[0]
        d = self.map.get(owner, self.map.get(family, default))
        d = int(d)
        if d < 0 or d % 2:
            raise ValueError(f"{owner}: multiplier degree must be even and >= 0, got {d}")
        return d


def build_program(
    H: HybridSystem,
    lambdas=0,
    gammas=1,
    epsilon=Fraction(1, 100),
    degrees: int | Mapping[str, int] = 2,
) -> SosProgram:
    """Assemble the SOS program for the given system and parameters.

    ``lambdas`` is one number or a map mode -> number; ``gammas`` one number or
    a map edge label (``"1->2"``) -> number; ``degrees`` is the barrier degree
    or a map with keys ``phi``/``phi[l]`` plus optional multiplier overrides by
    owner (``mu[1][0]``) or family (``mu``).
    """
    eps = as_rational(epsilon)
    if eps <= 0:
        raise ValueError("epsilon must be > 0")
    lam = _per_mode(lambdas, H, "lambda")
    gam = _per_edge(gammas, H)
    deg = _Degrees(degrees)
    reg = UnknownRegistry()
    x = H.vars
    xp = H.primed_vars
    prime_map = dict(zip(x, xp))

    phis = {m.id: reg.template(f"phi[{m.id}]", x, deg.phi(m.id)) for m in H.modes}
    cons: list[SosConstraint] = []
    mults: list[tuple[str, AffinePolynomial]] = []

    def with_multipliers(main: AffinePolynomial, family: str, tag: str, sets: Sequence[Polynomial],
                         mvars: Sequence[str], main_degree: int) -> AffinePolynomial:
        target = main_degree
        expr = main
        for i, g in enumerate(sets):
            owner = f"{family}[{tag}][{i}]"
            m = deg.multiplier(owner, multiplier_degree(target, g.total_degree()))
            s = reg.template(owner, mvars, m)
            mults.append((owner, s))
            expr = expr - s.times(g)
        return expr

    for mode in H.modes:
        l = mode.id
        phi = phis[l]
        d = phi.total_degree()
        if not mode.init.is_empty:
            main = -phi
            expr = with_multipliers(main, "mu", l, mode.init.polys, x, d)
            cons.append(SosConstraint(f"init[{l}]", "init", l, expr))
        lie = lie_derivative_affine(phi, mode.field)
        main = phi.scale(lam[l]) - lie
        expr = with_multipliers(main, "theta", l, mode.invariant.polys, x, main.total_degree())
        cons.append(SosConstraint(f"flow[{l}]", "flow", l, expr))

    for t in H.transitions:
        g = gam[t.edge]
        src = phis[t.source]
        dst = phis[t.target]
        if t.identity_reset:
            main = src.scale(g) - dst
            expr = with_multipliers(main, "kappa", t.edge, t.guard.polys, x, main.total_degree())
        else:
            dst_p = dst.rename(prime_map)
            main = (src.scale(g) - dst_p).bind(x + xp)
            d_main = main.total_degree()
            expr = with_multipliers(main, "kappa", t.edge, t.guard.polys, x, d_main)
            expr = with_multipliers(expr, "sigma", t.edge, [r.bind(x + xp) for r in t.reset.polys], xp, d_main)
            expr = expr.bind(x + xp)
        cons.append(SosConstraint(f"jump[{t.edge}]", "jump", t.edge, expr))

    for mode in H.modes:
        if mode.unsafe.is_empty:
            continue
        l = mode.id
        phi = phis[l]
        main = phi - eps
        expr = with_multipliers(main, "eta", l, mode.unsafe.polys, x, phi.total_degree())
        cons.append(SosConstraint(f"unsafe[{l}]", "unsafe", l, expr))

    for owner, s in mults:
        cons.append(SosConstraint(f"sos:{owner}", "multiplier", owner, s))

    for c in cons:
        _check_odd_top(c)
    return SosProgram(H, cons, reg, lam, gam, eps)


def polynomial_program(polys: Sequence[Polynomial] | Mapping[str, Polynomial]) -> SosProgram:
    """Program asking that each fixed polynomial is a sum of squares."""
    if not isinstance(polys, Mapping):
        polys = {f"p[{i}]": p for i, p in enumerate(polys)}
    cons = [SosConstraint(name, "multiplier", name, AffinePolynomial.from_polynomial(p))
            for name, p in polys.items()]
    return SosProgram(None, cons, UnknownRegistry(), {}, {}, Fraction(0))


def _odd_top(c: SosConstraint) -> tuple[int, list[Monomial]]:
    D = c.expr.total_degree()
    if D % 2 == 0:
        return D, []
    return D, [m for m in c.expr.terms if sum(m) == D]


def _check_odd_top(c: SosConstraint) -> None:
    D, monos = _odd_top(c)
    for m in monos:
        aff = c.expr.terms[m]
        if set(aff) == {CONST}:
            raise DegreeError(
                f"{c.name}: the degree-{D} part has a fixed coefficient on monomial {m}; "
                f"an SOS polynomial needs even degree and no template coefficient can cancel it "
                f"(raise the barrier degree to at least {D} or change the multiplier degrees)"
            )


def eliminate_odd_top(program: SosProgram) -> SosProgram:
    """Force the odd top-degree part of every constraint to vanish.

    The forced monomials are recorded on the constraint and become equality
    rows in :func:`gram_lift`.  Constraints that are entirely of odd top
    degree are flagged as degenerate.
    """
    out = []
    changed = False
    for c in program.constraints:
        D, monos = _odd_top(c)
        if not monos:
            out.append(c)
            continue
        changed = True
        _check_odd_top(c)
        rest = [m for m in c.expr.terms if sum(m) != D]
        out.append(replace(c, eliminated=tuple(sorted(monos, reverse=True)), degenerate=not rest))
    if not changed:
        return program
    return replace(program, constraints=out)


# -- lifting ---------------------------------------------------------------------------


@dataclass
class BlockLayout:
    constraint: str
    block: int
    vars: tuple[str, ...]
    basis: list[Monomial]


@dataclass
class LiftedProgram:
    program: SosProgram
    sdp: SdpProblem
    blocks: list[BlockLayout]
    slack_block: int
    cap_block: int
    # rows: (constraint name, monomial) or ("pin", uid) / ("cap", None)
    row_tags: list[tuple[str, object]]
    dropped: dict[str, list[Monomial]] = field(default_factory=dict)

    def gram_matrices(self, sol: SdpSolution) -> dict[str, np.ndarray]:
        """Gram matrix per constraint: the block value plus the uniform slack."""
        t = float(sol.X[self.slack_block][0, 0])
        out = {}
        for b in self.blocks:
            M = np.array(sol.X[b.block], dtype=float)
            out[b.constraint] = M + t * np.eye(len(M))
        return out

    def unknown_values(self, sol: SdpSolution) -> np.ndarray:
        u = np.array(sol.u, dtype=float)
        for k in self.program.pinned:
            u[k] = 0.0
        return u

    def slack(self, sol: SdpSolution) -> float:
        return float(sol.X[self.slack_block][0, 0])


def _basis_for(c: SosConstraint, pinned: frozenset[int], max_basis: int) -> tuple[list[Monomial], list[Monomial]]:
    n = len(c.expr.vars)
    k = c.degree // 2
    count = math.comb(n + k, k)
    if count > max_basis:
        raise BasisTooLarge(f"{c.name}: {count} basis monomials exceed the cap of {max_basis}")
    basis = monomials_up_to(n, k)
    elim = set(c.eliminated)

    def structurally_zero(mono: Monomial) -> bool:
        if mono in elim:
            return True
        aff = c.expr.terms.get(mono)
        if not aff:
            return True
        return all(kk is not CONST and kk in pinned for kk in aff)

    dropped = []
    changed = True
    while changed:
        changed = False
        current = set(basis)
        for a in list(basis):
            sq = tuple(2 * e for e in a)
            if not structurally_zero(sq):
                continue
            # does any other pair of basis monomials reach 2a?
            if any(
                b != a and tuple(s - e for s, e in zip(sq, b)) in current
                for b in basis
                if all(e <= s for e, s in zip(b, sq))
            ):
                continue
            basis.remove(a)
            current.discard(a)
            dropped.append(a)
            changed = True
    return basis, dropped


def gram_lift(program: SosProgram, max_basis: int = 2000) -> LiftedProgram:
    """Lower an SOS program to a block-diagonal SDP.

    Each constraint ``p`` of degree ``2k`` gets a Gram block ``M = X + t I``
    over the monomials of degree ``<= k`` (minus monomials whose square can
    only carry a zero coefficient).  ``t >= 0`` is a shared slack block,
    capped by ``t + s = 1``; the objective maximises ``t``.
    """
    prog = eliminate_odd_top(program)
    B = SdpBuilder()
    nunk = len(prog.unknowns)
    B.add_free(nunk)
    pinned = frozenset(prog.pinned)
    layouts: list[BlockLayout] = []
    tags: list[tuple[str, object]] = []
    dropped: dict[str, list[Monomial]] = {}

    planned = []
    for c in prog.constraints:
        basis, drop = _basis_for(c, pinned, max_basis)
        if drop:
            dropped[c.name] = drop
        planned.append((c, basis))
    blocks = []
    for c, basis in planned:
        j = B.add_block(len(basis)) if basis else None
        blocks.append(j)
    t_block = B.add_block(1)
    s_block = B.add_block(1)
    B.objective_block(t_block, 0, 0, -1.0)

    for (c, basis), j in zip(planned, blocks):
        if j is not None:
            layouts.append(BlockLayout(c.name, j, c.expr.vars, basis))
        # Gram contributions per monomial
        gram: dict[Monomial, list[tuple[int, int, float]]] = {}
        diag_count: dict[Monomial, int] = {}
        for a in range(len(basis)):
            for b in range(a, len(basis)):
                mono = tuple(x + y for x, y in zip(basis[a], basis[b]))
                gram.setdefault(mono, []).append((a, b, 1.0))
                if a == b:
                    diag_count[mono] = diag_count.get(mono, 0) + 1
        monos = set(gram) | set(c.expr.terms)
        for mono in sorted(monos, key=lambda m: (-sum(m), tuple(-e for e in m))):
            aff = c.expr.terms.get(mono, {})
            const = aff.get(CONST, Fraction(0))
            unk = {k: v for k, v in aff.items() if k is not CONST and k not in pinned}
            entries = gram.get(mono, [])
            if not entries and not unk:
                if const:
                    # 0 = const: infeasible as stated; keep the row so the solver certifies it
                    r = B.add_row(float(const), f"{c.name} {mono}")
                    tags.append((c.name, mono))
                continue
            # sum M_ab - sum_u a_u u = const
            r = B.add_row(float(const), f"{c.name} {mono}")
            tags.append((c.name, mono))
            for a, b, _ in entries:
                B.block_coef(r, j, a, b, 1.0)
            if mono in diag_count:
                B.block_coef(r, t_block, 0, 0, float(diag_count[mono]))
            for k, v in unk.items():
                B.free_coef(r, k, -float(v))

    for k in sorted(pinned):
        r = B.add_row(0.0, f"pin u{k}")
        tags.append(("pin", k))
        B.free_coef(r, k, 1.0)
    r = B.add_row(1.0, "slack cap")
    tags.append(("cap", None))
    B.block_coef(r, t_block, 0, 0, 1.0)
    B.block_coef(r, s_block, 0, 0, 1.0)
    return LiftedProgram(prog, B.build(), layouts, t_block, s_block, tags, dropped)
