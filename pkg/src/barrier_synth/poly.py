"""Sparse multivariate polynomials with exact rational coefficients.

A :class:`Polynomial` is bound to an ordered tuple of variable names and stores
its terms as ``{exponent tuple: Fraction}``.  Exponent tuples are dense over the
variable tuple, so a monomial never stores a variable it does not use in any
meaningful way (its exponent is 0) and two equal polynomials over the same
variables always have identical term maps.

Binary operations between polynomials over different variable tuples unify the
variables by name: the result is over the left operand's variables followed by
any new names from the right operand.
"""

from __future__ import annotations

import re
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

Monomial = tuple[int, ...]
Scalar = Union[int, Fraction, float, str]


def as_rational(value: Scalar) -> Fraction:
    """Convert a scalar to an exact ``Fraction``.

    Floats go through their shortest round-trip decimal string, so ``0.1``
    becomes ``1/10`` and ``as_rational(repr(f)) == as_rational(f)``.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not polynomial coefficients")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not np.isfinite(value):
            raise ValueError(f"non-finite coefficient {value!r}")
        return Fraction(repr(float(value)))
    if isinstance(value, (np.floating, np.integer)):
        return as_rational(value.item())
    if isinstance(value, str):
        return Fraction(value.strip())
    raise TypeError(f"cannot convert {type(value).__name__} to a rational")


class Polynomial:
    """Immutable polynomial over named variables with rational coefficients."""

    __slots__ = ("vars", "terms", "_hash")

    def __init__(self, vars: Sequence[str], terms: Mapping[Monomial, Scalar] | None = None):
        self.vars: tuple[str, ...] = tuple(vars)
        if len(set(self.vars)) != len(self.vars):
            raise ValueError(f"duplicate variable names in {self.vars}")
        n = len(self.vars)
        clean: dict[Monomial, Fraction] = {}
        for mono, coef in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != n or any(e < 0 for e in mono):
                raise ValueError(f"bad exponent tuple {mono} for variables {self.vars}")
            c = as_rational(coef)
            if c:
                clean[mono] = clean.get(mono, Fraction(0)) + c
                if not clean[mono]:
                    del clean[mono]
        self.terms: dict[Monomial, Fraction] = clean
        self._hash = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, vars: Sequence[str]) -> "Polynomial":
        return cls(vars)

    @classmethod
    def constant(cls, vars: Sequence[str], value: Scalar) -> "Polynomial":
        return cls(vars, {(0,) * len(tuple(vars)): value})

    @classmethod
    def variable(cls, vars: Sequence[str], name: str) -> "Polynomial":
        vars = tuple(vars)
        if name not in vars:
            raise KeyError(f"unknown variable {name!r}")
        mono = tuple(1 if v == name else 0 for v in vars)
        return cls(vars, {mono: 1})

    @classmethod
    def monomial(cls, vars: Sequence[str], exponents: Monomial, coef: Scalar = 1) -> "Polynomial":
        return cls(vars, {tuple(exponents): coef})

    @classmethod
    def _raw(cls, vars: tuple[str, ...], terms: dict[Monomial, Fraction]) -> "Polynomial":
        # terms must already be canonical (no zeros, right arity)
        p = cls.__new__(cls)
        p.vars = vars
        p.terms = terms
        p._hash = None
        return p

    # -- variable handling --------------------------------------------------

    def bind(self, vars: Sequence[str]) -> "Polynomial":
        """Re-express over ``vars``; every variable actually used must be present."""
        vars = tuple(vars)
        if vars == self.vars:
            return self
        index = {v: i for i, v in enumerate(vars)}
        for i, v in enumerate(self.vars):
            if v not in index and any(m[i] for m in self.terms):
                raise ValueError(f"variable {v!r} is used but not in {vars}")
        out: dict[Monomial, Fraction] = {}
        for mono, c in self.terms.items():
            new = [0] * len(vars)
            for i, e in enumerate(mono):
                if e:
                    new[index[self.vars[i]]] = e
            out[tuple(new)] = c
        return Polynomial._raw(vars, out)

    def rename(self, mapping: Mapping[str, str]) -> "Polynomial":
        """Rename variables (e.g. ``x1 -> x1'``) keeping their positions."""
        return Polynomial._raw(tuple(mapping.get(v, v) for v in self.vars), dict(self.terms))

    def _unify(self, other: "Polynomial") -> tuple["Polynomial", "Polynomial"]:
        if self.vars == other.vars:
            return self, other
        merged = self.vars + tuple(v for v in other.vars if v not in self.vars)
        return self.bind(merged), other.bind(merged)

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            return other
        return Polynomial.constant(self.vars, as_rational(other))

    # -- ring operations ----------------------------------------------------

    def __add__(self, other) -> "Polynomial":
        a, b = self._unify(self._coerce(other))
        out = dict(a.terms)
        for mono, c in b.terms.items():
            s = out.get(mono, Fraction(0)) + c
            if s:
                out[mono] = s
            else:
                out.pop(mono, None)
        return Polynomial._raw(a.vars, out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial._raw(self.vars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            return self.scale(other)
        a, b = self._unify(other)
        out: dict[Monomial, Fraction] = {}
        for m1, c1 in a.terms.items():
            for m2, c2 in b.terms.items():
                mono = tuple(x + y for x, y in zip(m1, m2))
                out[mono] = out.get(mono, Fraction(0)) + c1 * c2
        return Polynomial._raw(a.vars, {m: c for m, c in out.items() if c})

    def __rmul__(self, other) -> "Polynomial":
        return self * other

    def scale(self, factor: Scalar) -> "Polynomial":
        f = as_rational(factor)
        if not f:
            return Polynomial._raw(self.vars, {})
        return Polynomial._raw(self.vars, {m: c * f for m, c in self.terms.items()})

    def __truediv__(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if not other.is_constant() or other.is_zero():
                raise ZeroDivisionError("can only divide by a nonzero constant")
            other = other.constant_term()
        f = as_rational(other)
        if not f:
            raise ZeroDivisionError("division by zero")
        return self.scale(1 / f)

    def __pow__(self, k: int) -> "Polynomial":
        if not isinstance(k, int) or k < 0:
            raise ValueError("exponent must be a non-negative integer")
        result = Polynomial.constant(self.vars, 1)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            try:
                other = self._coerce(other)
            except TypeError:
                return NotImplemented
        a, b = self._unify(other)
        return a.terms == b.terms

    def __hash__(self) -> int:
        if self._hash is None:
            used = self._used_vars()
            p = self.bind(used)
            self._hash = hash((p.vars, frozenset(p.terms.items())))
        return self._hash

    def _used_vars(self) -> tuple[str, ...]:
        return tuple(v for i, v in enumerate(self.vars) if any(m[i] for m in self.terms))

    # -- queries ------------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def is_constant(self) -> bool:
        return all(not any(m) for m in self.terms)

    def constant_term(self) -> Fraction:
        return self.terms.get((0,) * len(self.vars), Fraction(0))

    def coefficient(self, mono: Monomial) -> Fraction:
        return self.terms.get(tuple(mono), Fraction(0))

    def total_degree(self) -> int:
        """Largest total degree over the terms; the zero polynomial has degree 0."""
        return max((sum(m) for m in self.terms), default=0)

    def degree_in(self, names: Iterable[str]) -> int:
        idx = [self.vars.index(v) for v in names if v in self.vars]
        return max((sum(m[i] for i in idx) for m in self.terms), default=0)

    def homogeneous_part(self, degree: int) -> "Polynomial":
        return Polynomial._raw(self.vars, {m: c for m, c in self.terms.items() if sum(m) == degree})

    def derivative(self, name: str) -> "Polynomial":
        i = self.vars.index(name)
        out: dict[Monomial, Fraction] = {}
        for mono, c in self.terms.items():
            e = mono[i]
            if e:
                new = mono[:i] + (e - 1,) + mono[i + 1:]
                out[new] = c * e
        return Polynomial._raw(self.vars, out)

    def substitute(self, values: Mapping[str, Scalar]) -> "Polynomial":
        """Partially evaluate at exact rational values."""
        vals = {self.vars.index(k): as_rational(v) for k, v in values.items() if k in self.vars}
        out: dict[Monomial, Fraction] = {}
        for mono, c in self.terms.items():
            f = c
            new = list(mono)
            for i, v in vals.items():
                if mono[i]:
                    f *= v ** mono[i]
                    new[i] = 0
            key = tuple(new)
            out[key] = out.get(key, Fraction(0)) + f
        return Polynomial._raw(self.vars, {m: c for m, c in out.items() if c})

    def eval(self, point: Mapping[str, float]) -> float:
        """Evaluate at a point given as ``{name: value}`` by direct term summation."""
        values = []
        for i, v in enumerate(self.vars):
            if v in point:
                values.append(float(point[v]))
            elif any(m[i] for m in self.terms):
                raise KeyError(f"variable {v!r} is not bound in the evaluation point")
            else:
                values.append(0.0)
        total = 0.0
        for mono, c in self.terms.items():
            term = float(c)
            for x, e in zip(values, mono):
                if e:
                    term *= x ** e
            total += term
        return total

    def eval_exact(self, point: Mapping[str, Scalar]) -> Fraction:
        p = self.substitute(point)
        if not p.is_constant():
            missing = [v for v in p._used_vars()]
            raise KeyError(f"variables {missing} are not bound in the evaluation point")
        return p.constant_term()

    def evaluator(self, order: Sequence[str] | None = None) -> Callable[[np.ndarray], np.ndarray]:
        """Vectorised float evaluator taking an ``(N, len(order))`` array."""
        return compile_polynomials([self], order)[0]

    # -- presentation -------------------------------------------------------

    def sorted_terms(self) -> list[tuple[Monomial, Fraction]]:
        """Terms in graded-lexicographic order, highest degree first."""
        return sorted(self.terms.items(), key=lambda mc: (-sum(mc[0]), tuple(-e for e in mc[0])))

    def to_string(self, decimal: bool = False) -> str:
        """Render in the textual syntax accepted by :func:`parse_polynomial`."""
        if not self.terms:
            return "0"
        parts = []
        for mono, c in self.sorted_terms():
            factors = []
            for v, e in zip(self.vars, mono):
                if e == 1:
                    factors.append(v)
                elif e > 1:
                    factors.append(f"{v}^{e}")
            mag = abs(c)
            if decimal:
                cs = repr(float(mag))
            elif mag.denominator == 1:
                cs = str(mag.numerator)
            else:
                cs = f"{mag.numerator}/{mag.denominator}"
            if factors and mag == 1:
                body = "*".join(factors)
            elif factors:
                body = cs + "*" + "*".join(factors)
            else:
                body = cs
            sign = "-" if c < 0 else "+"
            parts.append((sign, body))
        first_sign, first_body = parts[0]
        out = ("-" if first_sign == "-" else "") + first_body
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out

    def __str__(self) -> str:
        return self.to_string()

    def __repr__(self) -> str:
        return f"Polynomial({self.to_string()!r}, vars={self.vars})"


def lie_derivative(phi: Polynomial, field: Sequence[Polynomial]) -> Polynomial:
    """Sum over i of d(phi)/d(x_i) * field[i], with ``field`` in ``phi.vars`` order."""
    if len(field) != len(phi.vars):
        raise ValueError(
            f"vector field has {len(field)} components but phi has {len(phi.vars)} variables"
        )
    result = Polynomial.zero(phi.vars)
    for name, fi in zip(phi.vars, field):
        d = phi.derivative(name)
        if not d.is_zero():
            result = result + d * fi.bind(phi.vars)
    return result


def total_degree(p: Polynomial) -> int:
    return p.total_degree()


def monomials_up_to(nvars: int, degree: int) -> list[Monomial]:
    """All exponent tuples of total degree <= ``degree``, graded then lexicographic."""
    out: list[Monomial] = []

    def rec(prefix: list[int], remaining: int, slots: int):
        if slots == 1:
            out.append(tuple(prefix + [remaining]))
            return
        for e in range(remaining, -1, -1):
            rec(prefix + [e], remaining - e, slots - 1)

    for d in range(degree + 1):
        if nvars == 0:
            if d == 0:
                out.append(())
            continue
        rec([], d, nvars)
    return out


def compile_polynomials(polys: Sequence[Polynomial], order: Sequence[str] | None = None):
    """Compile polynomials into fast vectorised evaluators.

    Each returned callable maps an ``(N, n)`` float array (columns in ``order``)
    to an ``(N,)`` array.  Coefficients are rounded to float here, once.
    """
    if order is None:
        order = polys[0].vars if polys else ()
    order = tuple(order)
    fns = []
    for p in polys:
        q = p.bind(order)
        exprs = []
        for mono, c in q.terms.items():
            factors = [repr(float(c))]
            for i, e in enumerate(mono):
                if e == 1:
                    factors.append(f"X[:, {i}]")
                elif e > 1:
                    factors.append(f"X[:, {i}]**{e}")
            exprs.append("*".join(factors))
        body = " + ".join(exprs) if exprs else "0.0"
        src = f"def _f(X):\n    X = _np.asarray(X, dtype=float)\n    return _np.zeros(X.shape[0]) + ({body})\n"
        scope = {"_np": np}
        exec(compile(src, "<polynomial>", "exec"), scope)
        fns.append(scope["_f"])
    return fns


def compile_scalar(polys: Sequence[Polynomial], order: Sequence[str] | None = None):
    """Compile polynomials into one plain-float function ``f(*x) -> tuple``.

    Cheaper than the vectorised form when integrating a single trajectory.
    """
    if order is None:
        order = polys[0].vars if polys else ()
    order = tuple(order)
    args = [f"a{i}" for i in range(len(order))]
    outs = []
    for p in polys:
        q = p.bind(order)
        exprs = []
        for mono, c in q.terms.items():
            factors = [repr(float(c))]
            for i, e in enumerate(mono):
                if e == 1:
                    factors.append(args[i])
                elif e > 1:
                    factors.append(f"{args[i]}**{e}")
            exprs.append("*".join(factors))
        outs.append(" + ".join(exprs) if exprs else "0.0")
    src = f"def _f({', '.join(args)}):\n    return ({', '.join(outs)}{',' if len(outs) == 1 else ''})\n"
    scope: dict = {}
    exec(compile(src, "<polynomial>", "exec"), scope)
    return scope["_f"]


# -- parsing -------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*'?)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


class PolynomialSyntaxError(ValueError):
    pass


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolynomialSyntaxError(f"unexpected character {text[pos:].strip()[:1]!r} at {pos} in {text!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, vars: tuple[str, ...]):
        self.text = text
        self.vars = vars
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def fail(self, msg: str):
        pos = self.peek()[2]
        raise PolynomialSyntaxError(f"{msg} at position {pos} in {self.text!r}")

    def parse(self) -> Polynomial:
        if not self.tokens:
            self.fail("empty polynomial")
        p = self.expr()
        if self.i != len(self.tokens):
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return p

    def expr(self) -> Polynomial:
        p = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            q = self.term()
            p = p + q if op == "+" else p - q
        return p

    def term(self) -> Polynomial:
        p = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            q = self.unary()
            if op == "*":
                p = p * q
            else:
                if not q.is_constant() or q.is_zero():
                    self.fail("division only by nonzero constants is supported")
                p = p / q
        return p

    def unary(self) -> Polynomial:
        if self.peek()[1] == "-":
            self.take()
            return -self.unary()
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Polynomial:
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            kind, value, _ = self.take()
            if kind != "num" or not value.isdigit():
                self.fail("exponent must be a non-negative integer literal")
            base = base ** int(value)
        return base

    def atom(self) -> Polynomial:
        kind, value, _ = self.peek()
        if kind == "num":
            self.take()
            return Polynomial.constant(self.vars, Fraction(value))
        if kind == "name":
            self.take()
            if value not in self.vars:
                self.fail(f"unknown variable {value!r}")
            return Polynomial.variable(self.vars, value)
        if value == "(":
            self.take()
            p = self.expr()
            if self.peek()[1] != ")":
                self.fail("missing ')'")
            self.take()
            return p
        self.fail("expected a number, variable or '('")


def parse_polynomial(text: str, vars: Sequence[str]) -> Polynomial:
    """Parse ``text`` such as ``-x1 + (1/3)*x1^3 - x2`` over the variables ``vars``.

    Literals are exact: ``0.01`` is ``1/100``.  Division is allowed only by
    constant subexpressions.  ``**`` is accepted as a synonym for ``^``.
    """
    return _Parser(str(text), tuple(vars)).parse()
