"""Semialgebraic continuous and hybrid systems.

A continuous system is a :class:`HybridSystem` with one mode and no
transitions.  Sets are conjunctions ``p_i(x) >= 0``.  Whether a set with no
defining polynomials is empty or the whole space depends on its role: initial
and unsafe sets use ``[]`` for "empty", invariants and guards for "everywhere".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .poly import Polynomial, PolynomialSyntaxError, compile_polynomials, parse_polynomial


class SystemFormatError(ValueError):
    """Malformed system description; the message carries the JSON location."""


class EmptySetError(RuntimeError):
    """Rejection sampling found no point of the set inside the box."""


def primed(name: str) -> str:
    return name + "'"


@dataclass(frozen=True)
class SemialgebraicSet:
    """``{x | polys[i](x) >= 0 for all i}``, or the empty set when ``empty``."""

    polys: tuple[Polynomial, ...] = ()
    empty: bool = False

    @classmethod
    def empty_set(cls) -> "SemialgebraicSet":
        return cls((), True)

    @classmethod
    def universe(cls) -> "SemialgebraicSet":
        return cls((), False)

    @property
    def is_empty(self) -> bool:
        return self.empty

    @property
    def is_universe(self) -> bool:
        return not self.empty and not self.polys

    def contains(self, point: Mapping[str, float], tol: float = 0.0) -> bool:
        if self.empty:
            return False
        return all(p.eval(point) >= -tol for p in self.polys)

    def mask(self, X: np.ndarray, order: Sequence[str], tol: float = 0.0) -> np.ndarray:
        """Vectorised membership for the rows of ``X`` (columns in ``order``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.empty:
            return np.zeros(X.shape[0], dtype=bool)
        ok = np.ones(X.shape[0], dtype=bool)
        for f in _compiled(self.polys, tuple(order)):
            with np.errstate(all="ignore"):
                ok &= f(X) >= -tol
        return ok

    def to_strings(self) -> list[str]:
        return [p.to_string() for p in self.polys]


@lru_cache(maxsize=512)
def _compiled(polys: tuple[Polynomial, ...], order: tuple[str, ...]):
    return compile_polynomials(polys, order)


def membership(s: SemialgebraicSet, point: Mapping[str, float]) -> bool:
    """True iff every defining polynomial is >= 0; the empty set contains nothing."""
    return s.contains(point)


@dataclass(frozen=True)
class Samples:
    points: np.ndarray
    attempts: int
    hits: int = 0  # accepted draws, including any beyond ``count``

    @property
    def acceptance_rate(self) -> float:
        return self.hits / self.attempts if self.attempts else 0.0

    def __len__(self) -> int:
        return len(self.points)


def sample(
    s: SemialgebraicSet,
    bounds: Sequence[tuple[float, float]] | np.ndarray,
    count: int,
    seed: int,
    order: Sequence[str] | None = None,
    max_attempts: int | None = None,
    batch: int = 200_000,
) -> Samples:
    """Seeded rejection sampling of ``s`` inside the box ``bounds``.

    Returns up to ``count`` points, each satisfying membership.  Raises
    :class:`EmptySetError` if nothing is accepted within the attempt budget.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(bounds)) or np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError(f"bounds must be a finite box, got {bounds.tolist()}")
    n = bounds.shape[0]
    if order is None:
        order = s.polys[0].vars[:n] if s.polys else tuple(f"x{i + 1}" for i in range(n))
    if count == 0:
        return Samples(np.zeros((0, n)), 0)
    if s.empty:
        raise EmptySetError("set appears empty in box (declared empty)")
    budget = max_attempts if max_attempts is not None else max(200 * count, 2_000_000)
    rng = np.random.default_rng(seed)
    lo, hi = bounds[:, 0], bounds[:, 1]
    accepted: list[np.ndarray] = []
    got = 0
    hits = 0
    attempts = 0
    while got < count and attempts < budget:
        k = min(batch, budget - attempts)
        X = lo + (hi - lo) * rng.random((k, n))
        attempts += k
        keep = X[s.mask(X, order)]
        hits += len(keep)
        if len(keep):
            accepted.append(keep[: count - got])
            got += len(accepted[-1])
    if got == 0:
        raise EmptySetError(f"set appears empty in box {bounds.tolist()} after {attempts} attempts")
    return Samples(np.vstack(accepted), attempts, hits)


@dataclass(frozen=True)
class Mode:
    id: str
    field: tuple[Polynomial, ...]
    invariant: SemialgebraicSet = SemialgebraicSet.universe()
    init: SemialgebraicSet = SemialgebraicSet.empty_set()
    unsafe: SemialgebraicSet = SemialgebraicSet.empty_set()


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    guard: SemialgebraicSet = SemialgebraicSet.universe()
    reset: SemialgebraicSet = SemialgebraicSet.universe()
    identity_reset: bool = True

    @property
    def edge(self) -> str:
        return f"{self.source}->{self.target}"


@dataclass(frozen=True)
class HybridSystem:
    vars: tuple[str, ...]
    modes: tuple[Mode, ...]
    transitions: tuple[Transition, ...] = ()
    name: str = ""

    def __post_init__(self):
        if len(self.vars) < 1:
            raise SystemFormatError("a system needs at least one state variable")
        if not self.modes:
            raise SystemFormatError("a system needs at least one mode")
        ids = [m.id for m in self.modes]
        if len(set(ids)) != len(ids):
            raise SystemFormatError(f"duplicate mode ids {ids}")
        for m in self.modes:
            if len(m.field) != len(self.vars):
                raise SystemFormatError(
                    f"mode {m.id}: field has {len(m.field)} components, expected {len(self.vars)}"
                )
        for k, t in enumerate(self.transitions):
            for end in (t.source, t.target):
                if end not in ids:
                    raise SystemFormatError(f"transitions[{k}]: unknown mode {end!r}")

    @property
    def n(self) -> int:
        return len(self.vars)

    @property
    def primed_vars(self) -> tuple[str, ...]:
        return tuple(primed(v) for v in self.vars)

    @property
    def is_continuous(self) -> bool:
        return len(self.modes) == 1 and not self.transitions

    def mode(self, mode_id: str) -> Mode:
        for m in self.modes:
            if m.id == mode_id:
                return m
        raise KeyError(f"no mode {mode_id!r}")

    def outgoing(self, mode_id: str) -> list[Transition]:
        return [t for t in self.transitions if t.source == mode_id]


# -- JSON document -------------------------------------------------------------


def _parse_set(items: Any, vars: tuple[str, ...], where: str, empty_means_empty: bool) -> SemialgebraicSet:
    if items is None:
        items = []
    if not isinstance(items, list) or not all(isinstance(s, (str, int, float)) for s in items):
        raise SystemFormatError(f"{where}: expected a list of polynomial strings")
    polys = []
    for k, text in enumerate(items):
        try:
            polys.append(parse_polynomial(str(text), vars))
        except PolynomialSyntaxError as exc:
            raise SystemFormatError(f"{where}[{k}]: {exc}") from None
    if not polys:
        return SemialgebraicSet.empty_set() if empty_means_empty else SemialgebraicSet.universe()
    return SemialgebraicSet(tuple(polys))


def system_from_dict(doc: Mapping[str, Any], name: str = "") -> HybridSystem:
    if not isinstance(doc, Mapping):
        raise SystemFormatError("top level: expected a JSON object")
    for key in ("vars", "modes"):
        if key not in doc:
            raise SystemFormatError(f"top level: missing field {key!r}")
    vars = doc["vars"]
    if not isinstance(vars, list) or not vars or not all(isinstance(v, str) for v in vars):
        raise SystemFormatError("vars: expected a non-empty list of names")
    vars = tuple(vars)
    if any("'" in v for v in vars):
        raise SystemFormatError("vars: names must not contain a prime")
    both = vars + tuple(primed(v) for v in vars)
    modes_doc = doc["modes"]
    if not isinstance(modes_doc, list) or not modes_doc:
        raise SystemFormatError("modes: expected a non-empty list")
    modes = []
    for i, md in enumerate(modes_doc):
        where = f"modes[{i}]"
        if not isinstance(md, Mapping):
            raise SystemFormatError(f"{where}: expected an object")
        if "id" not in md or "field" not in md:
            raise SystemFormatError(f"{where}: needs 'id' and 'field'")
        field_doc = md["field"]
        if not isinstance(field_doc, list):
            raise SystemFormatError(f"{where}.field: expected a list")
        if len(field_doc) != len(vars):
            raise SystemFormatError(
                f"{where}.field: {len(field_doc)} components for {len(vars)} variables"
            )
        fld = []
        for k, text in enumerate(field_doc):
            try:
                fld.append(parse_polynomial(str(text), vars))
            except PolynomialSyntaxError as exc:
                raise SystemFormatError(f"{where}.field[{k}]: {exc}") from None
        unknown = set(md) - {"id", "field", "invariant", "init", "unsafe"}
        if unknown:
            raise SystemFormatError(f"{where}: unknown fields {sorted(unknown)}")
        modes.append(
            Mode(
                id=str(md["id"]),
                field=tuple(fld),
                invariant=_parse_set(md.get("invariant"), vars, f"{where}.invariant", False),
                init=_parse_set(md.get("init"), vars, f"{where}.init", True),
                unsafe=_parse_set(md.get("unsafe"), vars, f"{where}.unsafe", True),
            )
        )
    transitions = []
    ids = {m.id for m in modes}
    for i, td in enumerate(doc.get("transitions", []) or []):
        where = f"transitions[{i}]"
        if not isinstance(td, Mapping) or "source" not in td or "target" not in td:
            raise SystemFormatError(f"{where}: needs 'source' and 'target'")
        src, dst = str(td["source"]), str(td["target"])
        for label in (src, dst):
            if label not in ids:
                raise SystemFormatError(f"{where}: dangling mode label {label!r}")
        guard = _parse_set(td.get("guard"), vars, f"{where}.guard", False)
        reset_doc = td.get("reset", "identity")
        if reset_doc == "identity":
            transitions.append(Transition(src, dst, guard, SemialgebraicSet.universe(), True))
        else:
            reset = _parse_set(reset_doc, both, f"{where}.reset", False)
            transitions.append(Transition(src, dst, guard, reset, False))
    extra = set(doc) - {"vars", "modes", "transitions", "name", "description"}
    if extra:
        raise SystemFormatError(f"top level: unknown fields {sorted(extra)}")
    return HybridSystem(vars, tuple(modes), tuple(transitions), name=str(doc.get("name", name)))


def load_system(source: str | Path | Mapping[str, Any]) -> HybridSystem:
    """Load a system from a JSON path, a JSON string, or an already parsed dict."""
    if isinstance(source, Mapping):
        return system_from_dict(source)
    text = None
    name = ""
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        text = path.read_text()
        name = path.stem
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemFormatError(f"invalid JSON: {exc}") from None
    return system_from_dict(doc, name=name)


def _set_doc(s: SemialgebraicSet) -> list[str]:
    return s.to_strings()


def render_system(H: HybridSystem) -> dict[str, Any]:
    """Inverse of :func:`system_from_dict` with exact rational coefficients."""
    doc: dict[str, Any] = {"vars": list(H.vars), "modes": [], "transitions": []}
    if H.name:
        doc["name"] = H.name
    for m in H.modes:
        doc["modes"].append(
            {
                "id": m.id,
                "field": [p.to_string() for p in m.field],
                "invariant": _set_doc(m.invariant),
                "init": _set_doc(m.init),
                "unsafe": _set_doc(m.unsafe),
            }
        )
    for t in H.transitions:
        doc["transitions"].append(
            {
                "source": t.source,
                "target": t.target,
                "guard": _set_doc(t.guard),
                "reset": "identity" if t.identity_reset else _set_doc(t.reset),
            }
        )
    return doc


def bundled_system_path(name: str) -> Path:
    """Path of a system shipped with the package (``ex1``, ``ex2``, ...)."""
    here = Path(__file__).parent / "systems"
    stem = Path(name).name
    if stem.endswith(".json"):
        stem = stem[:-5]
    path = here / f"{stem}.json"
    if not path.exists():
        raise FileNotFoundError(name)
    return path


def resolve_system_path(arg: str) -> Path:
    """A filesystem path if it exists, else a bundled system of the same name."""
    p = Path(arg)
    if p.exists():
        return p
    return bundled_system_path(arg)
