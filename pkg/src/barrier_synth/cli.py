"""Command-line front end: ``barrier-synth <command> ...``.

Exit codes: 0 success / pass, 1 exhausted / fail / witness found, 2 bad input.
Every command writes a ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .check import (
    CertificateMismatch,
    GridTooLarge,
    Tolerances,
    box_bounds,
    falsify,
    full_check,
    level_set,
    simulate_hybrid,
)
from .poly import PolynomialSyntaxError, as_rational
from .synthesis import Certificate, SearchConfig, sweep_report, synthesize
from .system import HybridSystem, SystemFormatError, load_system, resolve_system_path

log = logging.getLogger("barrier_synth")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# -- argument parsing helpers --------------------------------------------------------


def parse_degrees(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+)\s*)?", text)
    if not m:
        raise argparse.ArgumentTypeError(f"degree range must look like 2..10, got {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) else lo
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty degree range {text!r}")
    return lo, hi


def parse_rationals(text: str) -> list[Fraction]:
    try:
        return [as_rational(v) for v in text.split(",") if v.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}: {exc}") from None


def parse_rational(text: str) -> Fraction:
    try:
        return as_rational(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad number {text!r}: {exc}") from None


def parse_gamma(text: str):
    """``1`` for every edge, or ``1->2=1,2->1=0``."""
    if "=" not in text:
        return parse_rational(text)
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        edge, _, val = item.partition("=")
        out[edge.strip()] = parse_rational(val)
    return out


def parse_box(text: str):
    """``10`` -> [-10,10]^n, ``lo,hi`` for every axis, or ``lo1,hi1,lo2,hi2,...``."""
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad box {text!r}") from None
    if len(vals) == 1:
        if vals[0] <= 0:
            raise argparse.ArgumentTypeError("box half-width must be positive")
        return vals[0]
    if len(vals) % 2:
        raise argparse.ArgumentTypeError(f"box needs lo,hi pairs, got {text!r}")
    pairs = tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))
    if any(lo >= hi for lo, hi in pairs):
        raise argparse.ArgumentTypeError(f"box has an empty interval: {text!r}")
    return pairs[0] if len(pairs) == 1 else pairs


def parse_start(text: str, H: HybridSystem) -> tuple[str, tuple[float, ...]]:
    """``1:(0.05,0,0)`` or ``(1.5,0)`` for a single-location system."""
    loc, sep, rest = text.partition(":")
    if not sep:
        loc, rest = H.modes[0].id, text
        if len(H.modes) > 1:
            raise InputError("--from needs a location prefix for a hybrid system, e.g. 1:(0,0,0)")
    loc = loc.strip()
    try:
        H.mode(loc)
    except KeyError:
        raise InputError(f"unknown location {loc!r}") from None
    try:
        vals = tuple(float(v) for v in rest.strip().strip("()[]").split(",") if v.strip())
    except ValueError:
        raise InputError(f"bad start state {rest!r}") from None
    if len(vals) != H.n:
        raise InputError(f"start state has {len(vals)} components, system has {H.n}")
    return loc, vals


# -- manifest ------------------------------------------------------------------------


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunManifest:
    def __init__(self, command: str, argv: Sequence[str], out_dir: Path):
        self.command = command
        self.argv = list(argv)
        self.out_dir = out_dir
        self.inputs: list[dict] = []
        self.outputs: list[Path] = []
        self.config: dict = {}
        self.seed = 0
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def add_input(self, path: Path, role: str) -> None:
        self.inputs.append({"role": role, "path": str(path), "sha256": sha256(path)})

    def output(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def write(self, exit_code: int) -> Path:
        path = self.out_dir / "manifest.json"
        doc = {
            "tool": "barrier-synth",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "inputs": self.inputs,
            "config": self.config,
            "seed": self.seed,
            "outputs": [{"path": str(p), "sha256": sha256(p)} for p in self.outputs if p.exists()],
            "exit_code": exit_code,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path


def _load_system(arg: str, manifest: RunManifest) -> HybridSystem:
    try:
        path = resolve_system_path(arg)
    except FileNotFoundError:
        raise InputError(f"system file not found: {arg}") from None
    manifest.add_input(path, "system")
    return load_system(path)


def _load_cert(arg: str, manifest: RunManifest) -> Certificate:
    path = Path(arg)
    if not path.exists():
        raise InputError(f"certificate file not found: {arg}")
    manifest.add_input(path, "certificate")
    try:
        return Certificate.load(path)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{arg}: malformed certificate ({exc})") from None


def _tolerances(args, cert: Certificate | None = None) -> Tolerances:
    base = cert.tolerances if cert is not None else Tolerances()
    return Tolerances(
        coef=base.coef,
        min_eig=base.min_eig,
        slack=base.slack,
        samples=args.samples if getattr(args, "samples", None) else base.samples,
        box=args.box if getattr(args, "box", None) is not None else base.box,
        seed=args.seed,
    )


def _config(args) -> SearchConfig:
    kw = dict(
        d_min=args.deg[0],
        d_max=args.deg[1],
        epsilon=args.epsilon,
        gammas=args.gamma,
        tol_eq=args.tol_eq,
        tol_psd=args.tol_psd,
        seed=args.seed,
        jobs=args.jobs,
        tolerances=_tolerances(args),
    )
    if args.lambdas is not None:
        kw["lambdas"] = args.lambdas
    return SearchConfig(**kw)


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, m: RunManifest) -> int:
    H = _load_system(args.system, m)
    cfg = _config(args)
    m.config, m.seed = cfg.to_dict(), args.seed
    result = synthesize(H, cfg)
    attempts = m.output("attempts.csv")
    from .synthesis import SweepTable

    SweepTable(result.attempts).to_csv(attempts)
    if not result.found:
        print(f"exhausted: no certificate for {H.name or args.system}", file=sys.stderr)
        print(result.summary(), file=sys.stderr)
        return EXIT_FAIL
    cert = result.certificate
    cert.to_json(m.output("certificate.json"))
    cert.report.to_json(m.output("report.json"))
    lam = {k: str(v) for k, v in cert.lambdas.items()}
    print(f"certificate found: degree {cert.degree}, lambda {lam}")
    for l, p in cert.barriers.items():
        print(f"  phi[{l}] = {p.to_string(decimal=True)}")
    return EXIT_OK


def cmd_check(args, m: RunManifest) -> int:
    H = _load_system(args.system, m)
    cert = _load_cert(args.certificate, m)
    tol = _tolerances(args, cert)
    m.config, m.seed = {"tolerances": tol.to_dict()}, args.seed
    report = full_check(H, cert, tol, jobs=args.jobs)
    report.to_json(m.output("report.json"))
    if report.passed:
        print("pass")
        return EXIT_OK
    print("fail", file=sys.stderr)
    for line in report.failures():
        print("  " + line, file=sys.stderr)
    return EXIT_FAIL


def cmd_sweep(args, m: RunManifest) -> int:
    H = _load_system(args.system, m)
    cfg = _config(args)
    m.config, m.seed = cfg.to_dict(), args.seed
    table = sweep_report(H, cfg)
    text = table.to_csv(m.output("sweep.csv"))
    print(text, end="")
    return EXIT_OK


def cmd_simulate(args, m: RunManifest) -> int:
    H = _load_system(args.system, m)
    cert = _load_cert(args.certificate, m) if args.certificate else None
    loc, x0 = parse_start(args.start, H)
    m.config = {"from": [loc, list(x0)], "T": args.T, "h": args.h, "policy": args.policy, "box": args.box}
    m.seed = args.seed
    tr = simulate_hybrid(H, (loc, x0), args.T, args.h, args.policy, args.seed, box=args.box if args.box is not None else 10.0)
    path = m.output("trajectory.csv")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *H.vars, "location", "phi"])
        for row in tr.rows(H.vars, cert.barriers if cert else None):
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
    jumps = m.output("jumps.csv")
    with jumps.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "edge", *[f"pre_{v}" for v in H.vars], *[f"post_{v}" for v in H.vars]])
        for j in tr.jumps:
            w.writerow([repr(float(j.time)), j.edge, *(repr(float(v)) for v in (*j.pre, *j.post))])
    print(f"{len(tr.segments)} segments, {len(tr.jumps)} jumps, status {tr.status}" + (f": {tr.message}" if tr.message else ""))
    return EXIT_OK


def cmd_falsify(args, m: RunManifest) -> int:
    H = _load_system(args.system, m)
    cert = _load_cert(args.certificate, m)
    box = args.box if args.box is not None else cert.tolerances.box
    m.config, m.seed = {"samples": args.samples, "box": np.asarray(box_bounds(box, H.n)).tolist()}, args.seed
    bad = falsify(H, cert, samples=args.samples, seed=args.seed, box=box, jobs=args.jobs)
    out = m.output("falsify.json")
    out.write_text(json.dumps([{"condition": r.name, "violation": r.worst_violation, "witness": r.witness} for r in bad], indent=2) + "\n")
    if not bad:
        print(f"no violation found in {args.samples} samples per condition")
        return EXIT_OK
    for r in bad:
        print(f"witness for {r.name}: x = {r.witness}, violation {r.worst_violation:.6g}")
    return EXIT_FAIL


def _pair(text: str) -> tuple[float, float]:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise argparse.ArgumentTypeError(f"range must be lo,hi with lo < hi, got {text!r}")
    return vals[0], vals[1]


def _grid(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)(?:x(\d+))?", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"grid must look like 400x400, got {text!r}")
    nx = int(m.group(1))
    return nx, int(m.group(2)) if m.group(2) else nx


def cmd_levelset(args, m: RunManifest) -> int:
    H = _load_system(args.system, m)
    cert = _load_cert(args.certificate, m)
    loc = args.location or H.modes[0].id
    if loc not in cert.barriers:
        raise InputError(f"certificate has no barrier for location {loc!r}")
    xvar = args.x or H.vars[0]
    yvar = args.y or (H.vars[1] if H.n > 1 else None)
    if yvar is None:
        raise InputError("level sets need two plot variables")
    fixed = {}
    for item in args.fix or []:
        k, _, v = item.partition("=")
        fixed[k.strip()] = float(v)
    nx, ny = args.grid
    m.config = {"location": loc, "x": xvar, "y": yvar, "xrange": args.xrange, "yrange": args.yrange,
                "grid": [nx, ny], "fixed": fixed}
    try:
        ls = level_set(cert.barriers[loc], H.vars, xvar, yvar, args.xrange, args.yrange, nx, ny, fixed)
    except GridTooLarge:
        raise
    except ValueError as exc:
        raise InputError(str(exc)) from None
    grid = m.output("levelset_grid.csv")
    with grid.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([xvar, yvar, "phi"])
        for j, yv in enumerate(ls.ys):
            for i, xv in enumerate(ls.xs):
                w.writerow([repr(float(xv)), repr(float(yv)), repr(float(ls.values[j, i]))])
    cont = m.output("levelset_contours.csv")
    with cont.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["contour", xvar, yvar])
        for k, c in enumerate(ls.contours):
            for p in c:
                w.writerow([k, repr(float(p[0])), repr(float(p[1]))])
    print(f"{len(ls.contours)} zero-level contour(s) on a {nx}x{ny} grid")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="barrier-synth", description="Barrier certificate synthesis and checking.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--box", type=parse_box, default=None, help="sampling box: 10, lo,hi, or lo1,hi1,...")
        if out:
            sp.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")

    def search(sp):
        sp.add_argument("system", help="system JSON file or bundled name (ex1, ex2, ...)")
        sp.add_argument("--lambda", dest="lambdas", type=parse_rationals, default=None,
                        help="comma-separated rates, e.g. 0,-1/8,-0.25,-1")
        sp.add_argument("--deg", type=parse_degrees, default=(2, 10), help="degree range A..B")
        sp.add_argument("--epsilon", type=parse_rational, default=Fraction(1, 100))
        sp.add_argument("--gamma", type=parse_gamma, default=None, help="one value or edge=value,...")
        sp.add_argument("--tol-eq", type=float, default=1e-8)
        sp.add_argument("--tol-psd", type=float, default=1e-8)
        sp.add_argument("--samples", type=int, default=None, help="sampling points per condition")
        common(sp)

    search(sub.add_parser("synth", help="search for a certificate"))
    search(sub.add_parser("sweep", help="full lambda x degree table"))

    sp = sub.add_parser("check", help="verify a certificate")
    sp.add_argument("system")
    sp.add_argument("certificate")
    sp.add_argument("--samples", type=int, default=None)
    common(sp)

    sp = sub.add_parser("falsify", help="sampling search for violations")
    sp.add_argument("system")
    sp.add_argument("certificate")
    sp.add_argument("--samples", type=int, default=100_000)
    common(sp)

    sp = sub.add_parser("simulate", help="simulate a trajectory to CSV")
    sp.add_argument("system")
    sp.add_argument("--from", dest="start", required=True, help='start, e.g. "1:(0.05,0,0)"')
    sp.add_argument("--T", type=float, default=10.0)
    sp.add_argument("--h", type=float, default=1e-3)
    sp.add_argument("--policy", choices=["eager", "uniform-delay"], default="eager")
    sp.add_argument("--certificate", default=None, help="adds a phi column")
    common(sp)

    sp = sub.add_parser("levelset", help="phi on a grid and its zero contour")
    sp.add_argument("system")
    sp.add_argument("certificate")
    sp.add_argument("--location", default=None)
    sp.add_argument("--x", default=None, help="horizontal plot variable")
    sp.add_argument("--y", default=None, help="vertical plot variable")
    sp.add_argument("--xrange", type=_pair, default=(-4.0, 4.0))
    sp.add_argument("--yrange", type=_pair, default=(-4.0, 4.0))
    sp.add_argument("--grid", type=_grid, default=(400, 400))
    sp.add_argument("--fix", action="append", help="value for a non-plotted variable, e.g. x3=0")
    common(sp)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "check": cmd_check,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "falsify": cmd_falsify,
    "levelset": cmd_levelset,
}


def _setup_logging() -> None:
    level = os.environ.get("BARRIER_SYNTH_LOG", "warning").strip().lower()
    levels = {"debug": logging.DEBUG, "2": logging.DEBUG, "verbose": logging.DEBUG,
              "info": logging.INFO, "1": logging.INFO, "warning": logging.WARNING, "0": logging.WARNING,
              "error": logging.ERROR, "quiet": logging.ERROR}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    out_dir = Path(getattr(args, "out_dir", "."))
    manifest = RunManifest(args.command, argv, out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, manifest)
    except (InputError, SystemFormatError, PolynomialSyntaxError, CertificateMismatch, GridTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    if code != EXIT_INPUT:
        manifest.write(code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
