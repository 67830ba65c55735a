"""Run configuration: an INI file with [geometry], [problem], [solver], [output].

Example::

    [geometry]
    base = triangle          # or square, hexagon, polygon:5, or "x,y; x,y; ..."
    alpha = 3
    n = 2                    # one level, or levels = 1-4 / 1,2,4
    h_max = 0.05

    [problem]
    mode = solve             # solve | p-sweep | n-sweep | limit-sweep | geometry-only
    p = 3
    q = 2
    k = 0
    f = 80*sin(2*pi*x1)
    g = 0.3*x1
    phi1 = 0.2 - 0.5*((x1-0.5)^2 + (x2-0.288675134594813)^2)^0.5
    phi2 = 0.4

Every field is validated before any computation starts.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .expressions import Expression, ExpressionError, parse_expression
from .fem import ProblemInstance
from .geometry import IfsParams, _check_convex_ccw, regular_polygon
from .solver import SolverConfig

MODES = ("solve", "p-sweep", "n-sweep", "limit-sweep", "geometry-only")
FORMATS = ("csv", "mesh", "solution", "svg", "trace", "vertices")
_NAMED_BASES = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}


class ConfigError(ValueError):
    """Parse or validation failure, located by section, key and line."""

    def __init__(self, message: str, section: str = "", key: str = "",
                 line: Optional[int] = None):
        loc = ".".join(s for s in (section, key) if s)
        prefix = f"[{loc}] " if loc else ""
        suffix = f" (line {line})" if line else ""
        super().__init__(f"{prefix}{message}{suffix}")
        self.section, self.key, self.line, self.reason = section, key, line, message

    def record(self) -> dict:
        return {"section": self.section, "key": self.key,
                "line": self.line if self.line else "", "reason": self.reason}


@dataclass
class GeometryBlock:
    base: np.ndarray
    alpha: float
    levels: tuple
    h_max: float = 0.05
    grading: float = 1.5
    shared_lattice: bool = True
    fibers: bool = True


@dataclass
class ProblemBlock:
    mode: str
    p: float
    q: float
    k: float
    f: Expression
    g: Expression
    phi1: Optional[Expression]
    phi2: Optional[Expression]
    L: Optional[float] = None
    p_schedule: tuple = ()
    t: float = 2.0
    limit_mode: str = "Pq"
    eps: tuple = ()
    audit_probes: int = 50

    def instance(self, p: Optional[float] = None) -> ProblemInstance:
        return ProblemInstance(self.p if p is None else p, self.q, self.k, self.f, self.g,
                               self.phi1, self.phi2, self.L)


@dataclass
class OutputBlock:
    directory: Path
    formats: tuple = FORMATS


@dataclass
class RunConfig:
    geometry: GeometryBlock
    problem: ProblemBlock
    solver: SolverConfig
    output: OutputBlock
    source: Optional[Path] = None
    lines: dict = field(default_factory=dict)


def _line_index(text: str) -> dict:
    """(section, key) -> line number of its first occurrence."""
    out, section = {}, ""
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            out.setdefault((section, ""), i)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        out.setdefault((section, key), i)
    return out


class _Reader:
    def __init__(self, cp: configparser.ConfigParser, lines: dict):
        self.cp, self.lines = cp, lines

    def err(self, section, key, msg):
        return ConfigError(msg, section, key, self.lines.get((section, key)))

    def has(self, section, key):
        return self.cp.has_option(section, key)

    def raw(self, section, key, default=None, required=False):
        if not self.cp.has_option(section, key):
            if required:
                raise ConfigError("missing required key", section, key,
                                  self.lines.get((section, "")))
            return default
        return self.cp.get(section, key).strip()

    def real(self, section, key, default=None, required=False):
        val = self.raw(section, key, None, required)
        if val is None:
            return default
        try:
            out = float(val)
        except ValueError:
            raise self.err(section, key, f"not a number: {val!r}") from None
        if math.isnan(out):
            raise self.err(section, key, "nan is not allowed")
        return out

    def integer(self, section, key, default=None):
        val = self.raw(section, key)
        if val is None:
            return default
        try:
            return int(val)
        except ValueError:
            raise self.err(section, key, f"not an integer: {val!r}") from None

    def boolean(self, section, key, default):
        if not self.cp.has_option(section, key):
            return default
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            raise self.err(section, key, "not a boolean") from None

    def reals(self, section, key, default=()):
        val = self.raw(section, key)
        if val is None:
            return tuple(default)
        try:
            return tuple(float(v) for v in re.split(r"[,\s]+", val) if v)
        except ValueError:
            raise self.err(section, key, f"not a list of numbers: {val!r}") from None

    def expr(self, section, key, required=False, allow_none=False):
        val = self.raw(section, key, None, required)
        if val is None or (allow_none and val.lower() in ("none", "")):
            return None
        try:
            return parse_expression(val)
        except ExpressionError as exc:
            raise self.err(section, key, str(exc)) from None


def _parse_levels(text: str) -> tuple:
    text = text.strip()
    m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        return tuple(range(a, b + 1))
    return tuple(int(v) for v in re.split(r"[,\s]+", text) if v)


def _parse_base(text: str, side: float) -> np.ndarray:
    t = text.strip().lower()
    if t in _NAMED_BASES:
        return regular_polygon(_NAMED_BASES[t], side)
    m = re.fullmatch(r"polygon\s*:\s*(\d+)", t)
    if m:
        return regular_polygon(int(m.group(1)), side)
    pts = [p for p in t.split(";") if p.strip()]
    verts = np.array([[float(c) for c in p.split(",")] for p in pts], dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError("need at least three 'x,y' vertices")
    _check_convex_ccw(verts)
    return verts


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, source=path, overrides=overrides)


def parse_config(text: str, source: Optional[Path] = None,
                 overrides: Optional[dict] = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc.message if hasattr(exc, 'message') else exc}",
                          line=getattr(exc, "lineno", None)) from None
    lines = _line_index(text)
    r = _Reader(cp, lines)
    for section in cp.sections():
        if section not in ("geometry", "problem", "solver", "output"):
            raise ConfigError("unknown section", section, "", lines.get((section, "")))

    # geometry
    side = r.real("geometry", "side", 1.0)
    base_text = r.raw("geometry", "base", "triangle")
    try:
        base = _parse_base(base_text, side)
    except (ValueError, ArithmeticError) as exc:
        raise r.err("geometry", "base", f"bad base polygon: {exc}") from None
    alpha = r.real("geometry", "alpha", 3.0)
    try:
        IfsParams.from_alpha(alpha)
    except ValueError as exc:
        raise r.err("geometry", "alpha", str(exc)) from None
    if r.has("geometry", "levels"):
        try:
            levels = _parse_levels(r.raw("geometry", "levels"))
        except ValueError:
            raise r.err("geometry", "levels", "expected 'a-b' or a comma list") from None
        key = "levels"
    else:
        levels = (r.integer("geometry", "n", 2),)
        key = "n"
    if not levels or any(n < 0 for n in levels):
        raise r.err("geometry", key, "levels must be nonnegative integers")
    geom = GeometryBlock(base, alpha, tuple(sorted(set(levels))),
                         r.real("geometry", "h_max", 0.05), r.real("geometry", "grading", 1.5),
                         r.boolean("geometry", "shared_lattice", True),
                         r.boolean("geometry", "fibers", True))
    if not geom.h_max > 0:
        raise r.err("geometry", "h_max", "h_max must be positive")
    if not geom.grading >= 1:
        raise r.err("geometry", "grading", "grading must be >= 1")

    # problem
    mode = r.raw("problem", "mode", "solve").lower()
    if mode not in MODES:
        raise r.err("problem", "mode", f"mode must be one of {', '.join(MODES)}")
    geometry_only = mode == "geometry-only"
    p = r.real("problem", "p", 3.0)
    q = r.real("problem", "q", 2.0)
    k = r.real("problem", "k", 0.0)
    if not q >= 2:
        raise r.err("problem", "q", f"need q >= 2, got q={q:g}")
    if not p > q:
        raise r.err("problem", "p", f"need p > q, got p={p:g}, q={q:g}")
    if not math.isfinite(k):
        raise r.err("problem", "k", "k must be finite")
    f_expr = r.expr("problem", "f") or parse_expression("0")
    g_expr = r.expr("problem", "g", required=not geometry_only) or parse_expression("0")
    phi1 = r.expr("problem", "phi1", allow_none=True)
    phi2 = r.expr("problem", "phi2", allow_none=True)
    L = r.real("problem", "L")
    if L is not None and L < 0:
        raise r.err("problem", "L", "L must be nonnegative")
    sched = r.reals("problem", "p_schedule", (4, 8, 16, 32, 64))
    if any(b <= a for a, b in zip(sched, sched[1:])):
        raise r.err("problem", "p_schedule", "p_schedule must be strictly increasing")
    if mode == "p-sweep" and (not sched or sched[0] <= q):
        raise r.err("problem", "p_schedule", f"every p must exceed q={q:g}")
    limit_mode = r.raw("problem", "limit_mode", "Pq")
    if limit_mode not in ("Pq", "PqL"):
        raise r.err("problem", "limit_mode", "limit_mode must be Pq or PqL")
    eps = r.reals("problem", "eps", ())
    if any(e < 0 for e in eps):
        raise r.err("problem", "eps", "eps values must be nonnegative")
    prob = ProblemBlock(mode, p, q, k, f_expr, g_expr, phi1, phi2, L, sched,
                        r.real("problem", "t", 2.0), limit_mode, eps,
                        r.integer("problem", "audit_probes", 50))
    if mode in ("solve", "p-sweep") and len(geom.levels) != 1:
        raise r.err("geometry", "levels", f"mode {mode} needs a single level")
    if mode in ("n-sweep", "limit-sweep") and len(geom.levels) < 2:
        raise r.err("geometry", "levels", f"mode {mode} needs at least two levels")

    # solver
    kw = {}
    for fdef in fields(SolverConfig):
        if not r.has("solver", fdef.name):
            continue
        if fdef.name in ("penalty_schedule", "p_continuation"):
            kw[fdef.name] = r.reals("solver", fdef.name)
        elif fdef.name == "bb_stabilization":
            kw[fdef.name] = r.boolean("solver", fdef.name, False)
        elif fdef.name in ("max_iters", "multiplier_updates"):
            kw[fdef.name] = r.integer("solver", fdef.name)
        else:
            kw[fdef.name] = r.real("solver", fdef.name)
    known = {fd.name for fd in fields(SolverConfig)}
    if cp.has_section("solver"):
        for key in cp.options("solver"):
            if key not in known:
                raise r.err("solver", key, "unknown solver option")
    try:
        solver = SolverConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc), "solver", "", lines.get(("solver", ""))) from None

    # output
    overrides = overrides or {}
    out_dir = overrides.get("out") or r.raw("output", "directory", "out")
    fmt_text = r.raw("output", "formats")
    formats = FORMATS
    if fmt_text:
        formats = tuple(s.strip().lower() for s in fmt_text.split(",") if s.strip())
        bad = [s for s in formats if s not in FORMATS]
        if bad:
            raise r.err("output", "formats", f"unknown format {bad[0]!r}")
    out = OutputBlock(Path(out_dir), formats)
    return RunConfig(geom, prob, solver, out, source, lines)
