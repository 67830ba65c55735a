"""Parameter sweeps in p and in the pre-fractal level n.

Fields living on different meshes are compared on a shared uniform grid:
values by barycentric interpolation, gradients as the piecewise-constant
element gradient of the containing triangle.  Outside the level-n domain a
solution is continued by the boundary datum g.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fem import (EnergyOverflowError, Field, InfeasibleError, ProblemInstance, element_gradients,
                  interpolate, lp_gradient_norm)
from .fem import energy as discrete_energy
from .fem import DiscreteField
from .fibers import build_fibers, recovery_sequence
from .geometry import IfsParams, PrefractalDomain, build_domain, regular_polygon
from .meshing import Mesh, lattice_points, prolongate, refine, triangulate
from .solver import (DiscreteSolution, LimitConstraint, SolverConfig, solve_limit_q,
                     solve_lipschitz, solve_ppq)

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 3.0
DEFAULT_LOAD_AMPLITUDE = 80.0


def default_base() -> np.ndarray:
    return regular_polygon(3)


def default_instance(k: float = 0.0, p: float = 3.0, q: float = 2.0) -> ProblemInstance:
    """Triangle-base experiment: g = 0.3 x1, cone lower obstacle, flat upper one.

    phi1 = 0.2 - 0.5 |x - c| peaks at the centroid c of the unit triangle and
    stays below g on every level's boundary; phi2 = 0.4.  The load
    80 sin(2 pi x1) makes both obstacles active at p = 3.
    """
    c = default_base().mean(axis=0)
    amp = DEFAULT_LOAD_AMPLITUDE
    return ProblemInstance(
        p, q, k,
        f=lambda x: amp * np.sin(2.0 * np.pi * x[:, 0]),
        g=lambda x: 0.3 * x[:, 0],
        phi1=lambda x: 0.2 - 0.5 * np.hypot(x[:, 0] - c[0], x[:, 1] - c[1]),
        phi2=lambda x: np.full(len(x), 0.4),
        L=0.3)


# ---------------------------------------------------------------- reports

@dataclass
class SweepPoint:
    param: float
    energy: float
    sup_diff: float          # to the final (limit or finest) field
    w1t: float               # ||grad u||_t (p axis) or pairwise W^{1,p} surrogate (n axis)
    max_gradient: float
    runtime: float
    converged: bool = True
    message: str = ""
    extra: dict = field(default_factory=dict)


CSV_COLUMNS = ("param", "energy", "sup_diff", "w1t", "max_gradient", "runtime", "converged")


@dataclass
class SweepReport:
    axis: str
    points: list
    limit_bound: float
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in ("p", "n"):
            raise ValueError("axis must be 'p' or 'n'")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(pt, name) for pt in self.points], dtype=float)

    def extra_column(self, name: str) -> np.ndarray:
        return np.array([pt.extra.get(name, math.nan) for pt in self.points], dtype=float)

    @property
    def ok(self) -> bool:
        return all(pt.converged for pt in self.points)

    def to_csv(self, path=None, extra_columns: Sequence[str] = (),
               columns: Sequence[str] = CSV_COLUMNS) -> str:
        """One row per sweep point; drop "runtime" from ``columns`` for reproducible files."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("axis",) + tuple(columns) + tuple(extra_columns))
        for pt in self.points:
            row = [self.axis] + [_fmt(getattr(pt, c)) for c in columns]
            row += [_fmt(pt.extra.get(c, math.nan)) for c in extra_columns]
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> str:
        lines = [f"axis: {self.axis}", f"points: {len(self.points)}",
                 f"limit_bound: {_fmt(self.limit_bound)}", f"all_converged: {self.ok}"]
        for key in sorted(self.extra):
            val = self.extra[key]
            if isinstance(val, (bool, int, float, str, np.floating, np.bool_)):
                lines.append(f"{key}: {_fmt(val)}")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


# ------------------------------------------------------- extension by g

@dataclass(frozen=True, eq=False)
class ExtendedField:
    """A level-n solution continued by the boundary datum g outside the mesh."""
    level: int
    mesh: Mesh
    values: np.ndarray
    g: Field

    def _split(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts, self.mesh.locate(pts)

    def __call__(self, points) -> np.ndarray:
        pts, tri = self._split(points)
        out = np.asarray(self.g(pts), dtype=float).copy()
        inside = tri >= 0
        if np.any(inside):
            t = tri[inside]
            verts = self.mesh.vertices[self.mesh.triangles[t]]
            bary = _barycentric(verts, pts[inside])
            out[inside] = np.einsum("ij,ij->i", bary, self.values[self.mesh.triangles[t]])
        return out

    def gradient(self, points, h: float = 1e-6) -> np.ndarray:
        """Element gradient inside the mesh, central-difference gradient of g outside."""
        pts, tri = self._split(points)
        out = np.empty((len(pts), 2))
        inside = tri >= 0
        G = element_gradients(self.mesh, self.values)
        out[inside] = G[tri[inside]]
        rest = pts[~inside]
        if len(rest):
            ex, ey = np.array([h, 0.0]), np.array([0.0, h])
            out[~inside, 0] = (self.g(rest + ex) - self.g(rest - ex)) / (2 * h)
            out[~inside, 1] = (self.g(rest + ey) - self.g(rest - ey)) / (2 * h)
        return out


def _barycentric(verts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b, c = verts[:, 0], verts[:, 1], verts[:, 2]
    v0, v1, v2 = b - a, c - a, pts - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def evaluation_grid(domain: PrefractalDomain, spacing: Optional[float] = None) -> tuple:
    """Cell-centred uniform grid points inside the closed domain, and the spacing."""
    if spacing is None:
        spacing = 0.5 * domain.min_segment_length
    lo = domain.boundary.min(axis=0)
    hi = domain.boundary.max(axis=0)
    xs = np.arange(lo[0] + 0.5 * spacing, hi[0], spacing)
    ys = np.arange(lo[1] + 0.5 * spacing, hi[1], spacing)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts[domain.contains(pts, closed=True)], spacing


def grid_distances(a: ExtendedField, b: ExtendedField, grid: np.ndarray, spacing: float,
                   p: float) -> dict:
    """sup, L^p and W^{1,p} surrogates of a - b on a uniform grid."""
    dv = a(grid) - b(grid)
    dg = a.gradient(grid) - b.gradient(grid)
    w = spacing * spacing
    lp = float((w * np.sum(np.abs(dv) ** p)) ** (1.0 / p))
    semi = float((w * np.sum(np.hypot(dg[:, 0], dg[:, 1]) ** p)) ** (1.0 / p))
    return {"sup": float(np.max(np.abs(dv))) if len(dv) else 0.0, "lp": lp, "grad_lp": semi,
            "w1p": float((lp ** p + semi ** p) ** (1.0 / p))}


# ---------------------------------------------------------------- p sweep

def _safe_energy(instance, mesh, values) -> float:
    try:
        return discrete_energy(instance, DiscreteField(mesh, values))
    except EnergyOverflowError:
        return math.inf


def p_sweep(instance: ProblemInstance, mesh: Mesh, p_schedule: Sequence[float], t: float = 2.0,
            config: SolverConfig = SolverConfig(), warm_start: bool = True,
            compare_limit: bool = True) -> SweepReport:
    """Solve for each p (ascending), then compare against the matching limit problem.

    Rows carry the sup distance to the limit solution and ||grad u_p||_t; the
    consecutive sup differences sit in ``extra['sup_prev']``.  A trailing row
    with param = inf holds the limit solution itself.
    """
    sched = [float(p) for p in p_schedule]
    if any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("p_schedule must be strictly increasing")
    if sched and sched[0] <= instance.q:
        raise ValueError(f"every p must exceed q={instance.q}")
    L = instance.lipschitz(mesh.vertices)
    cap = LimitConstraint.from_data(L, instance.k)
    notes, sols, points = [], [], []
    u = None
    for p in sched:
        inst = instance.with_p(p)
        t0 = time.perf_counter()
        try:
            sol = solve_ppq(inst, mesh, config, u0=u if warm_start else None)
        except (EnergyOverflowError, InfeasibleError, FloatingPointError) as exc:
            notes.append(f"p={p:g}: {exc}")
            points.append(SweepPoint(p, math.nan, math.nan, math.nan, math.nan,
                                     time.perf_counter() - t0, False, str(exc)))
            sols.append(None)
            continue
        runtime = time.perf_counter() - t0
        if not sol.converged:
            notes.append(f"p={p:g}: {sol.message}")
        prev = next((s for s in reversed(sols) if s is not None), None)
        sup_prev = float(np.max(np.abs(sol.values - prev.values))) if prev is not None else math.nan
        points.append(SweepPoint(p, _safe_energy(inst, mesh, sol.values), math.nan,
                                 lp_gradient_norm(mesh, sol.values, t), sol.max_gradient,
                                 runtime, sol.converged, sol.message,
                                 {"sup_prev": sup_prev, "iterations": sol.iterations,
                                  "lower_active": len(sol.active_sets["lower"]),
                                  "upper_active": len(sol.active_sets["upper"])}))
        sols.append(sol)
        if warm_start:
            u = sol.values
    extra = {"t": t, "lipschitz": L, "t_bound": float(np.sum(mesh.areas)) ** (1.0 / t) * cap.M}
    if compare_limit:
        t0 = time.perf_counter()
        if L * L + instance.k ** 2 <= 1.0:
            lim = solve_limit_q(instance, mesh, cap, config)
            extra["limit_problem"] = "Pq"
        else:
            lim = solve_lipschitz(instance, mesh, config, u0=u)
            extra["limit_problem"] = "PqL"
        runtime = time.perf_counter() - t0
        for pt, sol in zip(points, sols):
            if sol is not None:
                pt.sup_diff = float(np.max(np.abs(sol.values - lim.values)))
        points.append(SweepPoint(math.inf, lim.energy, 0.0, lp_gradient_norm(mesh, lim.values, t),
                                 lim.max_gradient, runtime, lim.converged, lim.message,
                                 {"iterations": lim.iterations}))
        extra["limit_solution"] = lim
        if not lim.converged:
            notes.append(f"limit problem: {lim.message}")
    last = next((pt for pt in reversed(points) if math.isfinite(pt.param) and pt.converged), None)
    if last is not None:
        extra["final_max_gradient"] = last.max_gradient
        extra["bound_ok"] = bool(last.max_gradient <= cap.M + 0.05)
    extra["solutions"] = sols
    return SweepReport("p", points, cap.M, notes, extra)


def decreasing_within(seq, jitter: float = 0.10) -> bool:
    """Each term at most (1 + jitter) times the smallest earlier term."""
    seq = [float(s) for s in seq]
    best = math.inf
    for s in seq:
        if not math.isfinite(s) or s > (1.0 + jitter) * best:
            return False
        best = min(best, s)
    return True


# ---------------------------------------------------------------- n sweep

@dataclass
class Level:
    n: int
    domain: PrefractalDomain
    mesh: Mesh
    instance: ProblemInstance


def build_levels(base: np.ndarray, alpha: float, levels: Sequence[int], h_max: float,
                 instance_for_level: Callable[[int], ProblemInstance], grading: float = 1.5,
                 shared_lattice: bool = True) -> list:
    """Domains and meshes per level.

    With ``shared_lattice`` every mesh contains the same equilateral lattice
    of interior vertices (spacing 0.9 h_max), so the interior triangulations
    agree across levels and level-to-level differences are not swamped by
    unrelated discretization error.
    """
    ifs = IfsParams.from_alpha(alpha)
    doms = [build_domain(base, n, ifs) for n in levels]
    seeds = None
    if shared_lattice and doms:
        ring = np.vstack([d.boundary for d in doms])
        seeds = lattice_points(ring.min(axis=0), ring.max(axis=0), 0.9 * h_max)
    return [Level(n, dom, triangulate(dom, h_max, grading=grading, seed_points=seeds),
                  instance_for_level(n)) for n, dom in zip(levels, doms)]


def _level_family(instance, instance_for_level):
    if instance_for_level is not None:
        return instance_for_level
    return lambda n: instance


def n_sweep(instance: Optional[ProblemInstance], base: np.ndarray, alpha: float,
            levels: Sequence[int], h_max: float = 0.05, config: SolverConfig = SolverConfig(),
            instance_for_level: Optional[Callable[[int], ProblemInstance]] = None,
            grid_spacing: Optional[float] = None, grading: float = 1.5,
            shared_lattice: bool = True) -> SweepReport:
    """Solve the level-n problems, extend by g, and compare on a shared grid.

    ``w1t`` of row n is the W^{1,p} surrogate of (u~_n - u~_{n+1}); the last
    row has nan there.  Recovery fields v_n use the finest-level solution
    extended by g as the target field.
    """
    levels = sorted(int(n) for n in levels)
    family = _level_family(instance, instance_for_level)
    built = build_levels(base, alpha, levels, h_max, family, grading, shared_lattice)
    fields, sols, notes = [], [], []
    points = []
    for lev in built:
        t0 = time.perf_counter()
        try:
            sol = solve_ppq(lev.instance, lev.mesh, config)
        except (EnergyOverflowError, InfeasibleError) as exc:
            notes.append(f"n={lev.n}: {exc}")
            sols.append(None)
            fields.append(None)
            points.append(SweepPoint(lev.n, math.nan, math.nan, math.nan, math.nan,
                                     time.perf_counter() - t0, False, str(exc)))
            continue
        sols.append(sol)
        fields.append(ExtendedField(lev.n, lev.mesh, sol.values, lev.instance.g))
        points.append(SweepPoint(lev.n, _safe_energy(lev.instance, lev.mesh, sol.values),
                                 math.nan, math.nan, sol.max_gradient,
                                 time.perf_counter() - t0, sol.converged, sol.message,
                                 {"nodes": lev.mesh.n_nodes, "iterations": sol.iterations}))
        if not sol.converged:
            notes.append(f"n={lev.n}: {sol.message}")
    ok = [i for i, f in enumerate(fields) if f is not None]
    extra: dict = {"levels": levels, "solutions": sols, "fields": fields}
    if len(ok) < 3:
        notes.append("fewer than 3 successful levels: trends not reported")
    if ok:
        finest = built[ok[-1]]
        grid, spacing = evaluation_grid(finest.domain, grid_spacing)
        extra["grid_points"] = len(grid)
        extra["grid_spacing"] = spacing
        extra["grid_area_error"] = abs(len(grid) * spacing ** 2 - finest.domain.area)
        p = finest.instance.p
        target = fields[ok[-1]]
        for a, b in zip(ok, ok[1:]):
            dist = grid_distances(fields[a], fields[b], grid, spacing, p)
            pt = points[a]
            pt.w1t = dist["w1p"]
            pt.extra.update(lp_next=dist["lp"], grad_lp_next=dist["grad_lp"], sup_next=dist["sup"])
        for i in ok:
            dist = grid_distances(fields[i], target, grid, spacing, p)
            points[i].sup_diff = dist["sup"]
            lev = built[i]
            rec = _recovery_check(lev, sols[i], target)
            points[i].extra.update(rec)
        energies = [points[i].energy for i in ok]
        jumps = [abs(b - a) for a, b in zip(energies, energies[1:])]
        extra["energy_jumps"] = jumps
        w1 = [points[i].w1t for i in ok[:-1]]
        extra["w1p_pairwise"] = w1
        if len(ok) >= 3:
            extra["energy_jumps_decreasing"] = all(b < a for a, b in zip(jumps, jumps[1:]))
            extra["cauchy_decreasing_last3"] = bool(w1[-1] < w1[-2])
            extra["recovery_feasible_all"] = all(points[i].extra["recovery_feasible"] for i in ok)
            extra["recovery_energy_ok_all"] = all(points[i].extra["recovery_energy_ok"] for i in ok)
    L = instance.L if instance is not None and instance.L is not None else math.nan
    k = built[0].instance.k if built else math.nan
    bound = max(1.0, math.sqrt(L * L + k * k)) if math.isfinite(L) else math.nan
    return SweepReport("n", points, bound, notes, extra)


def _recovery_check(lev: Level, sol: DiscreteSolution, target: ExtendedField,
                    rel_slack: float = 1e-9) -> dict:
    """Build v_n on the level-n mesh and compare energies with u_n."""
    mesh, inst = lev.mesh, lev.instance
    fibers = build_fibers(lev.domain)
    x = mesh.vertices
    g = interpolate(inst.g, mesh).values
    lo = interpolate(inst.phi1, mesh, fill=-math.inf, allow_infinite=True).values
    hi = interpolate(inst.phi2, mesh, fill=math.inf, allow_infinite=True).values
    v = recovery_sequence(fibers, x, target(x), g, lo, hi, boundary_mask=mesh.boundary_mask)
    b = mesh.boundary_nodes
    feasible = bool(np.all(v >= lo) and np.all(v <= hi) and np.array_equal(v[b], g[b]))
    ju = _safe_energy(inst, mesh, sol.values)
    jv = _safe_energy(inst, mesh, v)
    return {"recovery_feasible": feasible, "recovery_energy": jv,
            "recovery_energy_ok": bool(ju <= jv + rel_slack * max(1.0, abs(jv))),
            "recovery_field": v}


def limit_n_sweep(instance: ProblemInstance, base: np.ndarray, alpha: float,
                  levels: Sequence[int], mode: str = "Pq", h_max: float = 0.05,
                  config: SolverConfig = SolverConfig(),
                  instance_for_level: Optional[Callable[[int], ProblemInstance]] = None,
                  grid_spacing: Optional[float] = None, grading: float = 1.5,
                  shared_lattice: bool = True) -> SweepReport:
    """Per level, solve the capped J_q problem ("Pq") or the Lipschitz one ("PqL")."""
    if mode not in ("Pq", "PqL"):
        raise ValueError("mode must be 'Pq' or 'PqL'")
    levels = sorted(int(n) for n in levels)
    family = _level_family(instance, instance_for_level)
    built = build_levels(base, alpha, levels, h_max, family, grading, shared_lattice)
    fields, points, notes, caps = [], [], [], []
    for lev in built:
        t0 = time.perf_counter()
        try:
            if mode == "Pq":
                sol = solve_limit_q(lev.instance, lev.mesh, config=config)
            else:
                sol = solve_lipschitz(lev.instance, lev.mesh, config)
        except (EnergyOverflowError, InfeasibleError) as exc:
            notes.append(f"n={lev.n}: {exc}")
            fields.append(None)
            caps.append(math.nan)
            points.append(SweepPoint(lev.n, math.nan, math.nan, math.nan, math.nan,
                                     time.perf_counter() - t0, False, str(exc)))
            continue
        caps.append(sol.extra["M"])
        fields.append(ExtendedField(lev.n, lev.mesh, sol.values, lev.instance.g))
        points.append(SweepPoint(lev.n, sol.energy, math.nan, math.nan, sol.max_gradient,
                                 time.perf_counter() - t0, sol.converged, sol.message,
                                 {"nodes": lev.mesh.n_nodes, "M": sol.extra["M"]}))
        if not sol.converged:
            notes.append(f"n={lev.n}: {sol.message}")
    ok = [i for i, f in enumerate(fields) if f is not None]
    extra: dict = {"mode": mode, "fields": fields}
    if ok:
        finest = built[ok[-1]]
        grid, spacing = evaluation_grid(finest.domain, grid_spacing)
        p = 2.0
        for a, b in zip(ok, ok[1:]):
            points[a].extra["sup_next"] = grid_distances(fields[a], fields[b], grid, spacing, p)["sup"]
        for i in ok:
            points[i].sup_diff = grid_distances(fields[i], fields[ok[-1]], grid, spacing, p)["sup"]
        grads = [points[i].max_gradient for i in ok]
        extra["max_gradients"] = grads
        if mode == "Pq":
            extra["within_cap_all"] = all(points[i].max_gradient <= caps[i] + config.viol_tol
                                          for i in ok)
        else:
            extra["max_gradient_nonincreasing"] = all(
                b <= 1.05 * a for a, b in zip(grads, grads[1:]))
    finite_caps = [c for c in caps if math.isfinite(c)]
    return SweepReport("n", points, max(finite_caps) if finite_caps else math.nan, notes, extra)


# ------------------------------------------------- higher integrability

@dataclass
class IntegrabilityReport:
    p: float
    eps: tuple
    norms: np.ndarray        # (refinements + 1, len(eps))
    nodes: tuple
    converged: tuple

    @property
    def ratios(self) -> np.ndarray:
        return self.norms[1:] / self.norms[:-1]

    def stable(self, tol: float = 0.10) -> bool:
        return bool(np.all(np.abs(self.ratios - 1.0) <= tol))

    def pairs(self) -> list:
        """(eps, norm on the finest mesh)."""
        return [(e, float(v)) for e, v in zip(self.eps, self.norms[-1])]


def integrability_diagnostic(instance: ProblemInstance, mesh: Mesh, p: Optional[float] = None,
                             eps_list: Sequence[float] = (0.05, 0.1),
                             solution: Optional[DiscreteSolution] = None, refinements: int = 2,
                             config: SolverConfig = SolverConfig()) -> IntegrabilityReport:
    """||grad u||_{p+eps} on the mesh and on successive uniform refinements.

    The problem is re-solved on each refined mesh, warm-started from the
    prolongated coarser solution.
    """
    eps = tuple(float(e) for e in eps_list)
    if any(e < 0 for e in eps):
        raise ValueError("eps values must be nonnegative")
    p = instance.p if p is None else float(p)
    inst = instance if p == instance.p else instance.with_p(p)
    sol = solution if solution is not None else solve_ppq(inst, mesh, config)
    rows, nodes, conv = [], [], []
    cur_mesh, cur = mesh, sol
    for level in range(refinements + 1):
        rows.append([lp_gradient_norm(cur_mesh, cur.values, p + e) for e in eps])
        nodes.append(cur_mesh.n_nodes)
        conv.append(cur.converged)
        if level == refinements:
            break
        fine = refine(cur_mesh)
        cur = solve_ppq(inst, fine, config, u0=prolongate(cur_mesh, cur.values))
        cur_mesh = fine
    return IntegrabilityReport(p, eps, np.array(rows), tuple(nodes), tuple(conv))

