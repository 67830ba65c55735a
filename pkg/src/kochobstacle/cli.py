"""``kochobstacle run <config>``: build, solve, sweep and write plain-text artifacts.

Exit codes: 0 success, 2 bad configuration, 3 infeasible data or geometry,
4 solver did not converge (artifacts kept), 1 anything else.  On failure an
``error.txt`` record (``key: value`` lines) is written to the output
directory and echoed to stderr.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import asymptotics as asym
from . import fileio
from .config import ConfigError, RunConfig, load_config
from .fem import InfeasibleError, interpolate
from .fibers import build_fibers
from .geometry import GeometryError, IfsParams, build_domain, fractal_dimension
from .meshing import MeshQualityError, triangulate
from .solver import DiscreteProblem, solve_ppq, vi_residual

log = logging.getLogger("kochobstacle")

ENV_OUT = "KOCHOBSTACLE_OUT"
ENV_THREADS = "KOCHOBSTACLE_THREADS"
ENV_SEED = "KOCHOBSTACLE_SEED"

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3, 4

# report columns that are reproducible run to run
_STABLE = tuple(c for c in asym.CSV_COLUMNS if c != "runtime")


class SolverFailure(RuntimeError):
    pass


class _Run:
    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg, self.seed = cfg, seed
        self.out = cfg.output.directory
        self.timings = {}
        self.summary = {}

    def want(self, fmt: str) -> bool:
        return fmt in self.cfg.output.formats

    def path(self, name: str) -> Path:
        return self.out / name

    def domain(self, n: int):
        g = self.cfg.geometry
        return build_domain(g.base, n, IfsParams.from_alpha(g.alpha))

    def mesh(self, dom):
        g = self.cfg.geometry
        return triangulate(dom, g.h_max, grading=g.grading)

    # ------------------------------------------------------------- modes
    def geometry_only(self):
        g = self.cfg.geometry
        self.summary["fractal_dimension"] = _num(fractal_dimension(g.alpha))
        for n in g.levels:
            dom = self.domain(n)
            fib = build_fibers(dom) if g.fibers else None
            if self.want("svg"):
                fileio.svg_domain(self.path(f"domain_n{n}.svg"), dom.boundary, fib)
            if self.want("vertices"):
                fileio.write_vertices(self.path(f"vertices_n{n}.txt"), dom.boundary)
            if self.want("mesh"):
                mesh = self.mesh(dom)
                fileio.write_mesh(self.path(f"mesh_n{n}.txt"), mesh)
                if self.want("svg"):
                    fileio.svg_mesh(self.path(f"mesh_n{n}.svg"), mesh)
            self.summary[f"n{n}_segments"] = len(dom.boundary)
            self.summary[f"n{n}_area"] = _num(dom.area)
            self.summary[f"n{n}_perimeter"] = _num(float(np.sum(np.hypot(
                *(np.roll(dom.boundary, -1, axis=0) - dom.boundary).T))))

    def solve(self):
        cfg, prob = self.cfg, self.cfg.problem
        n = cfg.geometry.levels[0]
        dom = self.domain(n)
        t0 = time.perf_counter()
        mesh = self.mesh(dom)
        self.timings["mesh"] = time.perf_counter() - t0
        inst = prob.instance()
        dp = DiscreteProblem(inst, mesh)
        dp.bounds()
        t0 = time.perf_counter()
        sol = solve_ppq(inst, mesh, cfg.solver, dp=dp)
        self.timings["solve"] = time.perf_counter() - t0
        self._write_field(mesh, sol.values, "")
        if self.want("trace"):
            fileio.write_trace(self.path("trace.csv"), sol.trace)
        self.summary.update(level=n, nodes=mesh.n_nodes, triangles=mesh.n_triangles,
                            energy=_num(sol.energy), kkt_residual=_num(sol.kkt_residual),
                            iterations=sol.iterations, converged=sol.converged,
                            message=sol.message, max_gradient=_num(sol.max_gradient),
                            lower_active=len(sol.active_sets["lower"]),
                            upper_active=len(sol.active_sets["upper"]))
        if prob.audit_probes > 0:
            self.summary["vi_audit_min"] = _num(self._vi_audit(inst, mesh, sol, dp))
        if prob.eps:
            rep = asym.integrability_diagnostic(inst, mesh, prob.p, prob.eps, solution=sol,
                                                config=cfg.solver)
            for e, row in zip(rep.eps, rep.norms.T):
                self.summary[f"grad_norm_p+{e:g}"] = " ".join(_num(v) for v in row)
            self.summary["integrability_stable"] = rep.stable()
        if not sol.converged:
            raise SolverFailure(f"solve_ppq: {sol.message}")

    def _vi_audit(self, inst, mesh, sol, dp) -> float:
        """Smallest VI residual over random admissible probes (the only use of the seed)."""
        rng = np.random.default_rng(self.seed)
        lower, upper = dp.bounds()
        u = sol.values
        lo = np.where(np.isfinite(lower), lower, u - 1.0)
        hi = np.where(np.isfinite(upper), upper, u + 1.0)
        worst = math.inf
        for _ in range(self.cfg.problem.audit_probes):
            v = lo + rng.random(len(u)) * (hi - lo)
            worst = min(worst, vi_residual(inst, mesh, sol, v))
        return worst

    def p_sweep(self):
        cfg, prob = self.cfg, self.cfg.problem
        n = cfg.geometry.levels[0]
        mesh = self.mesh(self.domain(n))
        inst = prob.instance(p=prob.p_schedule[0])
        rep = asym.p_sweep(inst, mesh, prob.p_schedule, prob.t, cfg.solver)
        self._report(rep, ("sup_prev", "iterations", "lower_active", "upper_active"))
        if self.want("mesh"):
            fileio.write_mesh(self.path("mesh.txt"), mesh)
        if self.want("solution"):
            for pt, sol in zip(rep.points, rep.extra["solutions"]):
                if sol is not None:
                    fileio.write_solution(self.path(f"solution_p{pt.param:g}.txt"), sol.values)
            if "limit_solution" in rep.extra:
                fileio.write_solution(self.path("solution_limit.txt"),
                                      rep.extra["limit_solution"].values)
        if not rep.ok:
            raise SolverFailure("p-sweep: " + "; ".join(rep.notes))

    def n_sweep(self):
        cfg, prob = self.cfg, self.cfg.problem
        g = cfg.geometry
        rep = asym.n_sweep(prob.instance(), g.base, g.alpha, g.levels, g.h_max, cfg.solver,
                           grading=g.grading, shared_lattice=g.shared_lattice)
        self._report(rep, ("nodes", "lp_next", "grad_lp_next", "sup_next", "recovery_energy",
                           "recovery_feasible", "recovery_energy_ok"))
        self._write_levels(rep)
        if not rep.ok:
            raise SolverFailure("n-sweep: " + "; ".join(rep.notes))

    def limit_sweep(self):
        cfg, prob = self.cfg, self.cfg.problem
        g = cfg.geometry
        rep = asym.limit_n_sweep(prob.instance(), g.base, g.alpha, g.levels, prob.limit_mode,
                                 g.h_max, cfg.solver, grading=g.grading,
                                 shared_lattice=g.shared_lattice)
        self._report(rep, ("nodes", "M", "sup_next"))
        self._write_levels(rep)
        if not rep.ok:
            raise SolverFailure("limit-sweep: " + "; ".join(rep.notes))

    # ----------------------------------------------------------- helpers
    def _write_field(self, mesh, values, suffix):
        if self.want("mesh"):
            fileio.write_mesh(self.path(f"mesh{suffix}.txt"), mesh)
        if self.want("solution"):
            fileio.write_solution(self.path(f"solution{suffix}.txt"), values)
        if self.want("svg"):
            fileio.svg_mesh(self.path(f"mesh{suffix}.svg"), mesh)
            fileio.svg_mesh(self.path(f"solution{suffix}.svg"), mesh, values)

    def _write_levels(self, rep):
        for f in rep.extra.get("fields", []):
            if f is not None:
                self._write_field(f.mesh, f.values, f"_n{f.level}")

    def _report(self, rep, extra_cols):
        if self.want("csv"):
            rep.to_csv(self.path("report.csv"), extra_cols, columns=_STABLE)
        for line in rep.summary().splitlines():
            key, _, val = line.partition(": ")
            if key == "note":
                self.summary.setdefault("notes", [])
                self.summary["notes"].append(val)
            else:
                self.summary[key] = val
        for pt in rep.points:
            self.timings[f"{rep.axis}={pt.param:g}"] = pt.runtime


def _num(x) -> str:
    return f"{float(x):.17g}"


def _summary_items(summary: dict) -> dict:
    out = {}
    for k, v in summary.items():
        if isinstance(v, list):
            for i, item in enumerate(v):
                out[f"{k}[{i}]"] = item
        elif isinstance(v, (bool, np.bool_)):
            out[k] = "true" if v else "false"
        else:
            out[k] = v
    return out


def _limit_threads(k):
    if k is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=int(k))


def _error_record(out: Path, kind: str, code: int, message: str, extra: dict | None = None):
    rec = {"status": "error", "kind": kind, "exit_code": code, "message": message}
    rec.update(extra or {})
    text = "".join(f"{k}: {v}\n" for k, v in rec.items())
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.txt").write_text(text)
    except OSError:
        pass
    sys.stderr.write(text)


def run(config_path, out=None, threads=None, seed=None) -> int:
    """Execute one configured run; returns the process exit status."""
    out = out if out is not None else os.environ.get(ENV_OUT)
    threads = threads if threads is not None else os.environ.get(ENV_THREADS)
    seed = seed if seed is not None else os.environ.get(ENV_SEED)
    try:
        threads = int(threads) if threads is not None else None
        seed = int(seed) if seed is not None else 0
        if threads is not None and threads < 1:
            raise ValueError("threads must be >= 1")
    except ValueError as exc:
        _error_record(Path(out or "."), "ConfigError", EXIT_CONFIG, f"bad flag: {exc}")
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path, overrides={"out": out})
    except ConfigError as exc:
        _error_record(Path(out or "."), "ConfigError", EXIT_CONFIG, str(exc), exc.record())
        return EXIT_CONFIG
    outdir = cfg.output.directory
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        stale = outdir / "error.txt"
        if stale.exists():
            stale.unlink()
    except OSError as exc:
        sys.stderr.write(f"status: error\nkind: OSError\nmessage: {exc}\n")
        return EXIT_OTHER
    job = _Run(cfg, seed)
    mode = cfg.problem.mode
    handler = {"solve": job.solve, "p-sweep": job.p_sweep, "n-sweep": job.n_sweep,
               "limit-sweep": job.limit_sweep, "geometry-only": job.geometry_only}[mode]
    limiter = _limit_threads(threads)
    code, kind, message = EXIT_OK, "", ""
    try:
        handler()
    except InfeasibleError as exc:
        code, kind, message = EXIT_INFEASIBLE, "InfeasibleError", str(exc)
    except (GeometryError, MeshQualityError) as exc:
        code, kind, message = EXIT_INFEASIBLE, type(exc).__name__, str(exc)
    except SolverFailure as exc:
        code, kind, message = EXIT_SOLVER, "SolverFailure", str(exc)
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        code, kind, message = EXIT_OTHER, type(exc).__name__, str(exc)
        log.debug("unexpected failure\n%s", traceback.format_exc())
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    head = {"status": "ok" if code == 0 else "error", "mode": mode}
    fileio.write_key_values(outdir / "summary.txt", {**head, **_summary_items(job.summary)})
    fileio.write_key_values(outdir / "timings.txt",
                            {k: f"{v:.3f}" for k, v in job.timings.items()})
    if code:
        _error_record(outdir, kind, code, message, {"mode": mode})
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kochobstacle",
                                     description="Obstacle problems on Koch pre-fractal domains")
    sub = parser.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="execute a configuration file")
    rp.add_argument("config", help="INI configuration file")
    rp.add_argument("--out", help=f"output directory (env {ENV_OUT})")
    rp.add_argument("--threads", type=int, help=f"BLAS/OpenMP thread cap (env {ENV_THREADS})")
    rp.add_argument("--seed", type=int, help=f"seed for randomized audits (env {ENV_SEED})")
    rp.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.config, args.out, args.threads, args.seed)


if __name__ == "__main__":
    sys.exit(main())
