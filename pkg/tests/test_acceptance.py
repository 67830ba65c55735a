"""Acceptance criteria 1-9 at their stated tolerances and runtime limits."""
import math
import time

import numpy as np
import pytest

from kochobstacle.asymptotics import (decreasing_within, default_base, default_instance,
                                      integrability_diagnostic, n_sweep, p_sweep)
from kochobstacle.cli import run
from kochobstacle.fem import (DiscreteField, DiscreteProblem, ProblemInstance, constant, energy,
                              energy_gradient)
from kochobstacle.fibers import build_fibers, lambda_eval
from kochobstacle.geometry import IfsParams, build_domain, generate_prefractal, regular_polygon
from kochobstacle.meshing import refine
from kochobstacle.solver import SolverConfig, solve_ppq, vi_residual

pytestmark = pytest.mark.acceptance


def oracle_maps(alpha):
    """The four similitudes in complex form, written independently of the package."""
    th = math.asin(math.sqrt(alpha * (4 - alpha)) / 2)
    return [
        lambda z: z / alpha,
        lambda z: z / alpha * np.exp(1j * th) + 1 / alpha,
        lambda z: z / alpha * np.exp(-1j * th) + 0.5 + 1j * math.sqrt(1 / alpha - 0.25),
        lambda z: (z - 1) / alpha + 1,
    ]


def test_criterion_1_self_similarity(acceptance):
    t0 = time.perf_counter()
    worst, counts_ok, length_err = 0.0, True, 0.0
    for alpha in (2.5, 3.0, 3.5):
        ifs = IfsParams.from_alpha(alpha)
        maps = oracle_maps(alpha)
        prev = generate_prefractal(0, ifs, (0.0, 0.0), (1.0, 0.0))
        for n in range(1, 5):
            cur = generate_prefractal(n, ifs, (0.0, 0.0), (1.0, 0.0))
            z = prev.vertices[:, 0] + 1j * prev.vertices[:, 1]
            pieces = [m(z) for m in maps]
            union = np.concatenate([pieces[0]] + [p[1:] for p in pieces[1:]])
            union = np.column_stack([union.real, union.imag])
            worst = max(worst, float(np.max(np.abs(union - cur.vertices))))
            counts_ok &= len(cur.segment_lengths) == 4 ** n and len(cur.vertices) == 4 ** n + 1
            length_err = max(length_err, abs(cur.length / (4 / alpha) ** n - 1))
            prev = cur
    runtime = time.perf_counter() - t0
    ok = worst <= 1e-12 and counts_ok and length_err <= 1e-13
    acceptance(1, "refinement identity, counts, lengths", ok,
               f"max vertex gap {worst:.2e}, length rel err {length_err:.1e}", runtime, 1.0)


def test_criterion_2_gradient_oracle(acceptance, mesh_n2):
    mesh = refine(mesh_n2)
    assert 1500 <= mesh.n_nodes <= 3000
    r = np.random.default_rng(2)
    x, y = mesh.vertices.T
    f = lambda z: np.sin(2 * z[:, 0]) + z[:, 1]

    def smooth_field():
        c = r.normal(size=6) * 0.3
        return (c[0] * np.sin(2 * x + c[1]) + c[2] * np.cos(3 * y + c[3]) + c[4] * x * y + c[5]
                + 1e-3 * r.normal(size=mesh.n_nodes))

    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for i in range(100):
        # smooth directions: raw nodal noise makes the difference quotient cancel to roundoff
        u, d = smooth_field(), smooth_field()
        for p in (2.5, 4.0, 10.0):
            for k in (0.0, 1.0):
                inst = ProblemInstance(p, 2.0, k, f, constant(0.0))
                dd = energy_gradient(inst, DiscreteField(mesh, u)) @ d
                fd = (energy(inst, DiscreteField(mesh, u + h * d))
                      - energy(inst, DiscreteField(mesh, u - h * d))) / (2 * h)
                worst = max(worst, abs(fd - dd) / max(abs(dd), 1e-300))
    runtime = time.perf_counter() - t0
    acceptance(2, "energy gradient vs central differences", worst <= 1e-5,
               f"{mesh.n_nodes} nodes, max rel err {worst:.2e}", runtime, 10.0)


def test_criterion_3_affine_exactness(acceptance, mesh_n2):
    g = lambda z: 0.45 * z[:, 0] - 0.3 * z[:, 1] + 0.1
    inst = ProblemInstance(3.0, 2.0, 0.0, constant(0.0), g, constant(-5.0), constant(5.0))
    r = np.random.default_rng(3)
    t0 = time.perf_counter()
    ga = g(mesh_n2.vertices)
    u0 = ga + np.where(mesh_n2.boundary_mask, 0.0, r.uniform(-0.5, 0.5, mesh_n2.n_nodes))
    sol = solve_ppq(inst, mesh_n2, u0=u0)
    err = float(np.max(np.abs(sol.values - ga)))
    lo, hi = DiscreteProblem(inst, mesh_n2).bounds()
    vi = min(vi_residual(inst, mesh_n2, sol, lo + r.random(mesh_n2.n_nodes) * (hi - lo))
             for _ in range(50))
    runtime = time.perf_counter() - t0
    acceptance(3, "affine data reproduced, VI audit", err <= 1e-7 and vi >= -1e-8,
               f"nodal err {err:.2e}, min VI residual {vi:.2e}, {sol.iterations} its",
               runtime, 30.0)


def test_criterion_4_uniqueness(acceptance, mesh_n2, default_k0):
    dp = DiscreteProblem(default_k0, mesh_n2)
    lo, hi = dp.bounds()
    r = np.random.default_rng(4)
    t0 = time.perf_counter()
    finals = []
    for _ in range(10):
        x0 = r.uniform(lo, hi)
        sol = solve_ppq(default_k0, mesh_n2, u0=x0, dp=dp)
        finals.append(sol.values)
    spread = float(np.ptp(np.array(finals), axis=0).max())
    runtime = time.perf_counter() - t0
    act = sol.active_sets
    active = len(act["lower"]) > 0 and len(act["upper"]) > 0
    acceptance(4, "ten random starts agree", spread <= 1e-6 and active,
               f"max spread {spread:.2e}, active lower/upper {len(act['lower'])}/{len(act['upper'])}",
               runtime, 120.0)


def test_criterion_5_p_sweep_bound(acceptance, mesh_n2, default_k0):
    sched = (4, 8, 16, 32, 64, 128, 256)
    t0 = time.perf_counter()
    rep = p_sweep(default_k0, mesh_n2, sched)
    runtime = time.perf_counter() - t0
    M = rep.limit_bound
    sup = rep.column("sup_diff")[:-1]
    final = rep.extra["final_max_gradient"]
    ok = (rep.ok and rep.extra["limit_problem"] == "Pq" and rep.points[-2].param == 256
          and final <= M + 0.05 and decreasing_within(sup, 0.10))
    acceptance(5, "p-sweep gradient bound and convergence to the capped limit", ok,
               f"max grad at p=256 {final:.4f} (cap {M:g}), sup to limit "
               + " ".join(f"{s:.3g}" for s in sup), runtime, 600.0)


def test_criterion_6_n_sweep_trend(acceptance):
    inst = default_instance(k=1.0, p=3.0)
    t0 = time.perf_counter()
    rep = n_sweep(inst, default_base(), 3.0, [1, 2, 3, 4], h_max=0.012, grading=1.0,
                  shared_lattice=True)
    runtime = time.perf_counter() - t0
    w1 = rep.extra["w1p_pairwise"]
    ok = (rep.ok and rep.extra["recovery_feasible_all"] and rep.extra["recovery_energy_ok_all"]
          and w1[-1] < w1[-2])
    acceptance(6, "n-sweep recovery feasibility, energy comparison, Cauchy decay", ok,
               "W1p pairwise " + " ".join(f"{v:.3g}" for v in w1)
               + ", J_n " + " ".join(f"{e:.6g}" for e in rep.column("energy")), runtime, 900.0)


def test_criterion_7_lambda_model_case(acceptance):
    dom = build_domain(regular_polygon(3), 2, IfsParams.from_alpha(3.0))
    fib = build_fibers(dom)
    a = fib.params.a
    r = np.random.default_rng(7)
    t0 = time.perf_counter()
    # model half-fiber {0 < x1 <= 1/2, 0 <= x2 <= a x1}, mapped onto fiber 21
    x1 = 0.5 * np.sqrt(r.random(1000))
    x2 = a * x1 * r.random(1000) * (1 - 1e-9)
    p0, p1, _ = fib.inner[21]
    L = np.hypot(*(p1 - p0))
    e1 = (p1 - p0) / L
    e2 = np.array([-e1[1], e1[0]])
    world = p0 + (L * x1)[:, None] * e1 + (L * x2)[:, None] * e2
    err = float(np.max(np.abs(lambda_eval(fib, world) - x2 / (x1 * a))))
    runtime = time.perf_counter() - t0
    acceptance(7, "cutoff equals x2/(x1 a) on a model fiber", err <= 1e-10,
               f"max err {err:.2e}", runtime, 1.0)


def test_criterion_8_integrability(acceptance, mesh_n2, default_k0):
    t0 = time.perf_counter()
    rep = integrability_diagnostic(default_k0, mesh_n2, eps_list=(0.05, 0.1), refinements=2)
    runtime = time.perf_counter() - t0
    ok = rep.stable(0.10) and all(rep.converged) and np.all(np.isfinite(rep.norms))
    acceptance(8, "gradient L^(p+eps) norms stable under refinement", ok,
               f"nodes {rep.nodes}, ratios " + " ".join(f"{v:.4f}" for v in rep.ratios.ravel()),
               runtime, 600.0)


SOLVE_CFG = """
[geometry]
base = triangle
alpha = 3
n = 2
h_max = 0.05

[problem]
mode = {mode}
p = 3
q = 2
k = 0
f = 80*sin(2*pi*x1)
g = 0.3*x1
phi1 = 0.2 - 0.5*((x1-0.5)^2 + (x2-0.288675134594813)^2)^0.5
phi2 = 0.4
L = 0.3
p_schedule = 4, 8, 16
"""


def test_criterion_9_determinism(acceptance, tmp_path):
    t0 = time.perf_counter()
    same = True
    compared = 0
    for mode in ("solve", "p-sweep"):
        cfg = tmp_path / f"{mode}.ini"
        cfg.write_text(SOLVE_CFG.replace("{mode}", mode))
        outs = [tmp_path / f"{mode}_{i}" for i in range(2)]
        codes = [run(cfg, out=str(o), threads=1, seed=0) for o in outs]
        same &= codes == [0, 0]
        files = sorted(p.name for p in outs[0].iterdir()
                       if p.suffix in (".csv", ".txt") and p.name != "timings.txt")
        for name in files:
            compared += 1
            same &= (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    runtime = time.perf_counter() - t0
    acceptance(9, "reruns are byte-identical", same and compared >= 8,
               f"{compared} files compared", runtime, math.inf)
