"""Box-constrained minimization of the discrete energies.

All three problems share one engine: projected gradient in the lumped-mass
metric with Barzilai-Borwein step lengths and monotone backtracking.  The
functional is convex, so a trial point whose directional derivative along
the search direction is nonpositive is accepted even when the Armijo test is
lost in rounding.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fem import DiscreteField, DiscreteProblem, ProblemInstance, _assemble, element_gradients
from .meshing import Mesh

log = logging.getLogger(__name__)

DEFAULT_PENALTIES = (1e2, 1e3, 1e4, 1e5, 1e6, 1e7)
DEFAULT_P_CONTINUATION = (8.0, 16.0, 32.0, 64.0, 128.0, 256.0)
_STAB_FACTOR = 4.0


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iters: int = 20000
    shrink: float = 0.5
    armijo: float = 1e-4
    bb_stabilization: bool = False
    penalty_schedule: tuple = DEFAULT_PENALTIES
    p_continuation: tuple = DEFAULT_P_CONTINUATION
    viol_tol: float = 1e-4
    active_tol: float = 1e-10
    multiplier_updates: int = 30

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        for name in ("penalty_schedule", "p_continuation"):
            sched = getattr(self, name)
            if any(b <= a for a, b in zip(sched, sched[1:])):
                raise ValueError(f"{name} must be strictly increasing")


@dataclass(frozen=True)
class LimitConstraint:
    M: float

    def __post_init__(self):
        if not self.M >= 1:
            raise ValueError("gradient cap must be >= 1")

    @classmethod
    def from_data(cls, L: float, k: float) -> "LimitConstraint":
        return cls(max(1.0, math.sqrt(L * L + k * k)))


@dataclass
class DiscreteSolution:
    field: DiscreteField
    energy: float
    element_gradients: np.ndarray
    kkt_residual: float
    iterations: int
    active_sets: dict
    converged: bool = True
    message: str = ""
    trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def max_gradient(self) -> float:
        G = self.element_gradients
        return float(np.max(np.hypot(G[:, 0], G[:, 1]))) if len(G) else 0.0


@dataclass
class _EngineResult:
    x: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool
    message: str
    trace: list


def _projected_residual(x, grad, lower, upper, metric, free):
    step = np.clip(x - grad / metric, lower, upper) - x
    return float(np.max(np.abs(step[free]))) if np.any(free) else 0.0


def _minimize_box(evaluate, rescale, x0, lower, upper, metric, config: SolverConfig,
                  trace_max_grad=None, tol: Optional[float] = None,
                  precond=None, precond_every: int = 25,
                  residual_in_step_metric: bool = False) -> _EngineResult:
    """Projected BB gradient descent.

    ``evaluate(x, log_scale) -> (value, grad)`` and ``rescale(x) -> log_scale``.
    Convergence is measured in the fixed diagonal ``metric``; steps use
    ``precond(x, log_scale)`` (a positive diagonal) when given.  With
    ``residual_in_step_metric`` the residual uses the preconditioner instead,
    which estimates nodal displacement to the optimum on stiff problems.
    """
    tol = config.tol if tol is None else tol
    step_metric = metric
    free = lower < upper
    x = np.clip(x0, lower, upper)
    ls = rescale(x)
    val, grad = evaluate(x, ls)
    trace = []
    if not np.any(free):
        res = 0.0
        trace.append((0, val * math.exp(ls), 0.0, 0.0, _mg(trace_max_grad, x)))
        return _EngineResult(x, val, res, 0, True, "no free nodes", trace)
    if precond is not None:
        step_metric = precond(x, ls)
    gmax = np.max(np.abs(grad[free] / step_metric[free]))
    alpha = 1.0 / gmax if gmax > 0 else 1.0
    converged, message = False, "max_iters exceeded"
    it = 0
    step_taken = 0.0
    longest = 0.0
    for it in range(config.max_iters + 1):
        res = _projected_residual(x, grad, lower, upper,
                                  step_metric if residual_in_step_metric else metric, free)
        trace.append((it, _unscaled(val, ls), res, step_taken, _mg(trace_max_grad, x)))
        if res <= tol:
            converged, message = True, "converged"
            break
        if it == config.max_iters:
            break
        d = np.clip(x - alpha * grad / step_metric, lower, upper) - x
        d[~free] = 0.0
        slope = float(np.dot(grad, d))
        if slope >= 0:
            # direction lost to rounding; fall back to the unit-metric projected step
            d = np.clip(x - grad / metric, lower, upper) - x
            d[~free] = 0.0
            slope = float(np.dot(grad, d))
            if slope >= 0:
                converged, message = res <= 10 * tol, "stalled: no descent direction"
                break
        t = 1.0
        accepted = False
        for _ in range(60):
            xn = x + t * d
            vn, gn = evaluate(xn, ls)
            if math.isfinite(vn):
                if vn <= val + config.armijo * t * slope:
                    accepted = True
                elif vn <= val + 1e-13 * abs(val) and float(np.dot(gn, d)) <= 0.0:
                    accepted = True
            if accepted:
                break
            t *= config.shrink
        if not accepted:
            converged, message = res <= 10 * tol, "line search failed"
            break
        s = xn - x
        y = gn - grad
        longest = max(longest, float(np.max(np.abs(s))))
        step_taken = t * alpha
        x, val, grad = xn, vn, gn
        new_ls = rescale(x)
        if new_ls != ls:
            factor = math.exp(ls - new_ls)
            val *= factor
            grad = grad * factor
            y = y * factor
            ls = new_ls
        if precond is not None and it % precond_every == precond_every - 1:
            new_metric = precond(x, ls)
            # keep the BB step consistent with the new metric scale
            ratio = np.median(new_metric[free] / step_metric[free])
            alpha *= ratio
            step_metric = new_metric
        sy = float(np.dot(s, y))
        if sy > 0:
            alpha = float(np.dot(s, step_metric * s)) / sy
        else:
            alpha = min(alpha * 2.0, 1e12)
        if config.bb_stabilization and longest > 0:
            # stabilized BB: the raw trial move may not exceed a fixed multiple
            # of the longest step accepted so far
            gnorm = float(np.max(np.abs(grad[free] / step_metric[free])))
            if gnorm > 0:
                alpha = min(alpha, _STAB_FACTOR * longest / gnorm)
        alpha = min(max(alpha, 1e-14), 1e14)
    return _EngineResult(x, _unscaled(val, ls), res, it, converged, message, trace)


def _unscaled(val, ls):
    if ls == 0.0:
        return float(val)
    with np.errstate(over="ignore"):
        return float(val * math.exp(ls)) if ls < 700 else math.inf


def _mg(fn, x):
    return float(fn(x)) if fn is not None else math.nan


def _max_grad_fn(mesh: Mesh):
    def fn(x):
        G = element_gradients(mesh, x)
        return np.max(np.hypot(G[:, 0], G[:, 1]))
    return fn


def _active_sets(x, lower, upper, tol):
    free_nodes = lower < upper
    low = free_nodes & (x <= lower + tol)
    up = free_nodes & (x >= upper - tol)
    return {"lower": np.flatnonzero(low), "upper": np.flatnonzero(up),
            "free": np.flatnonzero(free_nodes & ~low & ~up),
            "pinned": np.flatnonzero(~free_nodes)}


def _package(mesh, x, energy, res, iters, converged, msg, trace, lower, upper, config, **extra):
    return DiscreteSolution(DiscreteField(mesh, x), energy, element_gradients(mesh, x), res,
                            iters, _active_sets(x, lower, upper, config.active_tol),
                            converged, msg, trace, extra)


def feasible_start(dp: DiscreteProblem) -> np.ndarray:
    lower, upper = dp.bounds()
    return np.clip(dp.g, lower, upper)


def solve_ppq(instance: ProblemInstance, mesh: Mesh, config: SolverConfig = SolverConfig(),
              u0: Optional[np.ndarray] = None, dp: Optional[DiscreteProblem] = None
              ) -> DiscreteSolution:
    """Minimize the discrete J_{p,q} over the nodal box with u = g on the boundary."""
    dp = dp if dp is not None and dp.instance is instance else DiscreteProblem(instance, mesh)
    lower, upper = dp.bounds()
    x0 = np.clip(dp.g if u0 is None else np.asarray(u0, dtype=float), lower, upper)
    t0 = time.perf_counter()
    r = _minimize_box(lambda x, ls: dp.energy(x, ls, with_gradient=True), dp.log_scale_for,
                      x0, lower, upper, mesh.lumped_mass, config, _max_grad_fn(mesh))
    log.debug("solve_ppq p=%g: %s after %d iterations (res %.3e, %.2fs)", instance.p,
              r.message, r.iterations, r.residual, time.perf_counter() - t0)
    return _package(mesh, r.x, r.value, r.residual, r.iterations, r.converged, r.message,
                    r.trace, lower, upper, config, p=instance.p)


def vi_residual(instance: ProblemInstance, mesh: Mesh, solution, probe) -> float:
    """a_p(u, v-u) + a_q(u, v-u) - int f (v-u) for an admissible probe v."""
    from .fem import form_residual
    u = solution.values if hasattr(solution, "values") else np.asarray(solution)
    v = probe.values if hasattr(probe, "values") else np.asarray(probe)
    dp = DiscreteProblem(instance, mesh)
    lower, upper = dp.bounds()
    slack = 1e-12 * (1.0 + np.abs(v))
    bad = np.flatnonzero((v < lower - slack) | (v > upper + slack))
    if bad.size:
        raise ValueError(f"probe infeasible at node {int(bad[0])}")
    return form_residual(instance, mesh, u, v)


class _PenalizedQ:
    """J_q plus the shifted quadratic penalty of the per-element cap.

    With multipliers mu = 0 this is J_q + sum_T |T| rho max(0, |grad v|_T^2 - M^2)^2.
    Nonzero mu gives the augmented-Lagrangian form
    sum_T |T| (max(0, mu + 2 rho c)^2 - mu^2) / (4 rho), c = |grad v|_T^2 - M^2.
    """

    def __init__(self, dp: DiscreteProblem, M: float, rho: float, mu: Optional[np.ndarray] = None):
        self.dp, self.M2, self.rho = dp, M * M, rho
        self.mu = np.zeros(dp.mesh.n_triangles) if mu is None else mu

    def shifted(self, x):
        G = element_gradients(self.dp.mesh, x)
        c = np.einsum("ti,ti->t", G, G) - self.M2
        return G, np.maximum(self.mu + 2.0 * self.rho * c, 0.0)

    def __call__(self, x, ls=0.0):
        mesh = self.dp.mesh
        val, grad = self.dp.energy(x, 0.0, with_gradient=True, p_term=False)
        G, z = self.shifted(x)
        val = val + np.sum(mesh.areas * (z * z - self.mu * self.mu)) / (4.0 * self.rho)
        grad = grad + _assemble(mesh, (2.0 * mesh.areas * z)[:, None] * G)
        return val, grad

    def jacobi(self, x, ls=0.0):
        """Diagonal of the (generalized) Hessian, used as a step metric."""
        mesh, inst = self.dp.mesh, self.dp.instance
        G, z = self.shifted(x)
        s = inst.k ** 2 + np.einsum("ti,ti->t", G, G)
        B = mesh.basis_gradients
        bb = np.einsum("tij,tij->ti", B, B)
        gi = np.einsum("tij,tj->ti", B, G)
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = s ** (0.5 * inst.q - 1.0)
            sq2 = np.where(s > 0, (inst.q - 2.0) * s ** (0.5 * inst.q - 2.0), 0.0)
        diag = (sq + 2.0 * z)[:, None] * bb + sq2[:, None] * gi ** 2 \
            + (8.0 * self.rho * (z > 0))[:, None] * gi ** 2
        d = np.bincount(mesh.triangles.ravel(), (mesh.areas[:, None] * diag).ravel(),
                        minlength=mesh.n_nodes)
        return np.maximum(d, 1e-12 * mesh.lumped_mass)


def solve_limit_q(instance: ProblemInstance, mesh: Mesh, cap: Optional[LimitConstraint] = None,
                  config: SolverConfig = SolverConfig(), u0: Optional[np.ndarray] = None
                  ) -> DiscreteSolution:
    """Minimize discrete J_q under the box, boundary data and |grad v|_T <= M.

    rho walks up ``config.penalty_schedule``.  Within a stage the penalty is
    shifted by multiplier estimates up to ``config.multiplier_updates`` times;
    the stage ends early when the violation stops shrinking by a factor 4.
    Inner solves are Jacobi-preconditioned and their residual (reported as
    ``kkt_residual``) is measured in the Jacobi metric.
    """
    dp = DiscreteProblem(instance, mesh)
    L = instance.lipschitz(mesh.vertices)
    if cap is None:
        cap = LimitConstraint.from_data(L, instance.k)
    notes = []
    if L * L + instance.k ** 2 > 1:
        notes.append("L^2 + k^2 > 1: the p-limit is a minimal Lipschitz extension instead")
        log.warning(notes[-1])
    lower, upper = dp.bounds()
    x = np.clip(dp.g if u0 is None else np.asarray(u0, dtype=float), lower, upper)
    mg = _max_grad_fn(mesh)
    trace, iters, viols = [], 0, []
    res = math.inf
    converged = False
    message = "penalty schedule exhausted"
    mu = np.zeros(mesh.n_triangles)
    rho = config.penalty_schedule[0]
    stage_viols = []
    for rho in config.penalty_schedule:
        stage_viols.append(math.inf)
        for _ in range(config.multiplier_updates + 1):
            obj = _PenalizedQ(dp, cap.M, rho, mu)
            r = _minimize_box(obj, lambda x: 0.0, x, lower, upper, mesh.lumped_mass, config,
                              mg, precond=obj.jacobi, residual_in_step_metric=True)
            x, res = r.x, r.residual
            trace.extend((iters + row[0],) + tuple(row[1:]) for row in r.trace)
            iters += r.iterations
            viol = float(mg(x)) - cap.M
            viols.append(viol)
            log.debug("solve_limit_q rho=%g: viol %.3e, %s", rho, viol, r.message)
            if viol <= config.viol_tol and r.converged:
                converged, message = True, "converged"
                break
            if config.multiplier_updates:
                _, mu = obj.shifted(x)
            if viol > 0.25 * stage_viols[-1]:
                stage_viols[-1] = min(stage_viols[-1], viol)
                break
            stage_viols[-1] = viol
        if converged:
            break
        if len(stage_viols) >= 3 and stage_viols[-1] >= stage_viols[-3] > config.viol_tol:
            message = "penalty stagnation"
            break
    val = float(dp.energy(x, p_term=False))
    return _package(mesh, x, val, res, iters, converged, message, trace, lower, upper,
                    config, rho=rho, violation=viols[-1], M=cap.M, notes=notes,
                    multipliers=mu)


def solve_lipschitz(instance: ProblemInstance, mesh: Mesh, config: SolverConfig = SolverConfig(),
                    u0: Optional[np.ndarray] = None) -> DiscreteSolution:
    """Approximate the minimal Lipschitz extension by continuation in p."""
    L = instance.lipschitz(mesh.vertices)
    notes = []
    if L * L + instance.k ** 2 <= 1:
        notes.append("L^2 + k^2 <= 1: the p-limit solves the capped J_q problem instead")
    cap = LimitConstraint.from_data(L, instance.k)
    x = u0
    best = None
    history = []
    for p in config.p_continuation:
        if p <= instance.q:
            continue
        sol = solve_ppq(instance.with_p(p), mesh, config, u0=x)
        history.append((p, sol.max_gradient, sol.converged))
        if not np.all(np.isfinite(sol.values)):
            break
        best, x = sol, sol.values
        if not sol.converged:
            notes.append(f"p={p:g}: {sol.message}")
    if best is None:
        raise RuntimeError("continuation produced no iterate")
    best.extra.update(M=cap.M, history=history, notes=notes,
                      within_cap=best.max_gradient <= cap.M + config.viol_tol)
    best.converged = all(c for _, _, c in history)
    return best
