"""Piecewise-linear discretization of the (p,q) energy with double obstacles.

Fields are callables taking an (N, 2) array of points and returning (N,)
values.  Obstacles may be ``None`` (meaning unbounded, stored as -inf/+inf).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .meshing import Mesh

Field = Callable[[np.ndarray], np.ndarray]


class EnergyOverflowError(ArithmeticError):
    """The p-power term left the floating range; use a rescaled evaluation."""


class InfeasibleError(ValueError):
    pass


def constant(c: float) -> Field:
    return lambda x: np.full(len(np.atleast_2d(x)), float(c))


def estimate_lipschitz(g: Field, points: np.ndarray, h: float = 1e-6) -> float:
    """Max gradient norm of g over the sample points, by central differences."""
    pts = np.atleast_2d(points)
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    gx = (g(pts + ex) - g(pts - ex)) / (2 * h)
    gy = (g(pts + ey) - g(pts - ey)) / (2 * h)
    return float(np.max(np.hypot(gx, gy)))


@dataclass(frozen=True)
class ProblemInstance:
    p: float
    q: float
    k: float
    f: Field
    g: Field
    phi1: Optional[Field] = None
    phi2: Optional[Field] = None
    L: Optional[float] = None

    def __post_init__(self):
        if not self.q >= 2:
            raise ValueError(f"need q >= 2, got q={self.q!r}")
        if not self.p > self.q:
            raise ValueError(f"need p > q, got p={self.p!r}, q={self.q!r}")
        if not math.isfinite(self.k):
            raise ValueError("k must be finite")

    def with_p(self, p: float) -> "ProblemInstance":
        return ProblemInstance(p, self.q, self.k, self.f, self.g, self.phi1, self.phi2, self.L)

    def lipschitz(self, points: np.ndarray) -> float:
        if self.L is not None:
            return float(self.L)
        return estimate_lipschitz(self.g, points)

    def gradient_cap(self, points: np.ndarray) -> float:
        """max(1, sqrt(L^2 + k^2))."""
        L = self.lipschitz(points)
        return max(1.0, math.sqrt(L * L + self.k * self.k))


@dataclass(frozen=True, eq=False)
class DiscreteField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError("value count does not match vertex count")


def interpolate(field: Optional[Field], mesh: Mesh, fill: float = math.nan,
                allow_infinite: bool = False) -> DiscreteField:
    """Nodal samples of ``field``; ``None`` yields the constant ``fill``."""
    if field is None:
        return DiscreteField(mesh, np.full(mesh.n_nodes, fill))
    vals = np.asarray(field(mesh.vertices), dtype=float)
    vals = np.broadcast_to(vals, (mesh.n_nodes,)).copy()
    bad = np.isnan(vals) if allow_infinite else ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"field evaluation failed at node {i} ({mesh.vertices[i].tolist()})")
    return DiscreteField(mesh, vals)


def element_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """(T, 2) constant gradients of the P1 interpolant."""
    # differences against vertex 0 (the hat gradients sum to zero) keep constants exact
    u = values[mesh.triangles]
    d = u[:, 1:] - u[:, :1]
    return np.einsum("tij,ti->tj", mesh.basis_gradients[:, 1:], d)


def element_gradient(field: DiscreteField, t: int) -> np.ndarray:
    m = field.mesh
    u = field.values[m.triangles[t]]
    return m.basis_gradients[t, 1:].T @ (u[1:] - u[0])


def _assemble(mesh: Mesh, elem_vec: np.ndarray) -> np.ndarray:
    """Scatter per-element (T, 2) flux against basis gradients into nodes."""
    contrib = np.einsum("tij,tj->ti", mesh.basis_gradients, elem_vec)
    return np.bincount(mesh.triangles.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes)


class DiscreteProblem:
    """A ProblemInstance bound to a mesh: nodal data plus energy evaluation.

    ``log_scale`` divides the whole functional by exp(log_scale); positive
    rescaling keeps every minimizer and every line-search decision.
    """

    def __init__(self, instance: ProblemInstance, mesh: Mesh):
        self.instance = instance
        self.mesh = mesh
        self.f = interpolate(instance.f, mesh).values
        self.g = interpolate(instance.g, mesh).values
        self.phi1 = interpolate(instance.phi1, mesh, fill=-math.inf, allow_infinite=True).values
        self.phi2 = interpolate(instance.phi2, mesh, fill=math.inf, allow_infinite=True).values
        self.load = mesh.lumped_mass * self.f

    @property
    def lower_unbounded(self) -> np.ndarray:
        return np.isneginf(self.phi1)

    @property
    def upper_unbounded(self) -> np.ndarray:
        return np.isposinf(self.phi2)

    def bounds(self):
        """Nodal box (lower, upper) with boundary nodes pinned to g."""
        bad = np.flatnonzero(self.phi1 > self.phi2)
        if bad.size:
            raise InfeasibleError(f"phi1 > phi2 at node {int(bad[0])}")
        b = self.mesh.boundary_nodes
        gb = self.g[b]
        bad = b[(gb < self.phi1[b]) | (gb > self.phi2[b])]
        if bad.size:
            raise InfeasibleError(f"boundary datum outside [phi1, phi2] at node {int(bad[0])}")
        lower, upper = self.phi1.copy(), self.phi2.copy()
        lower[b] = gb
        upper[b] = gb
        return lower, upper

    def gradient_sq(self, u: np.ndarray) -> np.ndarray:
        G = element_gradients(self.mesh, u)
        return np.einsum("ti,ti->t", G, G)

    def log_scale_for(self, u: np.ndarray) -> float:
        """(p/2) log S with S = max(1, max_T (k^2 + |grad u|_T^2))."""
        S = max(1.0, float(np.max(self.instance.k ** 2 + self.gradient_sq(u))))
        return 0.5 * self.instance.p * math.log(S)

    def energy(self, u: np.ndarray, log_scale: float = 0.0, with_gradient: bool = False,
               p_term: bool = True):
        inst = self.instance
        mesh = self.mesh
        G = element_gradients(mesh, u)
        s = inst.k ** 2 + np.einsum("ti,ti->t", G, G)
        area = mesh.areas
        damp = math.exp(-log_scale)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            logs = np.log(s)
            wq = s ** (0.5 * inst.q) * damp
            val = np.sum(area * wq) / inst.q - np.dot(self.load, u) * damp
            if p_term:
                wp = np.exp(0.5 * inst.p * logs - log_scale)
                val += np.sum(area * wp) / inst.p
        if not with_gradient:
            return val
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            coef = s ** (0.5 * inst.q - 1.0) * damp
            if p_term:
                coef = coef + np.exp((0.5 * inst.p - 1.0) * logs - log_scale)
        with np.errstate(over="ignore", invalid="ignore"):
            grad = _assemble(mesh, (area * coef)[:, None] * G) - self.load * damp
        return val, grad


_CACHE: dict = {}


def discrete_problem(instance: ProblemInstance, mesh: Mesh) -> DiscreteProblem:
    key = (id(instance), id(mesh))
    hit = _CACHE.get(key)
    if hit is None or hit.instance is not instance or hit.mesh is not mesh:
        if len(_CACHE) > 64:
            _CACHE.clear()
        hit = _CACHE[key] = DiscreteProblem(instance, mesh)
    return hit


def energy(instance: ProblemInstance, field: DiscreteField) -> float:
    """Discrete J_{p,q}; raises EnergyOverflowError outside the float range."""
    val = discrete_problem(instance, field.mesh).energy(field.values)
    if not math.isfinite(val):
        raise EnergyOverflowError(f"energy overflow at p={instance.p}")
    return float(val)


def energy_gradient(instance: ProblemInstance, field: DiscreteField) -> np.ndarray:
    """Exact gradient of the discrete energy with respect to nodal values."""
    _, grad = discrete_problem(instance, field.mesh).energy(field.values, with_gradient=True)
    if not np.all(np.isfinite(grad)):
        raise EnergyOverflowError(f"gradient overflow at p={instance.p}")
    return grad


def form_residual(instance: ProblemInstance, mesh: Mesh, u: np.ndarray, v: np.ndarray) -> float:
    """a_p(u, v-u) + a_q(u, v-u) - int f (v-u), assembled element by element."""
    dp = discrete_problem(instance, mesh)
    Gu = element_gradients(mesh, u)
    Gw = element_gradients(mesh, v - u)
    s = instance.k ** 2 + np.sum(Gu * Gu, axis=1)
    flux_dot = np.sum(Gu * Gw, axis=1)
    a_p = np.sum(mesh.areas * s ** ((instance.p - 2) / 2) * flux_dot)
    a_q = np.sum(mesh.areas * s ** ((instance.q - 2) / 2) * flux_dot)
    w = v - u
    load = np.sum(mesh.areas / 3.0 * np.sum(dp.f[mesh.triangles] * w[mesh.triangles], axis=1))
    return float(a_p + a_q - load)


def lp_gradient_norm(mesh: Mesh, values: np.ndarray, t: float) -> float:
    """||grad u||_{L^t} of the piecewise-constant gradient."""
    G = element_gradients(mesh, values)
    mag = np.hypot(G[:, 0], G[:, 1])
    if math.isinf(t):
        return float(mag.max())
    peak = mag.max()
    if peak == 0:
        return 0.0
    return float(peak * np.sum(mesh.areas * (mag / peak) ** t) ** (1.0 / t))
