"""Inner/outer fiber triangles along a pre-fractal boundary and the cutoff lambda_n.

Every boundary segment carries two isosceles triangles sharing it as base:
the inner one (apex inside the domain, base angle theta_minus) and the outer
one (apex outside, base angle theta/2).  The cutoff is 1 on the domain minus
the inner fibers, 0 outside the domain, and inside an inner fiber it is the
ratio of the distance to the segment over the fiber height along the normal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import shapely

from .geometry import GeometryError, PrefractalDomain


@dataclass(frozen=True)
class FiberParams:
    theta_minus: float
    delta_plus: float
    delta_minus: float

    @property
    def a(self) -> float:
        """Slope of the inner fiber's sides in the model half-fiber."""
        return self.delta_minus

    @classmethod
    def for_theta(cls, theta: float, theta_minus: float | None = None) -> "FiberParams":
        upper = min(math.pi / 2 - theta, theta / 2)
        if theta_minus is None:
            theta_minus = upper / 2
        if not 0.0 < theta_minus <= upper:
            raise GeometryError(
                f"theta_minus must lie in (0, {upper!r}], got {theta_minus!r}")
        return cls(theta_minus, math.tan(theta / 2), math.tan(theta_minus))


def _triangles_contain(tris: np.ndarray, pts: np.ndarray, tol: float) -> np.ndarray:
    """Boolean (len(pts),) membership in the union of closed triangles."""
    inside = np.zeros(len(pts), dtype=bool)
    owner = _locate(tris, pts, tol)
    inside[owner >= 0] = True
    return inside


def _locate(tris: np.ndarray, pts: np.ndarray, tol: float) -> np.ndarray:
    """Index of the first closed triangle containing each point, -1 if none.

    Triangles are ordered (p0, p1, apex); ties go to the lowest index.
    """
    owner = np.full(len(pts), -1, dtype=np.int64)
    lo = tris.min(axis=1) - tol
    hi = tris.max(axis=1) + tol
    order = np.argsort(pts[:, 0], kind="stable")
    xs = pts[order, 0]
    for t in range(len(tris)):
        i0 = np.searchsorted(xs, lo[t, 0], side="left")
        i1 = np.searchsorted(xs, hi[t, 0], side="right")
        if i0 >= i1:
            continue
        cand = order[i0:i1]
        cand = cand[owner[cand] < 0]
        y = pts[cand, 1]
        cand = cand[(y >= lo[t, 1]) & (y <= hi[t, 1])]
        if cand.size == 0:
            continue
        p = pts[cand]
        a, b, c = tris[t]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        s = np.sign(area2)

        def edge(u, v):
            return s * ((v[0] - u[0]) * (p[:, 1] - u[1]) - (v[1] - u[1]) * (p[:, 0] - u[0]))

        scale = tol * math.hypot(*(b - a))
        ok = (edge(a, b) >= -scale) & (edge(b, c) >= -scale) & (edge(c, a) >= -scale)
        owner[cand[ok]] = t
    return owner


@dataclass(frozen=True)
class FiberArray:
    level: int
    inner: np.ndarray        # (N, 3, 2): segment start, segment end, apex
    outer: np.ndarray        # (N, 3, 2)
    side_index: tuple        # side -> (start, stop) triangle range
    params: FiberParams
    domain: PrefractalDomain

    @cached_property
    def _outer_union(self):
        polys = shapely.polygons(self.outer)
        geom = shapely.union_all(np.concatenate([polys, [self.domain.polygon]]))
        shapely.prepare(geom)
        return geom

    def inner_area(self) -> float:
        return float(sum(abs(_tri_area(t)) for t in self.inner))

    def in_inner_fibers(self, points, tol: float = 1e-12) -> np.ndarray:
        """Membership in the closed inner fiber union."""
        return _triangles_contain(self.inner, np.atleast_2d(points), tol)

    def in_trimmed_domain(self, points) -> np.ndarray:
        """Membership in the open domain with the closed inner fibers removed."""
        pts = np.atleast_2d(points)
        return self.domain.contains(pts, closed=False) & ~self.in_inner_fibers(pts)

    def in_extended_domain(self, points) -> np.ndarray:
        """Membership in the closed domain united with the outer fibers."""
        pts = np.atleast_2d(points)
        return shapely.intersects_xy(self._outer_union, pts[:, 0], pts[:, 1])


def _tri_area(t) -> float:
    a, b, c = t
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def build_fibers(domain: PrefractalDomain, params: FiberParams | None = None,
                 check: bool = True) -> FiberArray:
    """Attach one inner and one outer fiber triangle to every boundary segment."""
    if params is None:
        params = FiberParams.for_theta(domain.ifs.theta)
    upper = min(math.pi / 2 - domain.ifs.theta, domain.ifs.theta / 2)
    if params.theta_minus > upper + 1e-15:
        raise GeometryError("theta_minus too large for this alpha")
    seg = domain.segments
    p0, p1 = seg[:, 0], seg[:, 1]
    d = p1 - p0
    # left normal of a CCW boundary segment points into the domain
    left = np.column_stack([-d[:, 1], d[:, 0]])
    mid = 0.5 * (p0 + p1)
    inner_apex = mid + 0.5 * params.delta_minus * left
    outer_apex = mid - 0.5 * params.delta_plus * left
    inner = np.stack([p0, p1, inner_apex], axis=1)
    outer = np.stack([p0, p1, outer_apex], axis=1)
    per = domain.segments_per_side
    side_index = tuple((s * per, (s + 1) * per) for s in range(domain.n_sides))
    for arr in (inner, outer):
        arr.setflags(write=False)
    fibers = FiberArray(domain.level, inner, outer, side_index, params, domain)
    if check:
        bad = ~shapely.covers(domain.polygon, shapely.polygons(inner))
        if np.any(bad):
            raise GeometryError(
                f"inner fiber {int(np.flatnonzero(bad)[0])} leaves the domain; "
                "theta_minus too large for this base polygon")
    return fibers


def lambda_eval(fibers: FiberArray, points, boundary_tol: float = 1e-12) -> np.ndarray:
    """Cutoff coefficient at each point (shape (N,) for (N, 2) input)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(len(pts))
    inside = fibers.domain.contains(pts, closed=True)
    out[inside] = 1.0
    idx = np.flatnonzero(inside)
    owner = _locate(fibers.inner, pts[idx], 1e-12)
    hit = owner >= 0
    idx, owner = idx[hit], owner[hit]
    if idx.size:
        tri = fibers.inner[owner]
        p0, p1 = tri[:, 0], tri[:, 1]
        d = p1 - p0
        length = np.hypot(d[:, 0], d[:, 1])
        e1 = d / length[:, None]
        e2 = np.column_stack([-e1[:, 1], e1[:, 0]])
        rel = pts[idx] - p0
        # segment-aligned frame: t along the segment, h toward the apex
        t = np.einsum("ij,ij->i", rel, e1)
        h = np.einsum("ij,ij->i", rel, e2)
        half = 0.5 * length
        s = np.minimum(t, length - t)
        height = fibers.params.delta_minus * np.clip(s, 0.0, half)
        h = np.maximum(h, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(height > 0, h / height, 0.0)
        lam[h <= boundary_tol * length] = 0.0
        out[idx] = np.clip(lam, 0.0, 1.0)
    return out


def recovery_sequence(fibers: FiberArray, points, u, g, phi1, phi2,
                      boundary_mask=None) -> np.ndarray:
    """Clamped convex combination clamp(lam*u + (1-lam)*g, phi1, phi2) at points.

    ``u, g, phi1, phi2`` are arrays of values at ``points``.  Nodes flagged in
    ``boundary_mask`` lie on the pre-fractal boundary and get lam = 0.
    """
    pts = np.atleast_2d(points)
    u, g, phi1, phi2 = (np.broadcast_to(np.asarray(v, dtype=float), (len(pts),))
                        for v in (u, g, phi1, phi2))
    bad = np.flatnonzero(phi1 > phi2)
    if bad.size:
        raise ValueError(f"infeasible obstacles at node {int(bad[0])}: phi1 > phi2")
    lam = lambda_eval(fibers, pts)
    if boundary_mask is not None:
        bm = np.asarray(boundary_mask, dtype=bool)
        bad = np.flatnonzero(bm & ((g < phi1) | (g > phi2)))
        if bad.size:
            raise ValueError(f"boundary datum outside obstacles at node {int(bad[0])}")
        lam = np.where(bm, 0.0, lam)
    z = lam * u + (1.0 - lam) * g
    return np.minimum(np.maximum(z, phi1), phi2)
