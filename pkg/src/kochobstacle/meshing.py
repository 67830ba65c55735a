"""Conforming triangulations of pre-fractal domains.

Constrained Delaunay triangulation with Ruppert refinement is delegated to
Shewchuk's Triangle (through the ``triangle`` package).  Size grading,
interior smoothing, uniform refinement and all audits live here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import triangle as tr
from scipy.spatial import cKDTree

from .geometry import PrefractalDomain, sample_polyline


_MAX_ANGLE_FLOOR = 33.8


class MeshQualityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray        # (N, 2)
    triangles: np.ndarray       # (T, 3), counterclockwise
    boundary_nodes: np.ndarray  # sorted node indices
    boundary_edges: np.ndarray  # (E, 2)
    h_max: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_nodes, self.boundary_edges):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(T, 3, 2) constant gradients of the three hat functions per triangle."""
        v = self.vertices[self.triangles]
        # gradient of barycentric lambda_i is rot(-90)(opposite edge) / (2|T|)
        e0 = v[:, 2] - v[:, 1]
        e1 = v[:, 0] - v[:, 2]
        e2 = v[:, 1] - v[:, 0]
        edges = np.stack([e0, e1, e2], axis=1)
        grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
        return grads / (2.0 * self.areas)[:, None, None]

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        m = np.zeros(self.n_nodes)
        np.add.at(m, self.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
        return m

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    @cached_property
    def edges(self) -> np.ndarray:
        return _unique_edges(self.triangles)[0]

    def angles(self) -> np.ndarray:
        """(T, 3) interior angles in degrees."""
        v = self.vertices[self.triangles]
        return _angles(v)

    def min_angle(self) -> float:
        return float(self.angles().min())

    def circumradii(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        la = np.hypot(*(v[:, 1] - v[:, 2]).T)
        lb = np.hypot(*(v[:, 2] - v[:, 0]).T)
        lc = np.hypot(*(v[:, 0] - v[:, 1]).T)
        return la * lb * lc / (4.0 * self.areas)

    def max_edge_length(self) -> float:
        e = self.vertices[self.edges]
        return float(np.hypot(*(e[:, 1] - e[:, 0]).T).max())

    @cached_property
    def trifinder(self):
        from matplotlib.tri import Triangulation
        tri = Triangulation(self.vertices[:, 0], self.vertices[:, 1], self.triangles)
        return tri, tri.get_trifinder()

    def locate(self, points) -> np.ndarray:
        """Containing triangle of each point, -1 outside the mesh."""
        pts = np.atleast_2d(points)
        _, finder = self.trifinder
        return np.asarray(finder(pts[:, 0], pts[:, 1]))


def _angles(v: np.ndarray) -> np.ndarray:
    out = []
    for i in range(3):
        a, b, c = v[:, i], v[:, (i + 1) % 3], v[:, (i + 2) % 3]
        u, w = b - a, c - a
        cosang = np.einsum("ij,ij->i", u, w) / (np.hypot(*u.T) * np.hypot(*w.T))
        out.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    return np.stack(out, axis=1)


def _unique_edges(tris: np.ndarray):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.ravel(), counts


def _boundary_edges(tris: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, oriented as in that triangle."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inverse.ravel()] == 1
    return e[once]


def _make_mesh(verts, tris, h_max, meta) -> Mesh:
    verts = np.ascontiguousarray(verts, dtype=float)
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    v = verts[tris]
    signed = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) \
        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    flip = signed < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    bedges = _boundary_edges(tris)
    bedges = bedges[np.lexsort((bedges[:, 1], bedges[:, 0]))]
    bnodes = np.unique(bedges)
    return Mesh(verts, tris, bnodes, bedges, float(h_max), dict(meta))


def lattice_points(lo, hi, spacing: float) -> np.ndarray:
    """Equilateral lattice covering the box [lo, hi], anchored at lo."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    dy = spacing * math.sqrt(3.0) / 2.0
    rows = np.arange(0, int(math.ceil((hi[1] - lo[1]) / dy)) + 1)
    cols = np.arange(-1, int(math.ceil((hi[0] - lo[0]) / spacing)) + 1)
    C, R = np.meshgrid(cols, rows)
    x = lo[0] + spacing * (C + 0.5 * (R % 2))
    y = lo[1] + dy * R
    return np.column_stack([x.ravel(), y.ravel()])


def _smooth(verts: np.ndarray, tris: np.ndarray, fixed: np.ndarray, sweeps: int) -> np.ndarray:
    """Laplacian smoothing of free nodes; no triangle's minimum angle may drop."""
    n = len(verts)
    edges, _, _ = _unique_edges(tris)
    deg = np.bincount(edges.ravel(), minlength=n).astype(float)
    verts = verts.copy()
    for _ in range(sweeps):
        acc = np.zeros_like(verts)
        np.add.at(acc, edges[:, 0], verts[edges[:, 1]])
        np.add.at(acc, edges[:, 1], verts[edges[:, 0]])
        target = acc / deg[:, None]
        moving = ~fixed
        old_min = _angles(verts[tris]).min(axis=1)
        for _ in range(50):
            trial = np.where(moving[:, None], target, verts)
            new_min = _angles(trial[tris]).min(axis=1)
            worse = new_min < old_min
            revert = np.unique(tris[worse].ravel())
            revert = revert[moving[revert]]
            if revert.size == 0:
                break
            moving[revert] = False
        else:
            moving[:] = False
        verts = np.where(moving[:, None], target, verts)
    return verts


def triangulate(domain: PrefractalDomain, h_max: float, grading: float = 1.5,
                angle_floor: float = 20.0, smooth_sweeps: int = 3,
                max_passes: int = 12, seed_points: np.ndarray | None = None) -> Mesh:
    """Quality mesh of the domain with every boundary vertex kept as a mesh vertex.

    Target size at x is min(h_max, h_b + (grading - 1) * dist(x, boundary))
    where h_b = min(h_max, shortest boundary segment).  ``seed_points`` are
    inserted as fixed interior vertices (those closer than h_max to the
    boundary, or outside, are dropped).
    """
    if h_max <= 0:
        raise ValueError("h_max must be positive")
    if grading < 1:
        raise ValueError("grading must be >= 1")
    if not 0 < angle_floor <= _MAX_ANGLE_FLOOR:
        # Ruppert refinement is not guaranteed to terminate above ~33.8 degrees
        raise MeshQualityError(
            f"angle floor {angle_floor} deg unreachable (must lie in (0, {_MAX_ANGLE_FLOOR}])")
    ring = np.array(domain.boundary, dtype=float)
    nb = len(ring)
    segs = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])
    h_b = min(h_max, domain.min_segment_length)
    closed = np.vstack([ring, ring[:1]])
    tree = cKDTree(sample_polyline(closed, 0.25 * h_b))

    def size_at(x):
        d, _ = tree.query(x)
        return np.minimum(h_max, h_b + (grading - 1.0) * d)

    def max_area(h):
        return math.sqrt(3.0) / 4.0 * h ** 2

    nseed = 0
    if seed_points is not None:
        seeds = np.asarray(seed_points, dtype=float).reshape(-1, 2)
        d, _ = tree.query(seeds)
        seeds = seeds[(d >= h_max) & domain.contains(seeds, closed=False)]
        nseed = len(seeds)
        ring_in = np.vstack([ring, seeds])
    else:
        ring_in = ring
    opts = f"pq{angle_floor:g}Q"
    data = tr.triangulate({"vertices": ring_in, "segments": segs},
                          opts + f"a{max_area(h_max):.17g}")
    for _ in range(max_passes):
        verts, tris = data["vertices"], data["triangles"]
        cent = verts[tris].mean(axis=1)
        allowed = max_area(size_at(cent))
        a, b, c = (verts[tris[:, i]] for i in range(3))
        areas = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                             - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        if np.all(areas <= allowed * (1 + 1e-12)):
            break
        data = tr.triangulate({"vertices": verts, "triangles": tris,
                               "segments": data["segments"],
                               "triangle_max_area": np.minimum(allowed, areas)},
                              "r" + opts + "a")
    verts, tris = data["vertices"], data["triangles"]
    fixed = np.zeros(len(verts), dtype=bool)
    fixed[_boundary_edges(np.asarray(tris)).ravel()] = True
    fixed[nb:nb + nseed] = True
    if smooth_sweeps:
        verts = _smooth(verts, tris, fixed, smooth_sweeps)
    mesh = _make_mesh(verts, tris, h_max, {"grading": grading, "angle_floor": angle_floor,
                                           "level": domain.level, "seeds": nseed})
    missing = len(ring) - np.count_nonzero(np.isin(np.arange(len(ring)), mesh.boundary_nodes))
    if missing or not np.array_equal(mesh.vertices[:nb], ring):
        raise MeshQualityError("boundary vertices were not preserved")
    if np.any(mesh.areas <= 0):
        raise MeshQualityError("degenerate triangle produced")
    amin = mesh.min_angle()
    if amin < angle_floor - 1e-9:
        raise MeshQualityError(
            f"minimum angle {amin:.3f} deg below floor {angle_floor} deg at h_max={h_max}")
    return mesh


def refine(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle split into four through its edge midpoints."""
    tris = mesh.triangles
    edges, inverse, _ = _unique_edges(tris)
    n = mesh.n_nodes
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    T = len(tris)
    m01, m12, m20 = (n + inverse[k * T:(k + 1) * T] for k in range(3))
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    children = np.stack([
        np.column_stack([a, m01, m20]),
        np.column_stack([m01, b, m12]),
        np.column_stack([m20, m12, c]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)
    meta = dict(mesh.meta)
    meta["refinements"] = meta.get("refinements", 0) + 1
    return _make_mesh(verts, children, mesh.h_max / 2.0, meta)


def audit(mesh: Mesh) -> dict:
    """Structural checks; returns a dict of measured quantities."""
    edges, _, counts = _unique_edges(mesh.triangles)
    bset = {tuple(sorted(e)) for e in mesh.boundary_edges.tolist()}
    interior_ok = all(c == 2 or tuple(e) in bset for e, c in zip(edges.tolist(), counts))
    boundary_ok = all(c == 1 for e, c in zip(edges.tolist(), counts) if tuple(e) in bset)
    V, E, F = mesh.n_nodes, len(edges), mesh.n_triangles + 1
    return {
        "positive": bool(np.all(mesh.areas > 0)),
        "conforming": bool(interior_ok and boundary_ok),
        "euler": V - E + F,
        "min_angle": mesh.min_angle(),
        "area": float(mesh.areas.sum()),
    }


def prolongate(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Nodal values of the P1 field on ``refine(mesh)`` (exact: midpoints are averages)."""
    edges = _unique_edges(mesh.triangles)[0]
    values = np.asarray(values, dtype=float)
    return np.concatenate([values, 0.5 * (values[edges[:, 0]] + values[edges[:, 1]])])
