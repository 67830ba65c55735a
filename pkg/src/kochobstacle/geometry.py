"""Koch pre-fractal curves and snowflake-type domains.

The four similitudes act on the complex plane and map the unit segment
[0, 1] onto the four pieces of the first Koch iterate.  Curves are built by
segment recursion rather than by composing maps per point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import shapely
from scipy.spatial.distance import directed_hausdorff


class GeometryError(ValueError):
    """Invalid geometric input or a construction that self-intersects."""


class SelfIntersectionError(GeometryError):
    def __init__(self, i: int, j: int):
        super().__init__(f"boundary segments {i} and {j} intersect")
        self.pair = (i, j)


def theta_of_alpha(alpha: float) -> float:
    """Rotation angle of the middle similitudes for contraction 1/alpha."""
    if not 2.0 < alpha < 4.0:
        raise GeometryError(f"alpha must lie in (2, 4), got {alpha!r}")
    return math.asin(math.sqrt(alpha * (4.0 - alpha)) / 2.0)


def fractal_dimension(alpha: float) -> float:
    """Hausdorff dimension ln 4 / ln alpha of the limit curve."""
    theta_of_alpha(alpha)
    return math.log(4.0) / math.log(alpha)


@dataclass(frozen=True)
class IfsParams:
    alpha: float
    theta: float

    def __post_init__(self):
        expected = theta_of_alpha(self.alpha)
        if abs(expected - self.theta) > 1e-14:
            raise GeometryError(f"theta {self.theta!r} does not match alpha {self.alpha!r}")

    @classmethod
    def from_alpha(cls, alpha: float) -> "IfsParams":
        return cls(float(alpha), theta_of_alpha(alpha))

    @property
    def apex(self) -> complex:
        # image of 0 under the third map, the tip of the first-level bump
        return complex(0.5, math.sqrt(1.0 / self.alpha - 0.25))


def similitude(index: int, ifs: IfsParams):
    """Return psi_index as a function on complex numbers (or arrays of them)."""
    a, t = ifs.alpha, ifs.theta
    if index == 1:
        return lambda z: z / a
    if index == 2:
        rot = complex(math.cos(t), math.sin(t))
        return lambda z: z / a * rot + 1.0 / a
    if index == 3:
        rot = complex(math.cos(t), -math.sin(t))
        shift = ifs.apex
        return lambda z: z / a * rot + shift
    if index == 4:
        return lambda z: (z - 1.0) / a + 1.0
    raise ValueError(f"similitude index must be 1..4, got {index!r}")


def apply_similitude(index: int, ifs: IfsParams, point) -> np.ndarray:
    z = complex(point[0], point[1])
    w = similitude(index, ifs)(z)
    return np.array([w.real, w.imag])


def _unit_curve(n: int, ifs: IfsParams) -> np.ndarray:
    """Complex vertices of K^n on the unit segment, ordered 0 -> 1."""
    a = ifs.alpha
    weights = np.array([0.0, 1.0 / a, ifs.apex, 1.0 - 1.0 / a], dtype=complex)
    z = np.array([0.0, 1.0], dtype=complex)
    for _ in range(n):
        start = z[:-1]
        d = np.diff(z)
        pieces = start[:, None] + d[:, None] * weights[None, :]
        z = np.concatenate([pieces.ravel(), z[-1:]])
    return z


@dataclass(frozen=True)
class PrefractalCurve:
    level: int
    endpoints: tuple
    vertices: np.ndarray

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.hypot(*np.diff(self.vertices, axis=0).T)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())


def generate_prefractal(n: int, ifs: IfsParams, a, b) -> PrefractalCurve:
    if n < 0:
        raise GeometryError("level must be nonnegative")
    za, zb = complex(*a), complex(*b)
    if za == zb:
        raise GeometryError("degenerate segment: a == b")
    z = za + (zb - za) * _unit_curve(n, ifs)
    verts = np.column_stack([z.real, z.imag])
    verts[0], verts[-1] = a, b
    verts.setflags(write=False)
    return PrefractalCurve(n, (tuple(map(float, a)), tuple(map(float, b))), verts)


def regular_polygon(m: int, side: float = 1.0) -> np.ndarray:
    """Counterclockwise regular m-gon whose first side runs (0,0) -> (side,0)."""
    if m < 3:
        raise GeometryError("polygon needs at least 3 sides")
    verts = [np.zeros(2)]
    for k in range(m - 1):
        ang = 2.0 * math.pi * k / m
        verts.append(verts[-1] + side * np.array([math.cos(ang), math.sin(ang)]))
    return np.array(verts)


def shoelace_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _check_convex_ccw(base: np.ndarray):
    if base.ndim != 2 or base.shape[1] != 2 or len(base) < 3:
        raise GeometryError("base must be an (m, 2) array with m >= 3")
    if shoelace_area(base) <= 0:
        raise GeometryError("base polygon must be counterclockwise")
    e = np.roll(base, -1, axis=0) - base
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    if np.any(cross <= 0):
        raise GeometryError("base polygon must be strictly convex")


def find_intersecting_segments(ring: np.ndarray):
    """First pair (i, j) of non-adjacent intersecting segments of a closed ring, or None."""
    nseg = len(ring)
    segs = shapely.linestrings(np.stack([ring, np.roll(ring, -1, axis=0)], axis=1))
    tree = shapely.STRtree(segs)
    left, right = tree.query(segs, predicate="intersects")
    keep = left < right
    left, right = left[keep], right[keep]
    adjacent = (right - left == 1) | ((left == 0) & (right == nseg - 1))
    for i, j in zip(left[~adjacent], right[~adjacent]):
        return int(i), int(j)
    # adjacent segments may only share their common endpoint
    for i, j in zip(left[adjacent], right[adjacent]):
        inter = shapely.intersection(segs[i], segs[j])
        if inter.geom_type != "Point":
            return int(i), int(j)
    return None


@dataclass(frozen=True)
class PrefractalDomain:
    base: np.ndarray
    level: int
    ifs: IfsParams
    boundary: np.ndarray
    area: float

    @property
    def n_sides(self) -> int:
        return len(self.base)

    @property
    def segments_per_side(self) -> int:
        return 4 ** self.level

    @property
    def segments(self) -> np.ndarray:
        """(N, 2, 2) array of oriented boundary segments."""
        return np.stack([self.boundary, np.roll(self.boundary, -1, axis=0)], axis=1)

    @property
    def diameter(self) -> float:
        lo, hi = self.boundary.min(axis=0), self.boundary.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    @property
    def min_segment_length(self) -> float:
        return float(np.hypot(*np.diff(self.segments, axis=1)[:, 0].T).min())

    @cached_property
    def polygon(self):
        poly = shapely.Polygon(self.boundary)
        shapely.prepare(poly)
        return poly

    def contains(self, points, closed: bool = True) -> np.ndarray:
        pts = np.atleast_2d(points)
        test = shapely.intersects_xy if closed else shapely.contains_xy
        return test(self.polygon, pts[:, 0], pts[:, 1])


def build_domain(base, n: int, ifs: IfsParams) -> PrefractalDomain:
    """Replace every side of a convex CCW polygon by an outward level-n Koch curve."""
    base = np.asarray(base, dtype=float)
    _check_convex_ccw(base)
    if n < 0:
        raise GeometryError("level must be nonnegative")
    parts = []
    for a, b in zip(base, np.roll(base, -1, axis=0)):
        # built b -> a so that the bump (left of travel) points outward, then reversed
        curve = generate_prefractal(n, ifs, b, a).vertices[::-1]
        parts.append(curve[:-1])
    ring = np.concatenate(parts)
    pair = find_intersecting_segments(ring)
    if pair is not None:
        raise SelfIntersectionError(*pair)
    ring.setflags(write=False)
    base = base.copy()
    base.setflags(write=False)
    return PrefractalDomain(base, n, ifs, ring, shoelace_area(ring))


def sample_polyline(verts: np.ndarray, spacing: float) -> np.ndarray:
    """Points along an open polyline no farther apart than ``spacing``."""
    out = []
    for p, q in zip(verts[:-1], verts[1:]):
        k = max(1, int(math.ceil(np.hypot(*(q - p)) / spacing)))
        t = np.arange(k)[:, None] / k
        out.append(p + t * (q - p))
    out.append(verts[-1:])
    return np.concatenate(out)


def hausdorff_distance(c1: np.ndarray, c2: np.ndarray, spacing: float) -> float:
    a, b = sample_polyline(c1, spacing), sample_polyline(c2, spacing)
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])
