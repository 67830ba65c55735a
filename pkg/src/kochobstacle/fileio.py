"""Plain-text mesh/solution files, vertex dumps, trace CSVs and SVG renders.

Mesh file lines::

    h <h_max>
    v <x> <y>
    t <i> <j> <k>
    b <i>

Solution values are ``u <i> <value>`` lines, either in their own file or
appended to the mesh file.  Floats are written with ``%.17g`` so a reload
reproduces every bit.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .meshing import Mesh, _make_mesh

_G = "%.17g"


class FileFormatError(ValueError):
    pass


def write_mesh(path, mesh: Mesh, values: Optional[np.ndarray] = None) -> None:
    lines = [f"h {_G % mesh.h_max}"]
    lines += [f"v {_G % x} {_G % y}" for x, y in mesh.vertices]
    lines += [f"t {i} {j} {k}" for i, j, k in mesh.triangles]
    lines += [f"b {i}" for i in mesh.boundary_nodes]
    if values is not None:
        lines += [f"u {i} {_G % v}" for i, v in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    verts, tris, bnodes = [], [], []
    h_max = float("nan")
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            tag = parts[0]
            if tag == "h":
                h_max = float(parts[1])
            elif tag == "v":
                verts.append((float(parts[1]), float(parts[2])))
            elif tag == "t":
                tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
            elif tag == "b":
                bnodes.append(int(parts[1]))
            elif tag == "u":
                continue
            else:
                raise FileFormatError(f"{path}:{lineno}: unknown record {tag!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, FileFormatError):
                raise
            raise FileFormatError(f"{path}:{lineno}: malformed line {line!r}") from None
    mesh = _make_mesh(np.array(verts, dtype=float).reshape(-1, 2),
                      np.array(tris, dtype=np.int64).reshape(-1, 3), h_max, {})
    if bnodes and not np.array_equal(np.array(sorted(bnodes)), mesh.boundary_nodes):
        raise FileFormatError(f"{path}: boundary records disagree with the triangles")
    return mesh


def write_solution(path, values: np.ndarray) -> None:
    Path(path).write_text("".join(f"u {i} {_G % v}\n" for i, v in enumerate(values)))


def read_solution(path, n_nodes: Optional[int] = None) -> np.ndarray:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#") or parts[0] in ("h", "v", "t", "b"):
            continue
        if parts[0] != "u" or len(parts) != 3:
            raise FileFormatError(f"{path}:{lineno}: expected 'u <index> <value>'")
        pairs.append((int(parts[1]), float(parts[2])))
    n = n_nodes if n_nodes is not None else len(pairs)
    out = np.full(n, np.nan)
    for i, v in pairs:
        if not 0 <= i < n:
            raise FileFormatError(f"{path}: node index {i} outside 0..{n - 1}")
        out[i] = v
    if np.any(np.isnan(out)):
        raise FileFormatError(f"{path}: missing nodal values")
    return out


def write_vertices(path, vertices: np.ndarray) -> None:
    Path(path).write_text("".join(f"{_G % x} {_G % y}\n" for x, y in vertices))


def write_trace(path, trace: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "energy", "projected_gradient", "step", "max_element_gradient"))
        for it, val, res, step, mg in trace:
            w.writerow((int(it), _G % val, _G % res, _G % step, _G % mg))


def write_key_values(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}: {v}\n" for k, v in items.items()))


# ------------------------------------------------------------------ SVG

class _Canvas:
    def __init__(self, points: np.ndarray, width: int = 800, pad: float = 0.04):
        lo, hi = points.min(axis=0), points.max(axis=0)
        span = max(float(np.max(hi - lo)), 1e-12)
        lo = lo - pad * span
        hi = hi + pad * span
        self.scale = width / float(np.max(hi - lo))
        self.lo, self.hi = lo, hi
        self.w = int(round((hi[0] - lo[0]) * self.scale))
        self.h = int(round((hi[1] - lo[1]) * self.scale))
        self.items = []

    def xy(self, pts) -> str:
        pts = np.atleast_2d(pts)
        x = (pts[:, 0] - self.lo[0]) * self.scale
        y = (self.hi[1] - pts[:, 1]) * self.scale
        return " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(x, y))

    def polygon(self, pts, fill="none", stroke="black", width=1.0, opacity=1.0):
        self.items.append(f'<polygon points="{self.xy(pts)}" fill="{fill}" stroke="{stroke}" '
                          f'stroke-width="{width:g}" fill-opacity="{opacity:g}"/>')

    def polyline(self, pts, stroke="black", width=1.0):
        self.items.append(f'<polyline points="{self.xy(pts)}" fill="none" stroke="{stroke}" '
                          f'stroke-width="{width:g}"/>')

    def text(self):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>']
                         + self.items + ["</svg>"]) + "\n"


def _hex(rgba) -> str:
    r, g, b = (int(round(255 * c)) for c in rgba[:3])
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_domain(path, boundary: np.ndarray, fibers=None, curves: Iterable = ()) -> None:
    """Domain outline, optionally with inner (blue) and outer (red) fibers."""
    pts = [boundary]
    if fibers is not None:
        pts.append(fibers.outer.reshape(-1, 2))
    cv = _Canvas(np.vstack(pts))
    cv.polygon(boundary, fill="#eeeeee", width=0.8)
    if fibers is not None:
        for t in fibers.outer:
            cv.polygon(t, fill="#d62728", stroke="#d62728", width=0.3, opacity=0.35)
        for t in fibers.inner:
            cv.polygon(t, fill="#1f77b4", stroke="#1f77b4", width=0.3, opacity=0.35)
    for c in curves:
        cv.polyline(c, stroke="#2ca02c", width=1.2)
    Path(path).write_text(cv.text())


def svg_mesh(path, mesh: Mesh, values: Optional[np.ndarray] = None, cmap: str = "viridis") -> None:
    """Wireframe, or a per-triangle heatmap of the nodal field when ``values`` is given."""
    cv = _Canvas(mesh.vertices)
    if values is None:
        for tri in mesh.triangles:
            cv.polygon(mesh.vertices[tri], width=0.3)
    else:
        from matplotlib import colormaps
        cm = colormaps[cmap]
        tv = np.asarray(values)[mesh.triangles].mean(axis=1)
        lo, hi = float(np.min(values)), float(np.max(values))
        z = (tv - lo) / (hi - lo) if hi > lo else np.zeros_like(tv)
        for tri, c in zip(mesh.triangles, cm(z)):
            col = _hex(c)
            cv.polygon(mesh.vertices[tri], fill=col, stroke=col, width=0.2)
    b = mesh.boundary_edges
    for e in b:
        cv.polyline(mesh.vertices[e], width=0.6)
    Path(path).write_text(cv.text())
