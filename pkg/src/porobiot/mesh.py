"""Structured triangulations of axis-aligned rectangles.

Each grid quad is split along its lower-left to upper-right diagonal,
giving a deterministic conforming triangle mesh with globally oriented
edges (low vertex index to high vertex index).  The per-cell edge signs
convert the global edge normal into the cell-outward normal, which is
the bookkeeping lowest-order Raviart-Thomas elements need.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class MeshError(RuntimeError):
    """Invalid mesh topology or degenerate geometry."""


class Side(enum.Enum):
    """Boundary side tags of the rectangle."""

    LEFT = "left"
    RIGHT = "right"
    BOTTOM = "bottom"
    TOP = "top"


@dataclass(frozen=True)
class CellGeometry:
    """Affine geometry of one triangle: area, barycentric gradients, diameter."""

    area: float
    grads: np.ndarray  # (3, 2), gradients of the barycentric coordinates
    diameter: float


class Mesh:
    """Conforming triangulation of a rectangle with oriented edge data.

    Attributes
    ----------
    vertices : (V, 2) float array
    cells : (F, 3) int array
        Vertex indices, counter-clockwise.
    edges : (E, 2) int array
        Vertex index pairs, low index first.
    cell_edge_ids : (F, 3) int array
        Global edge index of the edge opposite each local vertex.
    cell_edge_signs : (F, 3) int array
        +1 where the global edge normal is cell-outward, -1 otherwise.
    boundary_tags : dict[int, Side]
        Side tag for every boundary edge.
    """

    def __init__(self, vertices, cells, edges, cell_edge_ids, cell_edge_signs,
                 boundary_tags, structured=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.edges = np.asarray(edges, dtype=np.int64)
        self.cell_edge_ids = np.asarray(cell_edge_ids, dtype=np.int64)
        self.cell_edge_signs = np.asarray(cell_edge_signs, dtype=np.int64)
        self.boundary_tags = dict(boundary_tags)
        # (origin, extent, nx, ny) when built by generate_rect_mesh
        self.structured = structured
        self._compute_geometry()
        for arr in (self.vertices, self.cells, self.edges,
                    self.cell_edge_ids, self.cell_edge_signs,
                    self.areas, self.grads, self.diameters, self.edge_lengths):
            arr.flags.writeable = False

    def _compute_geometry(self):
        p0 = self.vertices[self.cells[:, 0]]
        p1 = self.vertices[self.cells[:, 1]]
        p2 = self.vertices[self.cells[:, 2]]
        d1, d2 = p1 - p0, p2 - p0
        twice_area = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(twice_area <= 0.0):
            raise MeshError("non-positive cell area (cells must be counter-clockwise)")
        self.areas = 0.5 * twice_area
        # gradient of barycentric i = perp(opposite edge vector) / (2 area)
        grads = np.empty((self.n_cells, 3, 2))
        corners = (p0, p1, p2)
        for i in range(3):
            e = corners[(i + 2) % 3] - corners[(i + 1) % 3]
            grads[:, i, 0] = -e[:, 1]
            grads[:, i, 1] = e[:, 0]
        grads /= twice_area[:, None, None]
        self.grads = grads
        sides = np.stack([np.linalg.norm(p1 - p0, axis=1),
                          np.linalg.norm(p2 - p1, axis=1),
                          np.linalg.norm(p0 - p2, axis=1)])
        self.diameters = sides.max(axis=0)
        ev = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        self.edge_lengths = np.linalg.norm(ev, axis=1)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def h(self):
        """Mesh size: maximum cell diameter."""
        return float(self.diameters.max())

    def cell_geometry(self, cell):
        return cell_geometry(self, cell)

    def boundary_edges(self, tag):
        return boundary_edges(self, tag)

    def edge_normal(self, edge):
        """Unit normal of the globally oriented edge (tangent rotated by -90 deg)."""
        a, b = self.edges[edge]
        t = self.vertices[b] - self.vertices[a]
        t = t / np.linalg.norm(t)
        return np.array([t[1], -t[0]])

    def cell_centroids(self):
        return self.vertices[self.cells].mean(axis=1)

    def locate_cell(self, point):
        """Index of a cell containing `point` (structured fast path, else scan)."""
        point = np.asarray(point, dtype=float)
        if self.structured is not None:
            origin, extent, nx, ny = self.structured
            fx = (point[0] - origin[0]) / extent[0] * nx
            fy = (point[1] - origin[1]) / extent[1] * ny
            ix = min(max(int(fx), 0), nx - 1)
            iy = min(max(int(fy), 0), ny - 1)
            base = 2 * (iy * nx + ix)
            # lower triangle of the quad holds points below the diagonal
            if (fx - ix) >= (fy - iy):
                cand = (base, base + 1)
            else:
                cand = (base + 1, base)
            for c in cand:
                if self._bary(c, point).min() >= -1e-12:
                    return c
        for c in range(self.n_cells):
            if self._bary(c, point).min() >= -1e-12:
                return c
        raise MeshError(f"point {point} lies outside the mesh")

    def _bary(self, cell, point):
        corners = self.vertices[self.cells[cell]]
        lam = np.empty(3)
        for i in range(3):
            g = self.grads[cell, i]
            lam[i] = 1.0 + g @ (point - corners[i])
        return lam

    def dump(self, path):
        """Write the plain-text mesh dump: header `V E F`, vertices, cells, edges."""
        tag_code = {Side.LEFT: 0, Side.RIGHT: 1, Side.BOTTOM: 2, Side.TOP: 3}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.n_vertices} {self.n_edges} {self.n_cells}\n")
            for x, y in self.vertices:
                fh.write(f"{x:.17g} {y:.17g}\n")
            for a, b, c in self.cells:
                fh.write(f"{a} {b} {c}\n")
            for e, (a, b) in enumerate(self.edges):
                tag = tag_code.get(self.boundary_tags.get(e, None), -1)
                fh.write(f"{a} {b} {tag}\n")


def generate_rect_mesh(origin, extent, nx, ny):
    """Triangulate [origin, origin+extent] with an nx-by-ny grid of split quads.

    Parameters
    ----------
    origin, extent : length-2 sequences
    nx, ny : int
        Number of quads per direction; each quad yields two triangles.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    origin = np.asarray(origin, dtype=float)
    extent = np.asarray(extent, dtype=float)
    if extent[0] <= 0 or extent[1] <= 0:
        raise ValueError("extents must be positive")

    xs = origin[0] + extent[0] * np.arange(nx + 1) / nx
    ys = origin[1] + extent[1] * np.arange(ny + 1) / ny
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
    k = 0
    for j in range(ny):
        for i in range(nx):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            cells[k] = (v00, v10, v11)      # below the v00-v11 diagonal
            cells[k + 1] = (v00, v11, v01)  # above it
            k += 2

    # global edges: unique sorted vertex pairs, ordered lexicographically
    local = np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1)
    local_sorted = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(local_sorted, axis=0, return_inverse=True)
    cell_edge_ids = inverse.reshape(-1, 3)

    # sign: +1 when the global edge normal points away from the opposite vertex
    signs = np.empty((len(cells), 3), dtype=np.int64)
    for loc in range(3):
        eids = cell_edge_ids[:, loc]
        a = vertices[edges[eids, 0]]
        b = vertices[edges[eids, 1]]
        t = b - a
        normal = np.column_stack([t[:, 1], -t[:, 0]])
        opposite = vertices[cells[:, loc]]
        mid = 0.5 * (a + b)
        signs[:, loc] = np.where(np.einsum("ij,ij->i", normal, mid - opposite) > 0, 1, -1)

    counts = np.bincount(cell_edge_ids.ravel(), minlength=len(edges))
    if not np.all((counts == 1) | (counts == 2)):
        raise MeshError("edge shared by more than two cells")
    boundary = np.nonzero(counts == 1)[0]

    x0, y0 = origin
    x1, y1 = origin + extent
    atol = 1e-12 * max(extent)
    boundary_tags = {}
    for e in boundary:
        pa, pb = vertices[edges[e, 0]], vertices[edges[e, 1]]
        if abs(pa[0] - x0) < atol and abs(pb[0] - x0) < atol:
            boundary_tags[int(e)] = Side.LEFT
        elif abs(pa[0] - x1) < atol and abs(pb[0] - x1) < atol:
            boundary_tags[int(e)] = Side.RIGHT
        elif abs(pa[1] - y0) < atol and abs(pb[1] - y0) < atol:
            boundary_tags[int(e)] = Side.BOTTOM
        elif abs(pa[1] - y1) < atol and abs(pb[1] - y1) < atol:
            boundary_tags[int(e)] = Side.TOP
        else:
            raise MeshError("boundary edge not on the rectangle boundary")

    return Mesh(vertices, cells, edges, cell_edge_ids, signs, boundary_tags,
                structured=(tuple(origin), tuple(extent), nx, ny))


def cell_geometry(mesh, cell):
    """Area, barycentric gradients and diameter of one cell."""
    if not 0 <= cell < mesh.n_cells:
        raise ValueError(f"cell index {cell} out of range")
    area = float(mesh.areas[cell])
    if area <= 0.0:
        raise MeshError(f"degenerate cell {cell}")
    return CellGeometry(area, mesh.grads[cell].copy(), float(mesh.diameters[cell]))


def boundary_edges(mesh, tag):
    """Edge indices on the given boundary side, ascending."""
    return np.array(sorted(e for e, t in mesh.boundary_tags.items() if t is tag),
                    dtype=np.int64)
