"""Discrete spaces on triangle meshes: vector P1, lowest-order Raviart-Thomas, P0.

DOF conventions
---------------
* vector P1: two DOFs per vertex, interleaved (x-component at 2*v, y at 2*v+1);
* RT0: one DOF per edge, the constant normal component of the field along the
  globally oriented edge normal;
* P0: one DOF per cell.
"""

from __future__ import annotations

import enum

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh


class SpaceKind(enum.Enum):
    P1_VECTOR = "p1_vector"
    RT0 = "rt0"
    P0 = "p0"


class DofMap:
    """Cell-to-global DOF map for one discrete space on one mesh."""

    def __init__(self, mesh: Mesh, kind: SpaceKind):
        self.mesh = mesh
        self.kind = kind
        if kind is SpaceKind.P1_VECTOR:
            self.n_dofs = 2 * mesh.n_vertices
            c = mesh.cells
            self.cell_to_dofs = np.stack(
                [2 * c[:, 0], 2 * c[:, 0] + 1,
                 2 * c[:, 1], 2 * c[:, 1] + 1,
                 2 * c[:, 2], 2 * c[:, 2] + 1], axis=1)
        elif kind is SpaceKind.RT0:
            self.n_dofs = mesh.n_edges
            self.cell_to_dofs = mesh.cell_edge_ids.copy()
        elif kind is SpaceKind.P0:
            self.n_dofs = mesh.n_cells
            self.cell_to_dofs = np.arange(mesh.n_cells, dtype=np.int64)[:, None]
        else:
            raise ValueError(f"unknown space kind {kind}")
        self.cell_to_dofs.flags.writeable = False
        self._mass = None

    @property
    def mass_matrix(self):
        """Global mass matrix of the space (CSR, assembled lazily)."""
        if self._mass is None:
            self._mass = _assemble_mass(self)
        return self._mass


class FeFunction:
    """Coefficient vector bound to a DofMap."""

    def __init__(self, dofmap: DofMap, coeffs=None):
        self.dofmap = dofmap
        if coeffs is None:
            coeffs = np.zeros(dofmap.n_dofs)
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (dofmap.n_dofs,):
            raise ValueError("coefficient length does not match the DOF map")

    @property
    def mesh(self):
        return self.dofmap.mesh

    @property
    def kind(self):
        return self.dofmap.kind

    def copy(self):
        return FeFunction(self.dofmap, self.coeffs.copy())


class QuadratureRule:
    """Barycentric points and weights on the reference triangle, weights sum to 1."""

    def __init__(self, degree, points, weights):
        self.degree = degree
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)


_RULES = {}


def quadrature(degree) -> QuadratureRule:
    """Quadrature rule exact for polynomials up to `degree` (1, 2 or 4)."""
    if degree in _RULES:
        return _RULES[degree]
    if degree == 1:
        pts = [(1 / 3, 1 / 3, 1 / 3)]
        wts = [1.0]
    elif degree == 2:
        pts = [(2 / 3, 1 / 6, 1 / 6), (1 / 6, 2 / 3, 1 / 6), (1 / 6, 1 / 6, 2 / 3)]
        wts = [1 / 3] * 3
    elif degree == 4:
        a1, a2 = 0.445948490915965, 0.091576213509771
        w1, w2 = 0.223381589678011, 0.109951743655322
        pts, wts = [], []
        for a, w in ((a1, w1), (a2, w2)):
            b = 1.0 - 2.0 * a
            pts += [(b, a, a), (a, b, a), (a, a, b)]
            wts += [w] * 3
    else:
        raise ValueError(f"unsupported quadrature degree {degree}")
    rule = QuadratureRule(degree, pts, wts)
    _RULES[degree] = rule
    return rule


def rt0_basis(mesh, cell, point):
    """The three RT0 basis functions of a cell at a point inside it.

    Returns a list of (value, divergence) pairs ordered like the cell's
    edges.  Basis i has unit normal trace along the global normal of its
    edge and zero trace on the other two.
    """
    point = np.asarray(point, dtype=float)
    lam = mesh._bary(cell, point)
    if lam.min() < -1e-12:
        raise ValueError(f"point {point} outside cell {cell}")
    area = mesh.areas[cell]
    out = []
    for i in range(3):
        eid = mesh.cell_edge_ids[cell, i]
        sign = mesh.cell_edge_signs[cell, i]
        elen = mesh.edge_lengths[eid]
        opp = mesh.vertices[mesh.cells[cell, i]]
        value = sign * elen / (2.0 * area) * (point - opp)
        div = sign * elen / area
        out.append((value, float(div)))
    return out


def p1_vector_eval(mesh, cell, coeffs, point=None):
    """Value, gradient, divergence and strain of a local P1 vector field.

    `coeffs` holds the six local coefficients (x0, y0, x1, y1, x2, y2);
    gradient, divergence and strain are constant over the cell.  The value
    is taken at `point` (cell barycenter when omitted).
    """
    coeffs = np.asarray(coeffs, dtype=float).reshape(3, 2)
    grads = mesh.grads[cell]
    grad = coeffs.T @ grads  # grad[c, d] = d u_c / d x_d
    div = float(np.trace(grad))
    strain = 0.5 * (grad + grad.T)
    if point is None:
        lam = np.full(3, 1 / 3)
    else:
        lam = mesh._bary(cell, np.asarray(point, dtype=float))
    value = lam @ coeffs
    return value, grad, div, strain


def p1_vector_div_cells(f: FeFunction):
    """Cellwise (constant) divergence of a vector P1 function, shape (F,)."""
    _require(f, SpaceKind.P1_VECTOR)
    mesh = f.mesh
    local = f.coeffs[f.dofmap.cell_to_dofs].reshape(-1, 3, 2)
    return np.einsum("fvc,fvc->f", local, mesh.grads)


def rt0_div_cells(f: FeFunction):
    """Cellwise (constant) divergence of an RT0 function, shape (F,)."""
    _require(f, SpaceKind.RT0)
    mesh = f.mesh
    local = f.coeffs[f.dofmap.cell_to_dofs]
    signed_len = mesh.cell_edge_signs * mesh.edge_lengths[mesh.cell_edge_ids]
    return (local * signed_len).sum(axis=1) / mesh.areas


def _local_mass(dofmap: DofMap):
    """Per-cell local mass matrices, shape (F, k, k)."""
    mesh = dofmap.mesh
    if dofmap.kind is SpaceKind.P0:
        return mesh.areas[:, None, None].copy()
    if dofmap.kind is SpaceKind.P1_VECTOR:
        m3 = (np.ones((3, 3)) + np.eye(3)) / 12.0  # int lam_i lam_j / area
        loc = np.zeros((6, 6))
        for i in range(3):
            for j in range(3):
                loc[2 * i, 2 * j] = m3[i, j]
                loc[2 * i + 1, 2 * j + 1] = m3[i, j]
        return mesh.areas[:, None, None] * loc[None, :, :]
    # RT0: degree-2 quadrature, exact for products of linear fields
    rule = quadrature(2)
    vals = _rt0_values_at(mesh, rule)  # (F, nq, 3, 2)
    w = rule.weights
    loc = np.einsum("q,fqid,fqjd->fij", w, vals, vals) * mesh.areas[:, None, None]
    return loc


def _rt0_values_at(mesh, rule):
    """RT0 basis values at quadrature points of every cell, shape (F, nq, 3, 2)."""
    corners = mesh.vertices[mesh.cells]             # (F, 3, 2)
    pts = np.einsum("qv,fvd->fqd", rule.points, corners)
    signed = mesh.cell_edge_signs * mesh.edge_lengths[mesh.cell_edge_ids]  # (F, 3)
    scale = signed / (2.0 * mesh.areas[:, None])    # (F, 3)
    diff = pts[:, :, None, :] - corners[:, None, :, :]
    return scale[:, None, :, None] * diff


def _assemble_mass(dofmap: DofMap):
    loc = _local_mass(dofmap)
    k = loc.shape[1]
    dofs = dofmap.cell_to_dofs
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    mat = sp.coo_matrix((loc.ravel(), (rows, cols)),
                        shape=(dofmap.n_dofs, dofmap.n_dofs))
    return mat.tocsr()


def _require(f, kind):
    if f.kind is not kind:
        raise ValueError(f"expected a {kind.value} function, got {f.kind.value}")


def l2_inner(f: FeFunction, g: FeFunction):
    """L2 inner product of two functions from the same space."""
    if f.dofmap is not g.dofmap:
        if f.kind is not g.kind or f.dofmap.n_dofs != g.dofmap.n_dofs \
                or f.mesh is not g.mesh:
            raise ValueError("functions live in different spaces")
    return float(f.coeffs @ (f.dofmap.mass_matrix @ g.coeffs))


def l2_norm(f: FeFunction):
    """L2 norm of a finite element function (mass-matrix weighted)."""
    return float(np.sqrt(max(l2_inner(f, f), 0.0)))


def interpolate(dofmap: DofMap, fn) -> FeFunction:
    """Canonical interpolation of a callable field.

    P0 takes cell-centroid values, vector P1 vertex values and RT0 the
    normal component at edge midpoints (exact for fields with edgewise
    linear normal traces).  `fn` maps (x, y) to a scalar (P0) or a pair.
    """
    mesh = dofmap.mesh
    if dofmap.kind is SpaceKind.P0:
        cent = mesh.cell_centroids()
        coeffs = np.array([float(fn(x, y)) for x, y in cent])
    elif dofmap.kind is SpaceKind.P1_VECTOR:
        coeffs = np.empty(dofmap.n_dofs)
        for v, (x, y) in enumerate(mesh.vertices):
            val = np.asarray(fn(x, y), dtype=float)
            coeffs[2 * v] = val[0]
            coeffs[2 * v + 1] = val[1]
    elif dofmap.kind is SpaceKind.RT0:
        coeffs = np.empty(dofmap.n_dofs)
        for e, (a, b) in enumerate(mesh.edges):
            mid = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
            n = mesh.edge_normal(e)
            coeffs[e] = float(np.asarray(fn(*mid)) @ n)
    else:
        raise ValueError(f"unknown space kind {dofmap.kind}")
    return FeFunction(dofmap, coeffs)
