"""Sparse operators, load vectors and essential constraints of the Biot system.

Assembled blocks (with Z the vector P1 space, V the RT0 space, W the P0
space):

* ``a_e``   : 2 mu <eps(u) : eps(z)>        on Z x Z
* ``d_div`` : <div u, div z>                on Z x Z
* ``b_up``  : <p, div z>                    W -> Z dual
* ``m_q``   : nu_f <K^-1 q, v>              on V x V
* ``b_qp``  : <div q, w>                    V -> W dual (entries: signed |e|)
* ``m_p``   : <p, w>                        on W x W (diagonal of cell areas)

Because P0 pressures and P1 divergences are cellwise constant, the
non-linear terms <b(p), w> and <h(div u), div z> are assembled exactly
without quadrature.  Essential conditions (displacement Dirichlet, no-flow
edges, the tied rigid-plate group) are applied by symmetric master-slave
reduction, which keeps the diagonal blocks definite for the preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, SpaceKind, quadrature, _rt0_values_at
from .mesh import Mesh, Side
from .physics import MaterialModel, ProblemDefinition


class ConstraintConflictError(ValueError):
    """A DOF received conflicting essential constraints."""


@dataclass
class ReducedSystem:
    """A constraint-reduced operator with its right-hand-side lift shift.

    Given a full right-hand side b, the reduced system reads
    ``matrix @ x_red = R^T b - rhs_shift``.
    """

    matrix: sp.spmatrix
    rhs_shift: np.ndarray
    names: tuple


def assemble_mechanics(mesh: Mesh, mat: MaterialModel, dofmap_u: DofMap,
                       dofmap_p: DofMap):
    """Elasticity, div-div and pressure-coupling blocks.

    Returns
    -------
    a_e, d_div : csr_matrix, shape (n_u, n_u)
    b_up : csr_matrix, shape (n_u, n_p)
    """
    grads = mesh.grads                      # (F, 3, 2)
    areas = mesh.areas
    n_cells = mesh.n_cells

    gg = np.einsum("fvd,fwd->fvw", grads, grads)
    a_loc = np.zeros((n_cells, 6, 6))
    for c in range(2):
        for cp in range(2):
            term = np.einsum("fw,fv->fvw", grads[:, :, c], grads[:, :, cp])
            if c == cp:
                term = term + gg
            a_loc[:, c::2, cp::2] = term
    a_loc *= (mat.mu * areas)[:, None, None]

    divloc = grads.reshape(n_cells, 6)      # div of local basis j = 2v + c
    d_loc = areas[:, None, None] * divloc[:, :, None] * divloc[:, None, :]

    dofs = dofmap_u.cell_to_dofs
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    shape = (dofmap_u.n_dofs, dofmap_u.n_dofs)
    a_e = sp.coo_matrix((a_loc.ravel(), (rows, cols)), shape=shape).tocsr()
    d_div = sp.coo_matrix((d_loc.ravel(), (rows, cols)), shape=shape).tocsr()

    bu_vals = (areas[:, None] * divloc).ravel()
    bu_rows = dofs.ravel()
    bu_cols = np.repeat(np.arange(n_cells), 6)
    b_up = sp.coo_matrix((bu_vals, (bu_rows, bu_cols)),
                         shape=(dofmap_u.n_dofs, dofmap_p.n_dofs)).tocsr()
    return a_e, d_div, b_up


def assemble_flow(mesh: Mesh, mat: MaterialModel, dofmap_q: DofMap,
                  dofmap_p: DofMap):
    """Weighted RT0 mass, flux-divergence map and P0 mass.

    Returns
    -------
    m_q : csr_matrix, shape (n_q, n_q)
    b_qp : csr_matrix, shape (n_p, n_q), entries are signed edge lengths
    m_p : dia/csr matrix, diagonal of cell areas
    """
    rule = quadrature(2)
    vals = _rt0_values_at(mesh, rule)       # (F, nq, 3, 2)
    corners = mesh.vertices[mesh.cells]
    pts = np.einsum("qv,fvd->fqd", rule.points, corners)
    kvals = np.asarray(mat.kappa(pts[:, :, 0], pts[:, :, 1]), dtype=float)
    if np.any(kvals <= 0.0):
        raise ValueError("non-positive permeability sampled at a quadrature point")
    kinv = mat.nu_f / kvals
    m_loc = np.einsum("fq,fqid,fqjd->fij", rule.weights[None, :] * kinv, vals, vals)
    m_loc *= mesh.areas[:, None, None]

    dofs = dofmap_q.cell_to_dofs
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    m_q = sp.coo_matrix((m_loc.ravel(), (rows, cols)),
                        shape=(dofmap_q.n_dofs, dofmap_q.n_dofs)).tocsr()

    signed = (mesh.cell_edge_signs * mesh.edge_lengths[mesh.cell_edge_ids])
    bq_rows = np.repeat(np.arange(mesh.n_cells), 3)
    b_qp = sp.coo_matrix((signed.ravel(), (bq_rows, dofs.ravel())),
                         shape=(dofmap_p.n_dofs, dofmap_q.n_dofs)).tocsr()

    m_p = sp.diags(mesh.areas).tocsr()
    return m_q, b_qp, m_p


class FieldConstraints:
    """Essential constraints on one field via master-slave reduction.

    x_full = R x_reduced + lift, with one reduced unknown per free DOF and
    per tie group.  Reduction of a system is R^T A R, R^T (b - A lift).
    """

    def __init__(self, n_full, pinned=None, ties=()):
        pinned = dict(pinned or {})
        self.n_full = n_full
        self.pinned = pinned
        self.ties = [list(t) for t in ties]
        tied_dofs = {}
        for gi, group in enumerate(self.ties):
            for d in group:
                if d in pinned:
                    raise ConstraintConflictError(f"DOF {d} both pinned and tied")
                if d in tied_dofs:
                    raise ConstraintConflictError(f"DOF {d} in two tie groups")
                tied_dofs[d] = gi
        reduced_of = np.full(n_full, -1, dtype=np.int64)
        group_red = [-1] * len(self.ties)
        nred = 0
        for d in range(n_full):
            if d in pinned:
                continue
            gi = tied_dofs.get(d)
            if gi is None:
                reduced_of[d] = nred
                nred += 1
            else:
                if group_red[gi] < 0:
                    group_red[gi] = nred
                    nred += 1
                reduced_of[d] = group_red[gi]
        self.n_reduced = nred
        self.reduced_of = reduced_of
        rows = np.nonzero(reduced_of >= 0)[0]
        self.restriction = sp.coo_matrix(
            (np.ones(len(rows)), (rows, reduced_of[rows])),
            shape=(n_full, nred)).tocsr()
        self.lift = np.zeros(n_full)
        for d, v in pinned.items():
            self.lift[d] = v

    def reduce_vector(self, b):
        return self.restriction.T @ b

    def expand(self, x_red):
        return self.restriction @ x_red + self.lift


def identity_constraints(n):
    return FieldConstraints(n)


@dataclass
class BlockConstraints:
    """Constraints of the (u, q, p) fields plus composed restrictions."""

    u: FieldConstraints
    q: FieldConstraints
    p: FieldConstraints

    def __post_init__(self):
        self._composed_cache = {}

    def composed(self, names):
        key = tuple(names)
        if key not in self._composed_cache:
            fields = [getattr(self, n) for n in names]
            R = sp.block_diag([f.restriction for f in fields], format="csr")
            lift = np.concatenate([f.lift for f in fields])
            self._composed_cache[key] = (R, lift)
        return self._composed_cache[key]

    def reduce_system(self, matrix, rhs, names):
        R, lift = self.composed(names)
        b = rhs if not np.any(lift != 0.0) else rhs - matrix @ lift
        return (R.T @ matrix @ R).tocsr(), R.T @ b

    def expand(self, x_red, names):
        R, lift = self.composed(names)
        return R @ x_red + lift

    def split(self, x_full, sizes):
        out = []
        off = 0
        for s in sizes:
            out.append(x_full[off:off + s])
            off += s
        return out


def _side_vertices(mesh, side):
    verts = set()
    for e, tag in mesh.boundary_tags.items():
        if tag is side:
            verts.update(int(v) for v in mesh.edges[e])
    return sorted(verts)


def build_constraints(problem: ProblemDefinition, mesh: Mesh,
                      dofmap_u: DofMap, dofmap_q: DofMap,
                      dofmap_p: DofMap) -> BlockConstraints:
    """Translate the problem's boundary conditions into DOF constraints."""
    normal_comp = {Side.LEFT: 0, Side.RIGHT: 0, Side.BOTTOM: 1, Side.TOP: 1}
    pinned_u = {}
    ties = []

    def pin(dof, value):
        if dof in pinned_u and pinned_u[dof] != value:
            raise ConstraintConflictError(
                f"displacement DOF {dof} pinned to both {pinned_u[dof]} and {value}")
        pinned_u[dof] = value

    for side, bc in problem.u_bc.items():
        verts = _side_vertices(mesh, side)
        if bc.kind == "fixed":
            vx, vy = bc.value
            for v in verts:
                pin(2 * v, float(vx))
                pin(2 * v + 1, float(vy))
        elif bc.kind == "normal_zero":
            c = normal_comp[side]
            for v in verts:
                pin(2 * v + c, 0.0)
        elif bc.kind == "tied_normal":
            c = normal_comp[side]
            ties.append([2 * v + c for v in verts])
        elif bc.kind == "free":
            pass
        else:
            raise ValueError(f"unknown displacement BC kind {bc.kind!r}")

    pinned_q = {}
    for side, bc in problem.q_bc.items():
        if bc.kind == "noflow":
            for e, tag in mesh.boundary_tags.items():
                if tag is side:
                    pinned_q[e] = float(bc.value)
        elif bc.kind == "pressure":
            pass  # natural in the mixed form, handled by the load assembly
        else:
            raise ValueError(f"unknown flux BC kind {bc.kind!r}")

    return BlockConstraints(
        u=FieldConstraints(dofmap_u.n_dofs, pinned_u, ties),
        q=FieldConstraints(dofmap_q.n_dofs, pinned_q),
        p=identity_constraints(dofmap_p.n_dofs))


class BiotOperators:
    """All constant operators of one discretized problem, plus caches.

    The six bilinear-form blocks are assembled once; the L-scheme system
    matrices derived from them (mechanics block, 2x2 flow block, 3x3
    monolithic block) are cached per stabilization/step-size key since they
    stay constant over non-linear iterations and time steps.
    """

    def __init__(self, mesh: Mesh, mat: MaterialModel,
                 problem: ProblemDefinition):
        self.mesh = mesh
        self.mat = mat
        self.problem = problem
        self.dofmap_u = DofMap(mesh, SpaceKind.P1_VECTOR)
        self.dofmap_q = DofMap(mesh, SpaceKind.RT0)
        self.dofmap_p = DofMap(mesh, SpaceKind.P0)
        self.a_e, self.d_div, self.b_up = assemble_mechanics(
            mesh, mat, self.dofmap_u, self.dofmap_p)
        self.m_q, self.b_qp, self.m_p = assemble_flow(
            mesh, mat, self.dofmap_q, self.dofmap_p)
        self.constraints = build_constraints(
            problem, mesh, self.dofmap_u, self.dofmap_q, self.dofmap_p)
        # net orientation sign per edge: +-1 on boundary edges, 0 inside
        sign_sum = np.zeros(mesh.n_edges, dtype=np.int64)
        np.add.at(sign_sum, mesh.cell_edge_ids.ravel(),
                  mesh.cell_edge_signs.ravel())
        self.boundary_edge_sign = sign_sum
        self.matrix_cache = {}
        self.lu_cache = {}
        # inner linear-solver selection and per-solve reports (see linalg)
        self.solver = None
        self.solver_log = []

    @property
    def sizes(self):
        return (self.dofmap_u.n_dofs, self.dofmap_q.n_dofs, self.dofmap_p.n_dofs)

    # -- exact non-linear and coupling functionals ------------------------

    def div_u_cells(self, u_coeffs):
        """Cellwise divergence of a displacement coefficient vector."""
        return (self.b_up.T @ u_coeffs) / self.mesh.areas

    def divu_dual(self, u_coeffs):
        """<div u, w> against all P0 tests."""
        return self.b_up.T @ u_coeffs

    def bp_dual(self, p_cells):
        """<b(p), w> against all P0 tests (exact, p is cellwise constant)."""
        return self.mesh.areas * np.asarray(self.mat.b_law(p_cells), dtype=float)

    def hu_dual(self, u_coeffs):
        """<h(div u), div z> against all displacement tests (exact)."""
        return self.b_up @ np.asarray(self.mat.h_law(self.div_u_cells(u_coeffs)),
                                      dtype=float)

    # -- scheme system matrices (reduced, cached) --------------------------

    def _reduced(self, key, full, names):
        if key not in self.matrix_cache:
            R, lift = self.constraints.composed(names)
            shift = R.T @ (full @ lift) if np.any(lift != 0.0) \
                else np.zeros(R.shape[1])
            self.matrix_cache[key] = ReducedSystem(
                (R.T @ full @ R).tocsr(), shift, tuple(names))
        return self.matrix_cache[key]

    def mech_system(self, L2):
        key = ("mech", float(L2))
        if key not in self.matrix_cache:
            return self._reduced(key, (self.a_e + L2 * self.d_div).tocsr(), ("u",))
        return self.matrix_cache[key]

    def flow_system(self, L1, tau):
        key = ("flow", float(L1), float(tau))
        if key not in self.matrix_cache:
            full = sp.bmat([[self.m_q, -self.b_qp.T],
                            [tau * self.b_qp, L1 * self.m_p]], format="csr")
            return self._reduced(key, full, ("q", "p"))
        return self.matrix_cache[key]

    def flow_schur_system(self, L1, tau):
        """Flux system with the pressure eliminated through the diagonal mass."""
        key = ("flow_schur", float(L1), float(tau))
        if key not in self.matrix_cache:
            mp_inv = sp.diags(1.0 / self.mesh.areas)
            full = (self.m_q
                    + (tau / L1) * (self.b_qp.T @ mp_inv @ self.b_qp)).tocsr()
            return self._reduced(key, full, ("q",))
        return self.matrix_cache[key]

    def monolithic_system(self, L1, L2, tau):
        key = ("mono", float(L1), float(L2), float(tau))
        if key not in self.matrix_cache:
            alpha = self.mat.alpha
            full = sp.bmat(
                [[self.a_e + L2 * self.d_div, None, -alpha * self.b_up],
                 [None, self.m_q, -self.b_qp.T],
                 [alpha * self.b_up.T, tau * self.b_qp, L1 * self.m_p]],
                format="csr")
            return self._reduced(key, full, ("u", "q", "p"))
        return self.matrix_cache[key]


def build_operators(mesh: Mesh, mat: MaterialModel,
                    problem: ProblemDefinition) -> BiotOperators:
    return BiotOperators(mesh, mat, problem)


def assemble_loads(problem: ProblemDefinition, ops: BiotOperators, t):
    """Load vectors at time t: body force, gravity/boundary-pressure, source.

    The body force and the fluid source use a degree-4 rule (exact for the
    polynomial manufactured data); plate loads of tied sides enter as a
    uniform traction on the side, and non-homogeneous boundary pressures of
    the mixed form enter the Darcy right-hand side.
    """
    mesh = ops.mesh
    rule = quadrature(4)
    corners = mesh.vertices[mesh.cells]
    pts = np.einsum("qv,fvd->fqd", rule.points, corners)
    x, y = pts[:, :, 0], pts[:, :, 1]

    fvals = np.asarray(problem.body_force(x, y, t), dtype=float)
    f_vec = np.zeros(ops.dofmap_u.n_dofs)
    if np.any(fvals != 0.0):
        floc = np.einsum("q,fqc,qv->fvc", rule.weights, fvals, rule.points)
        floc = floc.reshape(mesh.n_cells, 6) * mesh.areas[:, None]
        np.add.at(f_vec, ops.dofmap_u.cell_to_dofs.ravel(), floc.ravel())

    normal_comp = {Side.LEFT: 0, Side.RIGHT: 0, Side.BOTTOM: 1, Side.TOP: 1}
    for side, bc in problem.u_bc.items():
        if bc.kind != "tied_normal" or not bc.value:
            continue
        edges = [e for e, tag in mesh.boundary_tags.items() if tag is side]
        length = float(sum(mesh.edge_lengths[e] for e in edges))
        traction = float(bc.value) / length
        c = normal_comp[side]
        for e in edges:
            half = 0.5 * mesh.edge_lengths[e] * traction
            for v in mesh.edges[e]:
                f_vec[2 * int(v) + c] += half

    g_vec = np.zeros(ops.dofmap_q.n_dofs)
    gvec = np.asarray(ops.mat.gravity, dtype=float)
    if ops.mat.rho_f != 0.0 and np.any(gvec != 0.0):
        rule2 = quadrature(2)
        vals = _rt0_values_at(mesh, rule2)
        gloc = ops.mat.rho_f * np.einsum("q,fqid,d->fi", rule2.weights, vals, gvec)
        gloc *= mesh.areas[:, None]
        np.add.at(g_vec, ops.dofmap_q.cell_to_dofs.ravel(), gloc.ravel())
    for side, bc in problem.q_bc.items():
        if bc.kind == "pressure" and bc.value != 0.0:
            for e, tag in mesh.boundary_tags.items():
                if tag is side:
                    sign = ops.boundary_edge_sign[e]
                    g_vec[e] -= bc.value * sign * mesh.edge_lengths[e]

    svals = np.asarray(problem.source(x, y, t), dtype=float)
    if np.any(svals != 0.0):
        s_vec = mesh.areas * np.einsum("q,fq->f", rule.weights, svals)
    else:
        s_vec = np.zeros(ops.dofmap_p.n_dofs)
    return f_vec, g_vec, s_vec


def assemble_nonlinear_rhs(state, mat: MaterialModel, ops: BiotOperators):
    """Exact dual vectors of the non-linear terms at a given state.

    Returns (<b(p), w> entries, <h(div u), div z> entries); both are
    assembled exactly from the cellwise-constant pressure and dilatation.
    """
    return ops.bp_dual(state.p.coeffs), ops.hu_dual(state.u.coeffs)


def apply_essential_bc(matrix, rhs, constraints: BlockConstraints, names):
    """Symmetrically reduce a block system by the essential constraints.

    Returns (reduced matrix, reduced rhs, expand) where expand maps a
    reduced solution back to the full DOF vector including lifted values.
    """
    red_mat, red_rhs = constraints.reduce_system(matrix, rhs, names)
    return red_mat, red_rhs, lambda x: constraints.expand(x, names)


def check_symmetric(matrix, tol=1e-12):
    """Validate a symmetry claim: max |A - A^T| entry below tol * max |A|."""
    diff = abs(matrix - matrix.T)
    dmax = diff.max() if diff.nnz else 0.0
    scale = abs(matrix).max() or 1.0
    return bool(dmax <= tol * scale)


def dump_operator(matrix, path):
    """Write a sparse operator as `row col value` lines (coordinate text)."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")
