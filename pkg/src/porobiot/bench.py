"""Benchmark runners: error norms, tuning sweeps, sensitivity grids,
contraction verification and the consolidation time series.

All outputs are plain CSV with deterministic float formatting so repeated
runs are byte-identical.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assembly import build_operators
from .fem import quadrature, _rt0_values_at
from .mesh import generate_rect_mesh
from .physics import (MandelConfig, mandel_material, mandel_problem,
                      manufactured_material, manufactured_problem)
from .schemes import (BiotState, DivergenceError, SchemeConfig,
                      build_initial_state, iterate_to_convergence,
                      suggested_tuning, time_march)


def _fmt(x):
    return f"{x:.17g}"


def worker_count(default=1):
    """Worker cap from POROBIOT_THREADS (defaults to serial)."""
    raw = os.environ.get("POROBIOT_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default


# ---------------------------------------------------------------------------
# error norms and convergence orders
# ---------------------------------------------------------------------------

def error_norms(state: BiotState, exact, t=None):
    """L2 errors of (p, u, div u, q) against an analytic triple.

    Integrated cellwise with a degree-4 rule; the numeric fields are
    evaluated from their coefficient vectors (P0 constant, P1 affine, RT0
    linear).
    """
    t = state.time if t is None else t
    mesh = state.p.mesh
    rule = quadrature(4)
    corners = mesh.vertices[mesh.cells]
    pts = np.einsum("qv,fvd->fqd", rule.points, corners)
    x, y = pts[:, :, 0], pts[:, :, 1]
    w, areas = rule.weights, mesh.areas

    def cell_sq(diff_sq):
        return float(np.einsum("q,fq->", w, diff_sq * areas[:, None]))

    p_num = state.p.coeffs[:, None]
    err_p2 = cell_sq((p_num - exact.p(x, y, t)) ** 2)

    local_u = state.u.coeffs[state.u.dofmap.cell_to_dofs].reshape(-1, 3, 2)
    u_num = np.einsum("qv,fvc->fqc", rule.points, local_u)
    err_u2 = cell_sq(((u_num - exact.u(x, y, t)) ** 2).sum(axis=-1))

    divu_num = np.einsum("fvc,fvc->f", local_u, mesh.grads)
    err_divu2 = cell_sq((divu_num[:, None] - exact.div_u(x, y, t)) ** 2)

    vals = _rt0_values_at(mesh, rule)
    local_q = state.q.coeffs[state.q.dofmap.cell_to_dofs]
    q_num = np.einsum("fi,fqic->fqc", local_q, vals)
    err_q2 = cell_sq(((q_num - exact.q(x, y, t)) ** 2).sum(axis=-1))

    return {"p": np.sqrt(err_p2), "u": np.sqrt(err_u2),
            "div_u": np.sqrt(err_divu2), "q": np.sqrt(err_q2)}


@dataclass
class ErrorRow:
    h: float
    tau: float
    err_p: float
    err_u: float
    err_divu: float
    err_q: float
    order_p: float = float("nan")
    order_u: float = float("nan")


def estimate_orders(rows):
    """Fill the observed orders between consecutive refinements in place."""
    for prev, cur in zip(rows, rows[1:]):
        ratio = np.log(prev.h / cur.h)
        if ratio > 0:
            if prev.err_p > 0 and cur.err_p > 0:
                cur.order_p = float(np.log(prev.err_p / cur.err_p) / ratio)
            if prev.err_u > 0 and cur.err_u > 0:
                cur.order_u = float(np.log(prev.err_u / cur.err_u) / ratio)
    return rows


def manufactured_convergence(case_id, scheme_kind, L1, L2, levels=3,
                             nx0=8, tau0=0.25, tau_proportional=True,
                             tol=1e-8, max_iter=500, final_time=1.0,
                             permeability=1.0, alpha=1.0, solver=None,
                             solver_rows=None):
    """March the verification problem over a refinement ladder.

    Returns ErrorRows at the final time with observed orders; the time step
    halves with the mesh by default (the linear exact solution makes the
    implicit stepping exact in time, so the orders isolate space).
    """
    rows = []
    for lev in range(levels):
        nx = nx0 * (2 ** lev)
        tau = tau0 * (0.5 ** lev) if tau_proportional else tau0
        n_steps = int(round(final_time / tau))
        mat = manufactured_material(case_id, permeability=permeability,
                                    alpha=alpha)
        prob = manufactured_problem(mat, final_time=final_time)
        mesh = generate_rect_mesh((0, 0), (1, 1), nx, nx)
        cfg = SchemeConfig(scheme_kind, L1=L1, L2=L2, tol=tol,
                           max_iter=max_iter)
        ops = build_operators(mesh, mat, prob)
        ops.solver = solver
        results = time_march(prob, mesh, mat, cfg, tau, n_steps, ops=ops)
        if solver_rows is not None:
            solver_rows.extend(ops.solver_log)
        errs = error_norms(results[-1][0], prob.exact)
        rows.append(ErrorRow(mesh.h, tau, errs["p"], errs["u"],
                             errs["div_u"], errs["q"]))
    return estimate_orders(rows)


def write_errors_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("h,tau,err_p,err_u,err_divu,err_q,order_p,order_u\n")
        for r in rows:
            op = _fmt(r.order_p) if np.isfinite(r.order_p) else ""
            ou = _fmt(r.order_u) if np.isfinite(r.order_u) else ""
            fh.write(f"{_fmt(r.h)},{_fmt(r.tau)},{_fmt(r.err_p)},{_fmt(r.err_u)},"
                     f"{_fmt(r.err_divu)},{_fmt(r.err_q)},{op},{ou}\n")


# ---------------------------------------------------------------------------
# single-step runs, sweeps and sensitivity grids
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    iterations: int
    status: str   # converged | maxiter | diverged


def _single_step(case_id, scheme_kind, L1, L2, nx=16, tau=0.25, tol=1e-8,
                 max_iter=200, permeability=1.0, alpha=1.0, ops_cache=None):
    """One representative (first) time step of the verification problem."""
    if ops_cache is None:
        mat = manufactured_material(case_id, permeability=permeability,
                                    alpha=alpha)
        prob = manufactured_problem(mat)
        mesh = generate_rect_mesh((0, 0), (1, 1), nx, nx)
        ops = build_operators(mesh, mat, prob)
        prev = build_initial_state(prob, ops)
    else:
        mat, prob, ops, prev = ops_cache
    cfg = SchemeConfig(scheme_kind, L1=L1, L2=L2, tol=tol, max_iter=max_iter)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, trace = iterate_to_convergence(prev, cfg, ops, mat, prob, tau)
    except DivergenceError:
        return RunResult(max_iter, "diverged")
    return RunResult(trace.iterations,
                     "converged" if trace.converged else "maxiter")


def _sweep_cell(args):
    case_id, scheme_kind, L1, L2, nx, tau, tol, max_iter = args
    r = _single_step(case_id, scheme_kind, L1, L2, nx=nx, tau=tau, tol=tol,
                     max_iter=max_iter)
    return r.iterations, r.status


@dataclass
class SweepGrid:
    L1_values: np.ndarray
    L2_values: np.ndarray
    iterations: np.ndarray     # (len(L1), len(L2)) int
    status: list               # nested list of status strings

    def argmin(self):
        """(L1, L2) of the fastest converged cell."""
        it = self.iterations.astype(float)
        for i in range(it.shape[0]):
            for j in range(it.shape[1]):
                if self.status[i][j] != "converged":
                    it[i, j] = np.inf
        if not np.isfinite(it).any():
            raise RuntimeError("no cell of the sweep converged")
        i, j = np.unravel_index(np.argmin(it), it.shape)
        return float(self.L1_values[i]), float(self.L2_values[j])


def sweep_L(case_id, scheme_kind, L1_values, L2_values, nx=16, tau=0.25,
            tol=1e-8, max_iter=200, n_workers=None):
    """Iteration counts of one time step over an (L1, L2) grid.

    Failures (cap or divergence) are recorded as markers and the sweep
    continues.  Cells are independent; POROBIOT_THREADS or n_workers > 1
    runs them in a process pool.
    """
    L1_values = np.asarray(list(L1_values), dtype=float)
    L2_values = np.asarray(list(L2_values), dtype=float)
    if L1_values.size == 0 or L2_values.size == 0:
        raise ValueError("parameter grids must be non-empty")
    n_workers = worker_count() if n_workers is None else max(1, n_workers)
    iters = np.zeros((len(L1_values), len(L2_values)), dtype=int)
    status = [[""] * len(L2_values) for _ in L1_values]

    cells = [(i, j) for i in range(len(L1_values)) for j in range(len(L2_values))]
    if n_workers > 1:
        args = [(case_id, scheme_kind, L1_values[i], L2_values[j], nx, tau,
                 tol, max_iter) for i, j in cells]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for (i, j), (it, st) in zip(cells, pool.map(_sweep_cell, args)):
                iters[i, j] = it
                status[i][j] = st
    else:
        mat = manufactured_material(case_id)
        prob = manufactured_problem(mat)
        mesh = generate_rect_mesh((0, 0), (1, 1), nx, nx)
        ops = build_operators(mesh, mat, prob)
        prev = build_initial_state(prob, ops)
        cache = (mat, prob, ops, prev)
        for i, j in cells:
            r = _single_step(case_id, scheme_kind, L1_values[i], L2_values[j],
                             nx=nx, tau=tau, tol=tol, max_iter=max_iter,
                             ops_cache=cache)
            iters[i, j] = r.iterations
            status[i][j] = r.status
            # matrices depend on (L1, L2): drop them to bound memory
            ops.matrix_cache.clear()
            ops.lu_cache.clear()
    return SweepGrid(L1_values, L2_values, iters, status)


def write_sweep_csv(grid: SweepGrid, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("L1,L2,iters,status\n")
        for i, l1 in enumerate(grid.L1_values):
            for j, l2 in enumerate(grid.L2_values):
                fh.write(f"{_fmt(l1)},{_fmt(l2)},{grid.iterations[i, j]},"
                         f"{grid.status[i][j]}\n")


def sensitivity_grid(case_id, scheme_kind, axis, values, L1, L2, nx=16,
                     tau=0.25, tol=1e-8, max_iter=500):
    """Iteration counts of one time step along one parameter axis.

    axis is one of 'h' (values are mesh sizes of the unit square), 'tau',
    'K' or 'alpha'; the manufactured data are rebuilt per value so the
    problem stays consistent.
    """
    if axis not in ("h", "tau", "K", "alpha"):
        raise ValueError(f"unknown sensitivity axis {axis!r}")
    rows = []
    for v in values:
        kw = dict(nx=nx, tau=tau, permeability=1.0, alpha=1.0)
        if axis == "h":
            kw["nx"] = int(round(1.0 / float(v)))
        elif axis == "tau":
            kw["tau"] = float(v)
        elif axis == "K":
            kw["permeability"] = float(v)
        else:
            kw["alpha"] = float(v)
        r = _single_step(case_id, scheme_kind, L1, L2, tol=tol,
                         max_iter=max_iter, **kw)
        rows.append((axis, float(v), r.iterations, r.status))
    return rows


def write_sensitivity_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("axis,value,iters,status\n")
        for axis, value, iters, status in rows:
            fh.write(f"{axis},{_fmt(value)},{iters},{status}\n")


# ---------------------------------------------------------------------------
# contraction-inequality verification
# ---------------------------------------------------------------------------

@dataclass
class ContractionReport:
    kind: str
    values: np.ndarray
    floor: float
    monotone: bool
    strictly_decreasing: bool


def _div_norm_sq(ops, u_coeffs):
    s = ops.div_u_cells(u_coeffs)
    return float(np.sum(ops.mesh.areas * s * s))


def _p_norm_sq(ops, p_coeffs):
    return float(np.sum(ops.mesh.areas * p_coeffs * p_coeffs))


def verify_contraction(archive, reference: BiotState, mat, cfg: SchemeConfig,
                       ops, rel_slack=1e-9):
    """Weighted error functionals along an archived iterate sequence.

    For the splitting scheme the errors are taken against the converged
    reference and weighted by (L1 - b_m, L2 - h_m); for the monolithic
    scheme consecutive-iterate differences are weighted by (L1, L2 - h_m).
    Monotone decrease is asserted above a floor of (L1 + L2) (10 tol)^2.
    """
    L1, L2 = cfg.L1, cfg.L2
    if cfg.kind == "splitting":
        wp, wd = L1 - mat.b_m, L2 - mat.h_m
        seq = [(st.p.coeffs - reference.p.coeffs,
                st.u.coeffs - reference.u.coeffs) for st in archive]
    else:
        wp, wd = L1, L2 - mat.h_m
        seq = [(b.p.coeffs - a.p.coeffs, b.u.coeffs - a.u.coeffs)
               for a, b in zip(archive, archive[1:])]
    values = np.array([wp * _p_norm_sq(ops, ep) + wd * _div_norm_sq(ops, eu)
                       for ep, eu in seq])
    floor = (L1 + L2) * (10.0 * cfg.tol) ** 2
    monotone = True
    strict = True
    for a, b in zip(values, values[1:]):
        if a <= floor and b <= floor:
            continue
        if b > a * (1.0 + rel_slack):
            monotone = False
            strict = False
            break
        if b >= a:
            strict = False
    return ContractionReport(cfg.kind, values, floor, monotone, strict)


def write_contraction_csv(report: ContractionReport, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iter,functional\n")
        for i, v in enumerate(report.values):
            fh.write(f"{i},{_fmt(v)}\n")


# ---------------------------------------------------------------------------
# consolidation benchmark time series
# ---------------------------------------------------------------------------

@dataclass
class MandelSeries:
    times: np.ndarray
    p_probe: np.ndarray
    uy_top: np.ndarray
    probe: tuple
    initial_pressure: float

    @property
    def peak(self):
        return float(self.p_probe.max())

    @property
    def peak_time(self):
        return float(self.times[int(np.argmax(self.p_probe))])

    @property
    def final(self):
        return float(self.p_probe[-1])


def mandel_report(initial: BiotState, results, mesh, probe=None,
                  initial_pressure=float("nan")):
    """Probe-pressure and plate-displacement series over a consolidation run.

    `results` is the time_march output; the default probe sits at
    (a/4, b/2).  The top displacement is read from any tied top vertex.
    """
    if probe is None:
        (x0, y0), (ex, ey) = ((mesh.vertices[:, 0].min(), mesh.vertices[:, 1].min()),
                              (np.ptp(mesh.vertices[:, 0]), np.ptp(mesh.vertices[:, 1])))
        probe = (x0 + ex / 4.0, y0 + ey / 2.0)
    cell = mesh.locate_cell(probe)
    y_top = mesh.vertices[:, 1].max()
    top_vertex = int(np.nonzero(np.abs(mesh.vertices[:, 1] - y_top) < 1e-12)[0][0])
    states = [initial] + [st for st, _ in results]
    times = np.array([st.time for st in states])
    p_probe = np.array([st.p.coeffs[cell] for st in states])
    uy_top = np.array([st.u.coeffs[2 * top_vertex + 1] for st in states])
    return MandelSeries(times, p_probe, uy_top, tuple(probe), initial_pressure)


def write_mandel_csv(series: MandelSeries, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,p_probe,uy_top\n")
        for t, p, uy in zip(series.times, series.p_probe, series.uy_top):
            fh.write(f"{_fmt(t)},{_fmt(p)},{_fmt(uy)}\n")


def run_mandel(case_id="linear", cfg: MandelConfig = None, scheme_kind="monolithic",
               L1=None, L2=None, dt=1.0, n_steps=500, nx=40, ny=40,
               probe=None, tol=1e-8, max_iter=500, permeability=None,
               viscosity=None, solver=None, solver_rows=None):
    """Convenience driver: construct, march and report the slab benchmark.

    Stabilization defaults to the estimated law constants; for the linear
    law the monolithic scheme then runs the exact preset L1 = 1/M,
    L2 = lambda (two iterations per step) and the splitting scheme the
    undrained preset L2 = lambda + M alpha^2.
    """
    cfg = cfg or MandelConfig()
    mat_kw = {}
    if permeability is not None:
        mat_kw["permeability"] = permeability
    if viscosity is not None:
        mat_kw["viscosity"] = viscosity
    mat = mandel_material(case_id, cfg, **mat_kw)
    prob = mandel_problem(mat, cfg, final_time=dt * n_steps)
    mesh = generate_rect_mesh((0, 0), (cfg.a, cfg.b), nx, ny)
    if L1 is None or L2 is None:
        s1, s2 = suggested_tuning(mat, scheme_kind)
        L1 = s1 if L1 is None else L1
        L2 = s2 if L2 is None else L2
    scheme = SchemeConfig(scheme_kind, L1=L1, L2=L2, tol=tol, max_iter=max_iter)
    ops = build_operators(mesh, mat, prob)
    ops.solver = solver
    initial = build_initial_state(prob, ops)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = time_march(prob, mesh, mat, scheme, dt, n_steps, ops=ops,
                             initial=initial)
    if solver_rows is not None:
        solver_rows.extend(ops.solver_log)
    series = mandel_report(initial, results, mesh, probe=probe,
                           initial_pressure=cfg.initial_pressure)
    return series, results, (mat, prob, mesh, ops, scheme)
