"""The two non-linear iterations per implicit time step, and time marching.

Both schemes replace the non-linear storage and volumetric-stress terms by
constant-slope updates with tuning parameters L1 and L2:

* splitting: solve the 2x2 flow block (Darcy row plus L1-stabilized mass
  row) for the new flux and pressure, then the L2-stabilized mechanics
  block driven by that pressure;
* monolithic: one solve of the 3x3 block system in (u, q, p) with the same
  stabilized rows.

All system matrices are constant across iterations and time steps, so
their factorizations are built once and reused.  Iterations start from the
previous time-step solution and stop when the summed L2 norms of the field
increments drop below the tolerance.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .assembly import BiotOperators, assemble_loads, build_operators
from .fem import FeFunction, interpolate, l2_norm
from .linalg import CachedLU
from .mesh import Mesh
from .physics import MaterialModel, ProblemDefinition, check_admissible


class DivergenceError(RuntimeError):
    """The combined increment blew past the divergence safeguard."""


SCHEME_KINDS = ("splitting", "monolithic")


@dataclass
class SchemeConfig:
    """Scheme kind, stabilization parameters and stopping controls."""

    kind: str
    L1: float
    L2: float
    tol: float = 1e-8
    max_iter: int = 500
    divergence_factor: float = 1e6
    schur_flow: bool = False

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"scheme kind must be one of {SCHEME_KINDS}")
        if self.L1 < 0 or self.L2 < 0:
            raise ValueError("stabilization parameters must be non-negative")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.schur_flow and self.L1 == 0:
            raise ValueError("pressure elimination needs L1 > 0")

    def splitting_safe(self, mat: MaterialModel) -> bool:
        """L1 >= L_b and L2 >= L_h + alpha^2 / b_m (with the estimated constants)."""
        if not np.isfinite(mat.L_b) or self.L1 < mat.L_b:
            return False
        if mat.alpha == 0.0:
            return self.L2 >= mat.L_h
        if mat.b_m <= 0.0:
            return False
        return self.L2 >= mat.L_h + mat.alpha ** 2 / mat.b_m

    def monolithic_safe(self, mat: MaterialModel) -> bool:
        """L1 >= L_b / 2 and L2 >= L_h (with the estimated constants)."""
        return (np.isfinite(mat.L_b) and self.L1 >= mat.L_b / 2.0
                and np.isfinite(mat.L_h) and self.L2 >= mat.L_h)

    def theorem_safe(self, mat: MaterialModel) -> bool:
        if self.kind == "splitting":
            return self.splitting_safe(mat)
        return self.monolithic_safe(mat)


def suggested_tuning(mat: MaterialModel, kind, l2_cap_factor=50.0):
    """Default (L1, L2) from the estimated law constants.

    L1 = L_b for both schemes (at or above both convergence conditions).
    The splitting L2 adds the alpha^2 / b_m coupling margin when that is
    finite and not absurdly larger than L_h (a degenerate monotonicity
    floor would stall the mechanics update); otherwise, and for the
    monolithic scheme, L2 = L_h.  For linear laws this reproduces the
    undrained-split preset (1/M, lambda + M alpha^2) and the exact
    monolithic preset (1/M, lambda).
    """
    if kind not in SCHEME_KINDS:
        raise ValueError(f"scheme kind must be one of {SCHEME_KINDS}")
    if not np.isfinite(mat.L_b) or not np.isfinite(mat.L_h):
        raise ValueError("law constants are not finite; certify a range first")
    L1 = mat.L_b
    L2 = mat.L_h
    if kind == "splitting" and mat.alpha > 0 and mat.b_m > 0:
        candidate = mat.L_h + mat.alpha ** 2 / mat.b_m
        if candidate <= l2_cap_factor * max(1.0, mat.L_h):
            L2 = candidate
    return L1, L2


@dataclass
class BiotState:
    """The discrete triple (u, q, p) at one time level."""

    u: FeFunction
    q: FeFunction
    p: FeFunction
    time: float

    def copy(self):
        return BiotState(self.u.copy(), self.q.copy(), self.p.copy(), self.time)


@dataclass
class IterationTrace:
    """Per-iteration increment norms, rates and run bookkeeping."""

    dp: list = dc_field(default_factory=list)
    dq: list = dc_field(default_factory=list)
    du: list = dc_field(default_factory=list)
    totals: list = dc_field(default_factory=list)
    rates: list = dc_field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    n_linear_solves: int = 0
    seconds: float = 0.0

    def record(self, dp, dq, du):
        total = dp + dq + du
        rate = total / self.totals[-1] if self.totals and self.totals[-1] > 0 \
            else float("nan")
        self.dp.append(dp)
        self.dq.append(dq)
        self.du.append(du)
        self.totals.append(total)
        self.rates.append(rate)
        self.iterations += 1


@dataclass
class StepContext:
    """Loads and previous-state terms that are constant over one time step."""

    t_new: float
    tau: float
    f_vec: np.ndarray
    g_vec: np.ndarray
    s_vec: np.ndarray
    mass_const: np.ndarray   # tau <S_f, w> + <b(p_prev), w> + alpha <div u_prev, w>

    @classmethod
    def build(cls, ops: BiotOperators, problem, prev: BiotState, tau):
        t_new = prev.time + tau
        f_vec, g_vec, s_vec = assemble_loads(problem, ops, t_new)
        mass_const = (tau * s_vec + ops.bp_dual(prev.p.coeffs)
                      + ops.mat.alpha * ops.divu_dual(prev.u.coeffs))
        return cls(t_new, tau, f_vec, g_vec, s_vec, mass_const)


def _solve(ops, key, system, rhs_full, trace=None):
    R, lift = ops.constraints.composed(system.names)
    rhs_red = R.T @ rhs_full - system.rhs_shift
    opts = ops.solver
    if opts is not None and opts.method == "gmres" and key[0] == "mono":
        x_red = _gmres_solve(ops, key, system, rhs_red, opts)
    else:
        lu = ops.lu_cache.get(key)
        if lu is None:
            lu = CachedLU(system.matrix)
            ops.lu_cache[key] = lu
        x_red = lu.solve(rhs_red)
    if trace is not None:
        trace.n_linear_solves += 1
    return R @ x_red + lift


def _gmres_solve(ops, key, system, rhs_red, opts):
    from .linalg import (BlockSystem, LinearSolveError, gmres,
                         fixed_stress_preconditioner)
    _, L1, L2, tau = key
    pk = ("fs_prec", L1, L2, tau)
    prec = ops.lu_cache.get(pk)
    if prec is None:
        cfg = SchemeConfig("monolithic", L1=L1, L2=L2)
        prec = fixed_stress_preconditioner(ops, cfg, ops.mat, tau)
        ops.lu_cache[pk] = prec
    x_red, report = gmres(BlockSystem(system.matrix, rhs_red),
                          preconditioner=prec.as_linear_operator(),
                          restart=opts.restart, rtol=opts.rtol,
                          maxiter=opts.maxiter)
    ops.solver_log.append((f"mono/L1={L1:g}/L2={L2:g}", report))
    if not report.converged:
        raise LinearSolveError(
            f"preconditioned GMRES stopped at {report.status} with relative "
            f"residual {report.relres:.2e}")
    return x_red


def _mass_rhs(ops, cfg, cur, ctx):
    """L1-stabilized part of the mass-row right-hand side (common to both schemes)."""
    return (ctx.mass_const - ops.bp_dual(cur.p.coeffs)
            + cfg.L1 * (ops.m_p @ cur.p.coeffs))


def splitting_iteration(prev: BiotState, cur: BiotState, cfg: SchemeConfig,
                        ops: BiotOperators, mat: MaterialModel,
                        problem: ProblemDefinition, tau,
                        ctx: StepContext = None,
                        trace: IterationTrace = None) -> BiotState:
    """One sweep of the fixed-stress-type splitting: flow solve, then mechanics."""
    ctx = ctx or StepContext.build(ops, problem, prev, tau)
    nq = ops.dofmap_q.n_dofs
    # the displacement coupling is explicit in the split flow step
    rhs_p = _mass_rhs(ops, cfg, cur, ctx) \
        - mat.alpha * ops.divu_dual(cur.u.coeffs)

    if cfg.schur_flow:
        mp_inv = 1.0 / ops.mesh.areas
        rhs_q = ctx.g_vec + (1.0 / cfg.L1) * (ops.b_qp.T @ (mp_inv * rhs_p))
        q_new = _solve(ops, ("flow_schur", cfg.L1, tau),
                       ops.flow_schur_system(cfg.L1, tau), rhs_q, trace)
        p_new = mp_inv * (rhs_p - tau * (ops.b_qp @ q_new)) / cfg.L1
    else:
        x = _solve(ops, ("flow", cfg.L1, tau), ops.flow_system(cfg.L1, tau),
                   np.concatenate([ctx.g_vec, rhs_p]), trace)
        q_new, p_new = x[:nq], x[nq:]

    rhs_u = (ctx.f_vec + mat.alpha * (ops.b_up @ p_new)
             + cfg.L2 * (ops.d_div @ cur.u.coeffs) - ops.hu_dual(cur.u.coeffs))
    u_new = _solve(ops, ("mech", cfg.L2), ops.mech_system(cfg.L2), rhs_u, trace)

    return BiotState(FeFunction(ops.dofmap_u, u_new),
                     FeFunction(ops.dofmap_q, q_new),
                     FeFunction(ops.dofmap_p, p_new), ctx.t_new)


def monolithic_iteration(prev: BiotState, cur: BiotState, cfg: SchemeConfig,
                         ops: BiotOperators, mat: MaterialModel,
                         problem: ProblemDefinition, tau,
                         ctx: StepContext = None,
                         trace: IterationTrace = None) -> BiotState:
    """One solve of the 3x3 block system in (u, q, p)."""
    ctx = ctx or StepContext.build(ops, problem, prev, tau)
    nu, nq = ops.dofmap_u.n_dofs, ops.dofmap_q.n_dofs
    rhs_u = (ctx.f_vec + cfg.L2 * (ops.d_div @ cur.u.coeffs)
             - ops.hu_dual(cur.u.coeffs))
    rhs_p = _mass_rhs(ops, cfg, cur, ctx)
    x = _solve(ops, ("mono", cfg.L1, cfg.L2, tau),
               ops.monolithic_system(cfg.L1, cfg.L2, tau),
               np.concatenate([rhs_u, ctx.g_vec, rhs_p]), trace)
    return BiotState(FeFunction(ops.dofmap_u, x[:nu]),
                     FeFunction(ops.dofmap_q, x[nu:nu + nq]),
                     FeFunction(ops.dofmap_p, x[nu + nq:]), ctx.t_new)


_ITERATIONS = {"splitting": splitting_iteration, "monolithic": monolithic_iteration}


def iterate_to_convergence(prev: BiotState, cfg: SchemeConfig,
                           ops: BiotOperators, mat: MaterialModel,
                           problem: ProblemDefinition, tau,
                           keep_iterates=False):
    """Iterate one scheme until the summed increment norms fall below tol.

    The first iterate is seeded with the previous time-step solution.  A
    combined increment above divergence_factor times the first one aborts;
    exhausting max_iter returns with converged=False.  Returns the final
    state, the trace and (optionally) the archived iterates.
    """
    t0 = _time.perf_counter()
    ctx = StepContext.build(ops, problem, prev, tau)
    step = _ITERATIONS[cfg.kind]
    cur = prev.copy()
    cur.time = ctx.t_new
    trace = IterationTrace()
    archive = [cur.copy()] if keep_iterates else None

    first_total = None
    for _ in range(cfg.max_iter):
        new = step(prev, cur, cfg, ops, mat, problem, tau, ctx=ctx, trace=trace)
        dp = l2_norm(FeFunction(ops.dofmap_p, new.p.coeffs - cur.p.coeffs))
        dq = l2_norm(FeFunction(ops.dofmap_q, new.q.coeffs - cur.q.coeffs))
        du = l2_norm(FeFunction(ops.dofmap_u, new.u.coeffs - cur.u.coeffs))
        trace.record(dp, dq, du)
        if keep_iterates:
            archive.append(new.copy())
        cur = new
        total = trace.totals[-1]
        if not np.isfinite(total):
            raise DivergenceError(
                f"non-finite increment at iteration {trace.iterations}")
        if total <= cfg.tol:
            trace.converged = True
            break
        if first_total is None:
            first_total = total
        elif total > cfg.divergence_factor * first_total:
            raise DivergenceError(
                f"increment {total:.3e} exceeds {cfg.divergence_factor:g} x "
                f"first increment {first_total:.3e}")
    trace.seconds = _time.perf_counter() - t0

    check_admissible(mat, cur.p.coeffs, ops.div_u_cells(cur.u.coeffs),
                     context=f"t={ctx.t_new:g}: ")
    if keep_iterates:
        return cur, trace, archive
    return cur, trace


def build_initial_state(problem: ProblemDefinition, ops: BiotOperators) -> BiotState:
    """Interpolate the problem's initial data onto the discrete spaces."""
    return BiotState(
        interpolate(ops.dofmap_u, problem.initial_u),
        interpolate(ops.dofmap_q, problem.initial_q),
        interpolate(ops.dofmap_p, problem.initial_p),
        0.0)


def time_march(problem: ProblemDefinition, mesh: Mesh, mat: MaterialModel,
               cfg: SchemeConfig, tau, n_steps, ops: BiotOperators = None,
               initial: BiotState = None):
    """March n_steps implicit steps; each seeds from the previous solution.

    Returns the list of (state, trace) pairs, one per step.  Non-converged
    steps are kept (flagged in the trace); divergence aborts with the step
    index attached.
    """
    if n_steps < 1:
        raise ValueError("need at least one time step")
    ops = ops or build_operators(mesh, mat, problem)
    prev = initial if initial is not None else build_initial_state(problem, ops)
    results = []
    for n in range(1, n_steps + 1):
        try:
            state, trace = iterate_to_convergence(prev, cfg, ops, mat,
                                                  problem, tau)
        except DivergenceError as exc:
            raise DivergenceError(f"step {n} (t={prev.time + tau:g}): {exc}") from exc
        results.append((state, trace))
        prev = state
    return results


def residual_norms(state: BiotState, prev: BiotState, ops: BiotOperators,
                   mat: MaterialModel, problem: ProblemDefinition, tau,
                   ctx: StepContext = None):
    """Dual norms of the non-linear discrete residual at a state.

    Residuals of the mechanics, Darcy and mass rows are restricted to the
    constrained (reduced) spaces and measured in inverse-mass norms.
    """
    ctx = ctx or StepContext.build(ops, problem, prev, tau)
    u, q, p = state.u.coeffs, state.q.coeffs, state.p.coeffs
    alpha = mat.alpha
    r_u = ops.a_e @ u + ops.hu_dual(u) - alpha * (ops.b_up @ p) - ctx.f_vec
    r_q = ops.m_q @ q - ops.b_qp.T @ p - ctx.g_vec
    r_p = (ops.bp_dual(p) + alpha * ops.divu_dual(u) + tau * (ops.b_qp @ q)
           - ctx.mass_const)

    def dual(field_name, r, mass):
        con = getattr(ops.constraints, field_name)
        rr = con.restriction.T @ r
        key = ("mass_red", field_name)
        lu = ops.lu_cache.get(key)
        if lu is None:
            lu = CachedLU((con.restriction.T @ mass @ con.restriction).tocsr())
            ops.lu_cache[key] = lu
        return float(np.sqrt(max(rr @ lu.solve(rr), 0.0)))

    res_u = dual("u", r_u, ops.dofmap_u.mass_matrix)
    res_q = dual("q", r_q, ops.dofmap_q.mass_matrix)
    res_p = float(np.sqrt(np.sum(r_p * r_p / ops.mesh.areas)))
    return {"u": res_u, "q": res_q, "p": res_p}


def write_trace_csv(traces, path):
    """Serialize per-step iteration traces as step,iter,dp,dq,du,sum,rate."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,iter,dp,dq,du,sum,rate\n")
        for step, trace in enumerate(traces, start=1):
            for i in range(trace.iterations):
                rate = trace.rates[i]
                rate_s = f"{rate:.17g}" if np.isfinite(rate) else ""
                fh.write(f"{step},{i + 1},{trace.dp[i]:.17g},{trace.dq[i]:.17g},"
                         f"{trace.du[i]:.17g},{trace.totals[i]:.17g},{rate_s}\n")
