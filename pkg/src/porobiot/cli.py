"""Command-line front end: config resolution, run dispatch, CSV artifacts.

Configuration is a flat INI file with sections [material] [laws] [problem]
[scheme] [solver] [output]; command-line values beat the file, which beats
the defaults.  Every run writes its artifacts plus a manifest.json with
the fully resolved configuration, package versions and timings.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .assembly import build_operators
from .bench import (manufactured_convergence, run_mandel,
                    sensitivity_grid, sweep_L, verify_contraction,
                    write_contraction_csv, write_errors_csv, write_mandel_csv,
                    write_sensitivity_csv, write_sweep_csv, worker_count)
from .linalg import LinearSolveError, SolverOptions, write_solver_reports_csv
from .mesh import generate_rect_mesh
from .physics import (DARCY, CENTIPOISE, LAW_CASES, MandelConfig,
                      manufactured_material, manufactured_problem)
from .schemes import (DivergenceError, SchemeConfig, build_initial_state,
                      iterate_to_convergence, suggested_tuning,
                      write_trace_csv)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "material": {"alpha": "1.0", "mu": "1.0", "lam": "1.0",
                 "biot_modulus": "1.0", "permeability": "1.0",
                 "viscosity": "1.0"},
    "laws": {"case": "linear", "p_lo": "", "p_hi": "", "s_lo": "", "s_hi": ""},
    "problem": {"h": "0.0625", "tau": "0.25", "final_time": "1.0",
                "levels": "1", "a": "100.0", "b": "10.0", "force": "1e4",
                "dt": "1.0", "steps": "500", "nx": "40", "ny": "40",
                "probe_x": "", "probe_y": ""},
    "scheme": {"kind": "monolithic", "l1": "", "l2": "", "tol": "1e-8",
               "max_iter": "500", "schur_flow": "false"},
    "solver": {"method": "lu", "restart": "50", "rtol": "1e-10",
               "maxiter": "1000"},
    "output": {"dir": "out"},
}

# the consolidation benchmark defaults to its standard field parameters
MANDEL_MATERIAL = {"alpha": "1.0", "mu": "2.475e9", "lam": "1.65e9",
                   "biot_modulus": "1.65e10",
                   "permeability": repr(100.0 * DARCY),
                   "viscosity": repr(10.0 * CENTIPOISE)}


def resolve_config(subcommand, config_path=None, overrides=()):
    """Defaults (per subcommand), then the file, then -s key=value pairs."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if subcommand == "mandel":
        cfg["material"].update(MANDEL_MATERIAL)
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise ConfigError(f"cannot read config file {config_path}")
        for sec in parser.sections():
            if sec not in cfg:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, value in parser.items(sec):
                if key not in cfg[sec]:
                    raise ConfigError(f"unknown config key {sec}.{key}")
                cfg[sec][key] = value
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, value = item.split("=", 1)
        sec, key = dotted.split(".", 1)
        if sec not in cfg or key not in cfg[sec]:
            raise ConfigError(f"unknown config key {sec}.{key}")
        cfg[sec][key] = value
    return cfg


def _fget(cfg, sec, key, default=None):
    raw = cfg[sec][key]
    if raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{sec}.{key} must be a number, got {raw!r}")


def _iget(cfg, sec, key):
    return int(round(_fget(cfg, sec, key)))


def _bget(cfg, sec, key):
    return str(cfg[sec][key]).strip().lower() in ("1", "true", "yes", "on")


def parse_values(text):
    """A value list: 'logspace(a,b,n)' or comma-separated numbers."""
    text = text.strip()
    if text.startswith("logspace(") and text.endswith(")"):
        parts = text[len("logspace("):-1].split(",")
        if len(parts) != 3:
            raise ConfigError(f"bad logspace spec {text!r}")
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        return np.logspace(lo, hi, n)
    try:
        return np.array([float(v) for v in text.split(",") if v.strip() != ""])
    except ValueError:
        raise ConfigError(f"cannot parse value list {text!r}")


def _law_ranges(cfg):
    p_lo, p_hi = _fget(cfg, "laws", "p_lo"), _fget(cfg, "laws", "p_hi")
    s_lo, s_hi = _fget(cfg, "laws", "s_lo"), _fget(cfg, "laws", "s_hi")
    p_range = (p_lo, p_hi) if p_lo is not None and p_hi is not None else None
    s_range = (s_lo, s_hi) if s_lo is not None and s_hi is not None else None
    return p_range, s_range


def _solver_options(cfg):
    method = cfg["solver"]["method"].strip().lower()
    try:
        return SolverOptions(method=method,
                             restart=_iget(cfg, "solver", "restart"),
                             rtol=_fget(cfg, "solver", "rtol"),
                             maxiter=_iget(cfg, "solver", "maxiter"))
    except ValueError as exc:
        raise ConfigError(str(exc))


def _scheme_config(cfg, mat):
    kind = cfg["scheme"]["kind"]
    l1, l2 = _fget(cfg, "scheme", "l1"), _fget(cfg, "scheme", "l2")
    if l1 is None or l2 is None:
        s1, s2 = suggested_tuning(mat, kind)
        l1 = s1 if l1 is None else l1
        l2 = s2 if l2 is None else l2
    return SchemeConfig(kind, L1=l1, L2=l2, tol=_fget(cfg, "scheme", "tol"),
                        max_iter=_iget(cfg, "scheme", "max_iter"),
                        schur_flow=_bget(cfg, "scheme", "schur_flow"))


def _write_manifest(outdir, subcommand, cfg, artifacts, seconds, seed,
                    extra=None):
    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "artifacts": sorted(artifacts),
        "versions": {"porobiot": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "python": sys.version.split()[0]},
        "seconds": round(seconds, 3),
        "seed": seed,
        "workers": worker_count(),
    }
    if extra:
        manifest.update(extra)
    path = Path(outdir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _manufactured_setup(cfg):
    case = cfg["laws"]["case"].lower()
    if case not in LAW_CASES:
        raise ConfigError(f"unknown law case {case!r}")
    p_range, s_range = _law_ranges(cfg)
    mat = manufactured_material(
        case, permeability=_fget(cfg, "material", "permeability"),
        alpha=_fget(cfg, "material", "alpha"), mu=_fget(cfg, "material", "mu"),
        lam=_fget(cfg, "material", "lam"),
        m_modulus=_fget(cfg, "material", "biot_modulus"),
        nu_f=_fget(cfg, "material", "viscosity"),
        p_range=p_range, s_range=s_range)
    return case, mat


def cmd_manufactured(cfg, outdir):
    case, mat = _manufactured_setup(cfg)
    scheme = _scheme_config(cfg, mat)
    h = _fget(cfg, "problem", "h")
    nx0 = int(round(1.0 / h))
    levels = _iget(cfg, "problem", "levels")
    solver_rows = []
    rows = manufactured_convergence(
        case, scheme.kind, scheme.L1, scheme.L2, levels=levels, nx0=nx0,
        tau0=_fget(cfg, "problem", "tau"), tol=scheme.tol,
        max_iter=scheme.max_iter,
        final_time=_fget(cfg, "problem", "final_time"),
        permeability=_fget(cfg, "material", "permeability"),
        alpha=_fget(cfg, "material", "alpha"),
        solver=_solver_options(cfg), solver_rows=solver_rows)
    path = Path(outdir) / "errors.csv"
    write_errors_csv(rows, path)
    artifacts = [path]
    if solver_rows:
        sol_path = Path(outdir) / "linsolve.csv"
        write_solver_reports_csv(solver_rows, sol_path)
        artifacts.append(sol_path)
    return artifacts


def cmd_mandel(cfg, outdir):
    case = cfg["laws"]["case"].lower()
    mandel_cfg = MandelConfig(
        a=_fget(cfg, "problem", "a"), b=_fget(cfg, "problem", "b"),
        force=_fget(cfg, "problem", "force"),
        lam=_fget(cfg, "material", "lam"),
        biot_modulus=_fget(cfg, "material", "biot_modulus"),
        mu=_fget(cfg, "material", "mu"),
        alpha=_fget(cfg, "material", "alpha"))
    probe_x = _fget(cfg, "problem", "probe_x")
    probe_y = _fget(cfg, "problem", "probe_y")
    probe = (probe_x, probe_y) if probe_x is not None and probe_y is not None \
        else None
    l1, l2 = _fget(cfg, "scheme", "l1"), _fget(cfg, "scheme", "l2")
    solver_rows = []
    series, results, _ = run_mandel(
        case_id=case, cfg=mandel_cfg, scheme_kind=cfg["scheme"]["kind"],
        L1=l1, L2=l2, dt=_fget(cfg, "problem", "dt"),
        n_steps=_iget(cfg, "problem", "steps"),
        nx=_iget(cfg, "problem", "nx"), ny=_iget(cfg, "problem", "ny"),
        probe=probe, tol=_fget(cfg, "scheme", "tol"),
        max_iter=_iget(cfg, "scheme", "max_iter"),
        solver=_solver_options(cfg), solver_rows=solver_rows)
    bad = [i + 1 for i, (_, tr) in enumerate(results) if not tr.converged]
    if bad:
        raise DivergenceError(f"steps {bad[:5]} did not converge")
    series_path = Path(outdir) / "mandel.csv"
    write_mandel_csv(series, series_path)
    trace_path = Path(outdir) / "trace.csv"
    write_trace_csv([tr for _, tr in results], trace_path)
    artifacts = [series_path, trace_path]
    if solver_rows:
        sol_path = Path(outdir) / "linsolve.csv"
        write_solver_reports_csv(solver_rows, sol_path)
        artifacts.append(sol_path)
    return artifacts


def cmd_sweep(cfg, outdir, l1_spec, l2_spec):
    case, mat = _manufactured_setup(cfg)
    grid = sweep_L(case, cfg["scheme"]["kind"], parse_values(l1_spec),
                   parse_values(l2_spec),
                   nx=int(round(1.0 / _fget(cfg, "problem", "h"))),
                   tau=_fget(cfg, "problem", "tau"),
                   tol=_fget(cfg, "scheme", "tol"),
                   max_iter=_iget(cfg, "scheme", "max_iter"))
    path = Path(outdir) / "sweep.csv"
    write_sweep_csv(grid, path)
    return [path]


def cmd_sensitivity(cfg, outdir, axis, values_spec):
    case, mat = _manufactured_setup(cfg)
    scheme = _scheme_config(cfg, mat)
    rows = sensitivity_grid(case, scheme.kind, axis, parse_values(values_spec),
                            scheme.L1, scheme.L2,
                            nx=int(round(1.0 / _fget(cfg, "problem", "h"))),
                            tau=_fget(cfg, "problem", "tau"), tol=scheme.tol,
                            max_iter=scheme.max_iter)
    path = Path(outdir) / "sensitivity.csv"
    write_sensitivity_csv(rows, path)
    return [path]


def cmd_verify(cfg, outdir):
    case, mat = _manufactured_setup(cfg)
    scheme = _scheme_config(cfg, mat)
    prob = manufactured_problem(mat, final_time=_fget(cfg, "problem", "final_time"))
    nx = int(round(1.0 / _fget(cfg, "problem", "h")))
    mesh = generate_rect_mesh((0, 0), (1, 1), nx, nx)
    ops = build_operators(mesh, mat, prob)
    prev = build_initial_state(prob, ops)
    state, trace, archive = iterate_to_convergence(
        prev, scheme, ops, mat, prob, _fget(cfg, "problem", "tau"),
        keep_iterates=True)
    if not trace.converged:
        raise DivergenceError("iteration did not converge; nothing to verify")
    report = verify_contraction(archive, state, mat, scheme, ops)
    path = Path(outdir) / "contraction.csv"
    write_contraction_csv(report, path)
    flag = "monotone" if report.monotone else "NON-MONOTONE"
    print(f"contraction functional ({scheme.kind}, theorem-safe="
          f"{scheme.theorem_safe(mat)}): {flag} over {len(report.values)} values")
    if not report.monotone:
        raise DivergenceError("contraction functional is not monotone")
    return [path]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="porobiot",
        description="Iterative solvers for non-linear Biot poromechanics")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=0,
                       help="seed recorded in the manifest")
        p.add_argument("--scheme", choices=("splitting", "monolithic"))
        p.add_argument("--L1", type=float)
        p.add_argument("--L2", type=float)
        p.add_argument("--tol", type=float)

    p = sub.add_parser("manufactured", help="verification problem error study")
    common(p)
    p.add_argument("--case", help="law case id (linear, t1c1..t1c5)")
    p.add_argument("--h", type=float, help="mesh size of the coarsest level")
    p.add_argument("--tau", type=float)
    p.add_argument("--levels", type=int)

    p = sub.add_parser("mandel", help="consolidation benchmark time series")
    common(p)
    p.add_argument("--nonlinear", help="law case id (linear, t2c1..t2c3)")
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--probe", help="probe point 'x,y'")

    p = sub.add_parser("sweep", help="(L1, L2) iteration-count grid")
    common(p)
    p.add_argument("--case")
    p.add_argument("--h", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--L1-grid", required=True,
                   help="logspace(a,b,n) or comma list")
    p.add_argument("--L2-grid", required=True)
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("sensitivity", help="iteration counts along one axis")
    common(p)
    p.add_argument("--case")
    p.add_argument("--h", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--axis", required=True, choices=("h", "tau", "K", "alpha"))
    p.add_argument("--values", required=True)

    p = sub.add_parser("verify", help="contraction-functional verification")
    common(p)
    p.add_argument("--case")
    p.add_argument("--h", type=float)
    p.add_argument("--tau", type=float)
    return parser


def _apply_flags(cfg, args):
    """Dedicated command-line flags beat --set overrides and the file."""
    flagmap = {
        "scheme": ("scheme", "kind"), "L1": ("scheme", "l1"),
        "L2": ("scheme", "l2"), "tol": ("scheme", "tol"),
        "case": ("laws", "case"), "nonlinear": ("laws", "case"),
        "h": ("problem", "h"), "tau": ("problem", "tau"),
        "levels": ("problem", "levels"), "dt": ("problem", "dt"),
        "steps": ("problem", "steps"), "max_iter": ("scheme", "max_iter"),
        "out": ("output", "dir"),
    }
    for attr, (sec, key) in flagmap.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[sec][key] = str(value)
    probe = getattr(args, "probe", None)
    if probe is not None:
        parts = probe.split(",")
        if len(parts) != 2:
            raise ConfigError(f"probe must be 'x,y', got {probe!r}")
        cfg["problem"]["probe_x"] = parts[0]
        cfg["problem"]["probe_y"] = parts[1]


def main(argv=None):
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args.subcommand, args.config, args.overrides)
        _apply_flags(cfg, args)
        outdir = Path(cfg["output"]["dir"])
        try:
            outdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {outdir}: {exc}")
        if args.subcommand == "manufactured":
            artifacts = cmd_manufactured(cfg, outdir)
        elif args.subcommand == "mandel":
            artifacts = cmd_mandel(cfg, outdir)
        elif args.subcommand == "sweep":
            artifacts = cmd_sweep(cfg, outdir, args.L1_grid, args.L2_grid)
        elif args.subcommand == "sensitivity":
            artifacts = cmd_sensitivity(cfg, outdir, args.axis, args.values)
        elif args.subcommand == "verify":
            artifacts = cmd_verify(cfg, outdir)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown subcommand {args.subcommand}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, LinearSolveError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    _write_manifest(outdir, args.subcommand, cfg,
                    [str(p.name) for p in artifacts],
                    time.perf_counter() - t0, args.seed)
    for p in artifacts:
        print(f"wrote {p}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
