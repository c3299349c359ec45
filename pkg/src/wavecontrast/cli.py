"""Command-line entry point: ``wavecontrast <command> [options]``.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
MODES = ("fredholm-2d", "multi", "transport")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="scenario file ([section] key = value)")
    common.add_argument("--out", type=Path, help="output directory (overrides the scenario)")
    common.add_argument("--seed", type=int, help="seed for random velocities and noise")
    common.add_argument("--threads", type=int, help="threads for the linear-algebra backend")
    common.add_argument("--mode", choices=MODES, help="recovery mode (overrides the scenario)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wavecontrast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("forward", parents=[common], help="forward solve with the true speed; writes the Neumann trace")
    sub.add_parser("gcc", parents=[common], help="ray-based control-time estimate")
    sub.add_parser("control-test", parents=[common], help="HUM control for a smooth target; reports residuals")
    sub.add_parser("illuminate", parents=[common], help="build the illumination and its source factors")
    sub.add_parser("reconstruct", parents=[common], help="full pipeline: synthesize, control, recover")
    ex = sub.add_parser("export", parents=[common], help="convert FLD1/TRC1 files to CSV")
    ex.add_argument("files", nargs="*", type=Path, help="files to convert (default: every .fld/.trc in --out)")
    return p


def _set_threads(k: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(k)


def _write_json(path: Path, data: dict) -> None:
    from .pipeline import _json_value

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_value(data), indent=2, sort_keys=True) + "\n")


def _load(args):
    from .pipeline import Scenario, load_scenario

    sc = load_scenario(args.scenario) if args.scenario else Scenario()
    if args.mode:
        sc.mode = args.mode
    if args.seed is not None:
        sc.seed = args.seed
    out = args.out if args.out is not None else sc.path(sc.out)
    return sc, out


def _cmd_forward(args) -> int:
    import numpy as np

    from . import io as fio
    from .control import ControlProblem
    from .pipeline import illuminate_poisson, smooth_random_field
    from .wave import CauchyData, discrete_energy, neumann_trace, solve_forward

    sc, out = _load(args)
    sc.validate()
    grid = sc.build_grid()
    coeffs = sc.build_coefficients(grid)
    tau = 3.0 if sc.tau == "auto" else float(sc.tau)
    prob = ControlProblem(grid, coeffs, tau, dt=sc.dt, cfl=sc.cfl)
    alpha = illuminate_poisson(grid, coeffs, sc.delta).alpha
    rng = np.random.default_rng(sc.seed)
    beta = smooth_random_field(grid, rng, sc.beta_modes, sc.beta_scale) if sc.beta == "random" else sc.field(grid, sc.beta)
    beta[~grid.interior_mask] = 0.0
    traj = solve_forward(grid, coeffs, CauchyData(alpha, beta), nt=prob.nt, dt=prob.dt, operator=prob.operator)
    trace = neumann_trace(traj, grid, coeffs, method="variational", operator=prob.operator)
    energy = discrete_energy(traj, prob.operator)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_trace(out / "trace.trc", trace)
    fio.write_field(out / "w_final.fld", traj.snapshots[-1], grid.spacing)
    drift = float(np.abs(energy - energy[0]).max() / max(abs(energy[0]), 1e-300))
    _write_json(out / "forward.json", {"nt": prob.nt, "dt": prob.dt, "tau": tau, "energy_drift": drift})
    print(f"forward: nt={prob.nt} dt={prob.dt:.6g} relative energy drift {drift:.3e}")
    return EXIT_OK


def _cmd_gcc(args) -> int:
    from .gcc import estimate_control_time

    sc, out = _load(args)
    sc.validate()
    grid = sc.build_grid()
    res = estimate_control_time(grid, sc.build_coefficients(grid))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "gcc.json", {"verdict": res.verdict, "tau_est": res.tau, "max_escape": res.max_escape,
                                   "t_max": res.t_max, "survivors": res.n_survived, "grazing": res.n_grazing})
    print(res)
    return EXIT_OK if res.verdict == "PASS" else EXIT_NUMERICAL


def _cmd_control_test(args) -> int:
    import numpy as np

    from .control import ControlProblem, control_residuals, hum_min_norm_control
    from .pipeline import smooth_random_field

    sc, out = _load(args)
    sc.validate()
    grid = sc.build_grid()
    coeffs = sc.build_coefficients(grid)
    tau = 3.0 if sc.tau == "auto" else float(sc.tau)
    prob = ControlProblem(grid, coeffs, tau, eps=sc.eps, kappa=sc.kappa, tol=sc.tol, max_iter=sc.max_iter,
                          dt=sc.dt, cfl=sc.cfl)
    phi = smooth_random_field(grid, np.random.default_rng(sc.seed), 2)
    zeta = hum_min_norm_control(prob, phi, method="cg")
    pos, vel = control_residuals(prob, zeta, phi)
    ok = pos <= 1e-2 and vel <= 1e-2 and zeta.converged
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "control.json", {"iterations": zeta.iterations, "converged": zeta.converged,
                                       "position_residual": pos, "velocity_residual": vel, "n_modes": prob.n_modes})
    print(f"control-test: {zeta.iterations} CG iterations, |xi(0)|/|phi| = {pos:.3e}, "
          f"|d_t xi(0) - phi|/|phi| = {vel:.3e} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _cmd_illuminate(args) -> int:
    import numpy as np

    from . import io as fio
    from .pipeline import illuminate_harmonic, illuminate_linear, illuminate_poisson

    sc, out = _load(args)
    sc.validate()
    grid = sc.build_grid()
    coeffs = sc.build_coefficients(grid)
    if sc.illumination == "harmonic":
        il = illuminate_harmonic(grid, coeffs, sc.illumination_faces, sc.illumination_value, sc.band)
    elif sc.illumination == "linear":
        il = illuminate_linear(grid, coeffs, sc.illumination_faces.strip(), sc.illumination_value)
    else:
        il = illuminate_poisson(grid, coeffs, sc.delta)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_field(out / "alpha.fld", il.alpha, grid.spacing)
    fio.write_field(out / "sigma0.fld", il.sigma0, grid.spacing)
    info = {"kind": sc.illumination, "residual": il.residual,
            "sigma0_min": float(np.abs(il.sigma0[grid.interior_mask]).min())}
    if il.flow is not None:
        info["flow_checks"] = {k: bool(ok) for k, (ok, _) in il.flow.checks.items()}
        print(il.flow)
    if il.max_principle is not None:
        info["max_principle"] = list(il.max_principle)
    _write_json(out / "illumination.json", info)
    print(f"illuminate: {sc.illumination}, residual {il.residual:.3e}")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    from .pipeline import run_pipeline

    sc, out = _load(args)
    res = run_pipeline(sc, out)
    s = res.summary
    line = f"reconstruct [{s['mode']}]: |f| = {s['f_norm']:.4e}"
    if "f_relative_error" in s:
        line += f", relative error {s['f_relative_error']:.4f}"
    print(line)
    for key, ok in s.get("checks", {}).items():
        print(f"  {'PASS' if ok else 'FAIL'} {key}")
    return EXIT_OK if all(s.get("checks", {}).values()) else EXIT_NUMERICAL


def _cmd_export(args) -> int:
    from .pipeline import export_plot_data

    files = list(args.files)
    if not files:
        _, out = _load(args)
        files = sorted(p for p in Path(out).glob("*") if p.suffix in (".fld", ".trc"))
    missing = [str(f) for f in files if not Path(f).is_file()]
    if missing:
        print(f"error: missing files: {', '.join(missing)}", file=sys.stderr)
        return EXIT_INVALID
    for p in export_plot_data(files, args.out if args.files and args.out else None):
        print(p)
    return EXIT_OK


COMMANDS = {
    "forward": _cmd_forward,
    "gcc": _cmd_gcc,
    "control-test": _cmd_control_test,
    "illuminate": _cmd_illuminate,
    "reconstruct": _cmd_reconstruct,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .control import ControlError
    from .geometry import GeometryError
    from .io import FormatError
    from .pipeline import NUMERICAL_ERRORS, PipelineError, ScenarioError

    try:
        return COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if exc.numerical else EXIT_INVALID
    except (ScenarioError, GeometryError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERICAL_ERRORS + (ControlError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
