"""Command-line driver: plan a scenario, check the discretization, list presets."""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checks import TOLERANCE, discretization_error, random_feasible_reference
from .scenarios import PRESETS, ScenarioError, load_scenario, preset
from .scvx import InternalError, ScvxConfig, make_problem, run
from .transcription import DiscretizationError
from .vehicle import DELTA, EPSI, EY, PSI, STATE_NAMES, T, U0, U1, V, SingularityError

log = logging.getLogger("scvx_drive")

TRAJECTORY_COLUMNS = [
    "k", "s_m", "t_s", "e_y_m", "e_psi_rad", "psi_rad", "v_mps", "delta_rad",
    "u0_mps2", "u1_radps", "a_y_mps2", "a_norm_mps2", "kappa_1pm",
]
HISTORY_COLUMNS = ["iter", "cost", "predicted", "ratio", "rho_tr", "nu_norm", "accepted", "status"]
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _fmt(value) -> str:
    # repr round-trips floats exactly, which keeps files bitwise stable
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_outputs(plan, out_dir, history: bool = True) -> list:
    """Write trajectory.csv, history.csv and diagnostics.json; return the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = plan.trajectory
    x, u = traj.x, traj.u
    s = traj.s_physical
    paths = []

    path = out / "trajectory.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for k in range(traj.K):
            w.writerow([_fmt(v) for v in (
                k, s[k], x[k, T], x[k, EY], x[k, EPSI], x[k, PSI], x[k, V], x[k, DELTA],
                u[k, U0], u[k, U1], plan.a_y[k], plan.a_norm[k], traj.kappa[k],
            )])
    paths.append(path)

    if history:
        path = out / "history.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for rec in plan.history:
                w.writerow([_fmt(rec.index), _fmt(rec.nonlinear_cost), _fmt(rec.predicted_cost), _fmt(rec.ratio),
                            _fmt(rec.rho_tr), _fmt(rec.nu_norm), _fmt(rec.accepted), rec.status])
        paths.append(path)

    diag = {
        "converged": plan.converged,
        "reason": plan.reason,
        "iterations": plan.iterations,
        "trigger_active": plan.trigger_active,
        "terminal_speed_mps": float(x[-1, V]),
        "total_time_s": float(x[-1, T]),
        "max_a_norm_mps2": float(np.max(plan.a_norm)),
        "diagnostics": plan.diagnostics,
    }
    path = out / "diagnostics.json"
    path.write_text(json.dumps(diag, indent=2, sort_keys=True, default=_json_default) + "\n")
    paths.append(path)
    return paths


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cmd_plan(args) -> int:
    scenario = load_scenario(args.scenario)
    config = ScvxConfig(max_iterations=args.max_iter, substeps=args.substeps)
    plan = run(scenario, config)
    paths = write_outputs(plan, args.out, history=True)
    print(f"{scenario.name}: {plan.reason} after {plan.iterations} iterations, "
          f"terminal speed {plan.trajectory.x[-1, V]:.4f} m/s, trigger_active={plan.trigger_active}")
    if args.history:
        print("iter  cost          ratio     rho_tr    nu_norm   accepted")
        for rec in plan.history:
            print(f"{rec.index:4d}  {rec.nonlinear_cost:<12.6g}  {rec.ratio:<8.3g}  {rec.rho_tr:<8.3g}  "
                  f"{rec.nu_norm:<8.2e}  {rec.accepted}")
    for p in paths:
        log.info("wrote %s", p)
    return 0 if plan.converged else 2


def _cmd_check(args) -> int:
    scenario = load_scenario(args.scenario)
    problem = make_problem(scenario, ScvxConfig(substeps=args.substeps))
    ref = random_feasible_reference(scenario, np.random.default_rng(args.seed))
    rep = discretization_error(ref, problem.params, problem.variant, problem.scaling.D_x, args.substeps)
    print(f"{scenario.name}: max scaled error {rep.max_error:.3e} at node {rep.worst_node} "
          f"({STATE_NAMES[rep.worst_channel]}), substeps {rep.substeps}; "
          f"halving substeps: x{rep.order_ratio:.1f}")
    return 0 if rep.passed else 1


def _cmd_presets(args) -> int:
    for name in PRESETS:
        sc = preset(name)
        extra = []
        if sc.obstacles:
            extra.append(f"{len(sc.obstacles)} obstacle window(s)")
        if sc.trigger:
            extra.append("state-triggered evasion")
        print(f"{name:16s} s={sc.s_span:g} m  K={sc.K}  V0={sc.v0:g}  Vf={sc.v_final:g}"
              + (f"  ({', '.join(extra)})" if extra else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scvx-drive", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="run the planner on a scenario file or preset")
    p.add_argument("scenario", help="scenario JSON file or preset name")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--max-iter", type=int, default=ScvxConfig.max_iterations)
    p.add_argument("--substeps", type=int, default=ScvxConfig.substeps)
    p.add_argument("--history", action="store_true", help="print the iteration history")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("check-discretization", help=f"compare the discretization with fine RK4 (tolerance {TOLERANCE:g})")
    p.add_argument("scenario")
    p.add_argument("--substeps", type=int, default=ScvxConfig.substeps)
    p.add_argument("--seed", type=int, default=0, help="seed of the random reference")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("presets", help="list built-in scenarios")
    p.set_defaults(func=_cmd_presets)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SCVX_DRIVE_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, InternalError, SingularityError, DiscretizationError, ValueError, OSError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
