"""End-to-end acceptance checks.  Each test prints one ACCEPTANCE line with its verdict."""

import time

import numpy as np
import pytest

from scvx_drive.checks import discretization_error, random_feasible_reference
from scvx_drive.conic import ProgramBuilder, SolveStatus, solve
from scvx_drive.scenarios import preset
from scvx_drive.scvx import ScvxConfig, run
from scvx_drive.subproblem import sigma_star, trigger_rows
from scvx_drive.transcription import build_scaling, foh_weights
from scvx_drive.vehicle import (
    DELTA,
    EY,
    U1,
    V,
    ModelVariant,
    VehicleParams,
    arc_dynamics,
    dynamics_jacobians,
    side_slip,
    valid_states,
)

CFG = ScvxConfig()
FRICTION = 0.6 * 9.81
DELTA_MAX = np.deg2rad(27.0)
RUNTIME_TARGET_S = 3.0


def report(capsys, n, checks, note=""):
    failed = [name for name, ok in checks.items() if not ok]
    verdict = "PASS" if not failed else "FAIL"
    detail = note if not failed else f"failed: {', '.join(failed)}; {note}"
    with capsys.disabled():
        print(f"\nACCEPTANCE {n}: {verdict}  {detail}")
    assert not failed, detail


def timed_run(name, **changes):
    sc = preset(name)
    for key, value in changes.items():
        setattr(sc, key, value)
    start = time.perf_counter()
    plan = run(sc, CFG)
    return plan, time.perf_counter() - start


def stop_checks(plan, runtime):
    x, u = plan.trajectory.x, plan.trajectory.u
    last = plan.history[-1]
    cons = preset("stop-50m").constraint_spec()
    return {
        "converged": plan.converged and plan.reason == "converged",
        "iterations<=30": plan.iterations <= 30,
        "nu_norm<=1e-6": last.nu_norm <= 1e-6,
        "step<=1e-4": last.step <= 1e-4,
        "terminal speed": abs(x[-1, V] - 0.5) <= 0.1,
        "friction circle": np.max(plan.a_norm) <= FRICTION + 1e-3,
        "steering bound": np.max(np.abs(x[:, DELTA])) <= DELTA_MAX + 1e-4,
        "steering-rate bound": np.max(np.abs(u[:, U1])) <= cons.delta_rate_max + 1e-6,
        f"runtime<={RUNTIME_TARGET_S:g}s": runtime <= RUNTIME_TARGET_S,
    }


@pytest.fixture(scope="module")
def stop_plan():
    return timed_run("stop-50m")


def test_acceptance_1_stop_in_50m(capsys, stop_plan):
    plan, runtime = stop_plan
    note = (f"iterations {plan.iterations}, V_end {plan.trajectory.x[-1, V]:.4f} m/s, "
            f"max|a| {np.max(plan.a_norm):.4f} m/s^2, runtime {runtime:.2f} s")
    report(capsys, 1, stop_checks(plan, runtime), note)


def test_acceptance_2_stop_with_obstacle(capsys, stop_plan):
    plan, runtime = timed_run("stop-obstacle")
    checks = stop_checks(plan, runtime)
    checks["obstacle clearance"] = bool(np.all(plan.trajectory.x[20:25, EY] <= -0.5 + 1e-3))
    n_stop = stop_plan[0].iterations
    note = (f"iterations {plan.iterations} vs {n_stop} without obstacle "
            f"({'>=' if plan.iterations >= n_stop else '<'}; reported only), "
            f"max e_y at nodes 20-24 {np.max(plan.trajectory.x[20:25, EY]):.4f} m, runtime {runtime:.2f} s")
    report(capsys, 2, checks, note)


def test_acceptance_3_state_triggered_evasion(capsys):
    plan, runtime = timed_run("evasion-trigger")
    slow, _ = timed_run("evasion-trigger", v0=20.0)
    spec = preset("evasion-trigger").trigger_spec()
    e_y_end = plan.trajectory.x[-2:, EY]
    checks = {
        "converged": plan.converged,
        "trigger activated": plan.trigger_active,
        "evasion at last two nodes": bool(np.all(e_y_end >= 1 - 1e-3)),
        "V0=20 converged": slow.converged,
        "V0=20 never triggers": not slow.trigger_active and not any(h.trigger_active for h in slow.history),
        "V0=20 no evasion rows": trigger_rows(slow.trajectory, spec) is None,
    }
    note = (f"iterations {plan.iterations}, e_y last two {np.round(e_y_end, 4).tolist()} m, "
            f"V_end {plan.trajectory.x[-1, V]:.3f} m/s; V0=20 run: {slow.iterations} iterations, "
            f"V_end {slow.trajectory.x[-1, V]:.3f} m/s")
    report(capsys, 3, checks, note)


def test_acceptance_4_discretization_oracle(capsys, problems):
    checks, parts = {}, []
    for name, pr in problems.items():
        ref = random_feasible_reference(preset(name), np.random.default_rng(2024))
        rep = discretization_error(ref, pr.params, pr.variant, pr.scaling.D_x, substeps=8)
        checks[f"{name} error<=1e-6"] = rep.max_error <= 1e-6
        checks[f"{name} halving ratio in [8,32]"] = 8 <= rep.order_ratio <= 32
        parts.append(f"{name} {rep.max_error:.2e} (x{rep.order_ratio:.1f})")
    report(capsys, 4, checks, "; ".join(parts))


def test_acceptance_5_jacobians(capsys):
    params = VehicleParams()
    rng = np.random.default_rng(5)
    h = 1e-6
    checks, parts = {}, []
    for variant in ModelVariant:
        worst, n = 0.0, 0
        while n < 100:
            x = np.array([rng.uniform(-3, 3), rng.uniform(-0.4, 0.4), rng.uniform(-3, 3), rng.uniform(0.5, 30),
                          rng.uniform(-0.47, 0.47), rng.uniform(0, 10)])
            u = rng.uniform([-8, -1], [4, 1])
            kappa = rng.uniform(-0.05, 0.05)
            if not valid_states(x, kappa, params, variant):
                continue
            n += 1
            A, B = dynamics_jacobians(x, u, kappa, params, variant)
            analytic = np.hstack([A, B])
            z = np.concatenate([x, u])
            fd = np.column_stack([
                (arc_dynamics((z + h * e)[:6], (z + h * e)[6:], kappa, params, variant)
                 - arc_dynamics((z - h * e)[:6], (z - h * e)[6:], kappa, params, variant)) / (2 * h)
                for e in np.eye(8)
            ])
            # relative error, with an absolute floor for structurally zero entries
            err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3)
            worst = max(worst, float(err.max()))
        checks[f"{variant.value} rel err<=1e-4"] = worst <= 1e-4
        parts.append(f"{variant.value} worst rel err {worst:.1e} over 100 states")
    report(capsys, 5, checks, "; ".join(parts))


def _norm_epigraph():
    b = ProgramBuilder()
    t = b.variable("t", (1,))
    b.soc_le([(t, [1.0])], 0.0, [], [3.0, 4.0])
    b.cost(t, 1.0)
    return b.build(), 5.0


def _lp_bound():
    b = ProgramBuilder()
    x = b.variable("x", (1,))
    b.le([(x, [[-1.0]])], [-1.0])
    b.le([(x, [[-1.0]])], [2.0])
    b.cost(x, 1.0)
    return b.build(), 1.0


def _least_norm():
    b = ProgramBuilder()
    x = b.variable("x", (3,))
    u = b.variable("u", (2,))
    t = b.variable("t", (1,))
    b.eq([(x[[0]], [[1.0]])], [0.0])
    b.eq([(x[[2]], [[1.0]])], [1.0])
    for k in range(2):
        b.eq([(x[[k + 1]], [[1.0]]), (x[[k]], [[-1.0]]), (u[[k]], [[-1.0]])], [0.0])
    b.soc_le([(t, [1.0])], 0.0, [(u, np.eye(2))], np.zeros(2))
    b.cost(t, 1.0)
    return b.build(), np.sqrt(0.5)


def test_acceptance_6_conic_solver(capsys):
    checks, parts = {}, []
    for name, make in (("norm epigraph", _norm_epigraph), ("lp bound", _lp_bound), ("least norm", _least_norm)):
        prog, optimum = make()
        res = solve(prog)
        checks[name] = res.status is SolveStatus.OPTIMAL and abs(res.objective - optimum) <= 1e-6
        parts.append(f"{name} |err| {abs(res.objective - optimum):.1e}")
    b = ProgramBuilder()
    x = b.variable("x", (1,))
    b.le([(x, [[-1.0]])], [-1.0])
    b.le([(x, [[1.0]])], [0.0])
    b.cost(x, 1.0)
    status = solve(b.build()).status
    checks["infeasible status"] = status is SolveStatus.PRIMAL_INFEASIBLE
    parts.append(f"x>=1 and x<=0 -> {status.value}")
    report(capsys, 6, checks, "; ".join(parts))


def test_acceptance_7_scvx_invariants(capsys):
    # an oversized initial radius on the evasion case produces rejected steps to inspect
    plan = run(preset("evasion-trigger"), ScvxConfig(rho_tr_init=10.0))
    rejected = accepted = 0
    unchanged = decreasing = True
    ref = None
    for h in plan.history:
        if h.accepted:
            accepted += 1
            decreasing &= h.nonlinear_cost < h.prev_cost
            ref = h.trajectory
        else:
            rejected += 1
            if ref is not None:
                unchanged &= np.array_equal(h.trajectory.x, ref.x) and np.array_equal(h.trajectory.u, ref.u)
    sigma_ok = True
    for g in (-1.0, -0.3, 0.0, 0.5):
        s = float(sigma_star(g))
        sigma_ok &= s >= 0 and g + s >= 0 and s * g <= 0
    checks = {
        "some steps rejected": rejected > 0,
        "rejections keep reference": unchanged,
        "acceptances decrease cost": decreasing,
        "sigma* algebra": sigma_ok,
    }
    report(capsys, 7, checks, f"{accepted} accepted, {rejected} rejected, converged={plan.converged}")


def test_acceptance_8_properties(capsys):
    rng = np.random.default_rng(8)
    roundtrip = 0.0
    for _ in range(200):
        lo = rng.uniform(-100, 100, 8)
        width = rng.uniform(0.01, 100, 8)
        sc = build_scaling(list(zip(lo[:6], lo[:6] + width[:6])), list(zip(lo[6:], lo[6:] + width[6:])))
        x = rng.uniform(-1e3, 1e3, (5, 6))
        u = rng.uniform(-1e3, 1e3, (5, 2))
        roundtrip = max(roundtrip,
                        float(np.max(np.abs(sc.unscale_x(sc.scale_x(x)) - x) / np.maximum(np.abs(x), 1.0))),
                        float(np.max(np.abs(sc.unscale_u(sc.scale_u(u)) - u) / np.maximum(np.abs(u), 1.0))))
    params = VehicleParams()
    d = rng.uniform(-1.5, 1.5, 1000)
    odd = bool(np.all(side_slip(-d, params) == -side_slip(d, params)))
    s_k = rng.uniform(-5, 5, 1000)
    width = rng.uniform(0.01, 5, 1000)
    lm, lp = foh_weights(s_k + rng.uniform(0, 1, 1000) * width, s_k, s_k + width)
    partition = float(np.max(np.abs(lm + lp - 1.0)))
    checks = {
        "scaling roundtrip": roundtrip <= 1e-13,
        "side_slip odd": odd,
        "lambda partition": partition <= 1e-14,
    }
    note = f"roundtrip rel err {roundtrip:.1e}, |lambda-+lambda+ - 1| {partition:.1e}"
    report(capsys, 8, checks, note)
