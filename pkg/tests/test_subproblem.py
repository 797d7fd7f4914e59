import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import shot_reference
from scvx_drive.conic import solve
from scvx_drive.scenarios import preset
from scvx_drive.scvx import ScvxConfig, initial_guess, make_problem
from scvx_drive.subproblem import (
    ConstraintSpec,
    CostWeights,
    TriggerSpec,
    assemble,
    extract,
    friction_rows,
    sigma_star,
    soft_cost,
    trigger_rows,
)
from scvx_drive.transcription import ScalingMap, foh_discretize
from scvx_drive.vehicle import EY, U0, V, VehicleParams, lateral_acceleration

P = VehicleParams()
ZERO_SOFT = CostWeights(0, 0, 0, 0, 0, 0, 1e5)


def first_subproblem(name, rho_tr=1.0):
    sc = preset(name)
    guess = initial_guess(sc)
    pr = make_problem(sc, ScvxConfig(), guess=guess)
    ltv = foh_discretize(guess, pr.params, pr.variant, close_shooting=True)
    prog = assemble(ltv, guess, pr.weights, pr.cons, pr.trigger, rho_tr, pr.scaling, pr.params, pr.variant,
                    pr.v_final)
    res = solve(prog)
    return guess, pr, prog, res


def two_node_problem():
    ref = shot_reference([0.0, 0.0, 0.0, 10.0, 0.0, 0.0], [[-1.0, 0.01], [-1.0, 0.01]], [0.0, 0.0], (0.0, 2.0))
    cons = ConstraintSpec(corridor=[[-4, 4], [-4, 4]], x_initial=ref.x[0], final_state_pins={},
                          final_control_pins={})
    return ref, cons


def test_feasible_reference_needs_no_virtual_control():
    ref, cons = two_node_problem()
    ltv = foh_discretize(ref, P)
    scaling = ScalingMap(np.array([4, 0.5, 1, 15, 0.47, 5.0]), np.array([0, 0, 0, 15, 0, 5.0]),
                         np.array([6.0, 1.0]), np.array([-2.0, 0.0]))
    prog = assemble(ltv, ref, ZERO_SOFT, cons, None, 1.0, scaling, P)
    res = solve(prog)
    traj, nu_norm, objective = extract(res, prog, scaling)
    assert nu_norm <= 1e-8
    # solver tolerance 1e-8 on the normalized cost, times the virtual-control weight
    assert objective == pytest.approx(0.0, abs=1e-8 * ZERO_SOFT.w_nu * 10)


def test_identity_scaling_extracts_raw_values():
    ref, cons = two_node_problem()
    prog = assemble(foh_discretize(ref, P), ref, ZERO_SOFT, cons, None, 1.0, ScalingMap.identity(), P)
    res = solve(prog)
    traj, _, _ = extract(res, prog, ScalingMap.identity())
    np.testing.assert_array_equal(traj.x.ravel(), res.x[prog.variables["x"]].ravel())


@pytest.mark.parametrize("rho_tr", [0.05, 0.3, 1.0])
def test_trust_region_holds_per_node(rho_tr):
    guess, pr, prog, res = first_subproblem("stop-50m", rho_tr)
    traj, _, _ = extract(res, prog, pr.scaling)
    dx = np.abs(pr.scaling.scale_x(traj.x) - pr.scaling.scale_x(guess.x)).sum(axis=1)
    du = np.abs(pr.scaling.scale_u(traj.u) - pr.scaling.scale_u(guess.u)).sum(axis=1)
    assert np.all(dx + du <= rho_tr + 1e-6)


def test_hard_rows_hold_at_solution():
    _, pr, prog, res = first_subproblem("stop-obstacle")
    assert max(prog.residuals(res.x).values()) <= 1e-6


def test_obstacle_corridor_enforced():
    _, pr, prog, res = first_subproblem("stop-obstacle")
    traj, _, _ = extract(res, prog, pr.scaling)
    assert np.all(traj.x[20:25, EY] <= -0.5 + 1e-6)
    assert np.all(np.abs(traj.x[:, EY]) <= 4.0 + 1e-6)


def test_jerk_epigraph_is_tight():
    _, pr, prog, res = first_subproblem("stop-50m")
    traj, _, _ = extract(res, prog, pr.scaling)
    tau = res.x[prog.variables["tau_jerk"]][0]
    assert tau == pytest.approx(pr.weights.w_jerk * np.linalg.norm(np.diff(traj.u[:, U0])), rel=1e-6, abs=1e-7)


def test_objective_matches_soft_cost_plus_penalty():
    _, pr, prog, res = first_subproblem("stop-50m")
    traj, nu_norm, objective = extract(res, prog, pr.scaling)
    expected = soft_cost(traj.x, traj.u, pr.weights, pr.v_final) + pr.weights.w_nu * nu_norm
    assert objective == pytest.approx(expected, rel=1e-6)


def test_friction_radius():
    cons = ConstraintSpec(corridor=np.tile([-4, 4], (3, 1)), x_initial=np.zeros(6), mu=0.6)
    assert cons.friction_radius == pytest.approx(5.886)


def test_friction_rows_straight_reference():
    sc = preset("stop-50m")
    sc.curvature_spec = {"preset": "straight"}
    guess = initial_guess(sc)
    fr = friction_rows(guess, sc.constraint_spec(), P)
    np.testing.assert_array_equal(fr.a_y_ref, 0.0)
    np.testing.assert_array_equal(fr.da_dv, 0.0)
    assert np.all(fr.da_ddelta > 0)


def test_friction_linearization_second_order():
    guess = initial_guess(preset("stop-50m"))
    cons = preset("stop-50m").constraint_spec()
    fr = friction_rows(guess, cons, P)
    k = 10
    errs = []
    for eps in (0.4, 0.2, 0.1):
        v, d = guess.x[k, V] + eps * 2.0, guess.x[k, 4] + eps * 0.05
        exact = lateral_acceleration(v, d, P)[0]
        errs.append(abs(exact - fr.a_y(v, d)[k]))
    assert 3.5 < errs[0] / errs[1] < 4.5
    assert 3.5 < errs[1] / errs[2] < 4.5


@pytest.mark.parametrize("g", [-1.0, -0.3, 0.0, 0.5])
def test_sigma_star_examples(g):
    s = sigma_star(g)
    assert s >= 0 and g + s >= 0 and s * g <= 0
    assert s == max(-g, 0.0)


@given(st.floats(-1e6, 1e6))
def test_sigma_star_complementarity(g):
    s = float(sigma_star(g))
    assert s >= 0
    assert g + s >= 0
    assert s * g <= 0


def test_trigger_rows_gate():
    spec = TriggerSpec.terminal_speed_evasion()
    ref = initial_guess(preset("stop-50m"))
    assert trigger_rows(ref, spec) is None  # terminal speed 0.5 below threshold
    ref.x[-1, V] = 2.0
    rows = trigger_rows(ref, spec)
    assert sorted((k, i) for k, i, _, _ in rows) == [(ref.K - 2, EY), (ref.K - 1, EY)]
    # each row reads -e_y + 1 <= 0
    assert all(coeff == -1.0 and const == 1.0 for _, _, coeff, const in rows)
    assert trigger_rows(ref, None) is None


def test_trigger_rows_present_iff_gate_active():
    sc = preset("evasion-trigger")
    guess = initial_guess(sc)
    pr = make_problem(sc, ScvxConfig(), guess=guess)
    ltv = foh_discretize(guess, pr.params, pr.variant)
    for v_end, present in ((0.5, False), (2.0, True)):
        ref = guess.copy()
        ref.x[-1, V] = v_end
        prog = assemble(ltv, ref, pr.weights, pr.cons, pr.trigger, 1.0, pr.scaling, pr.params, pr.variant)
        assert ("trigger" in prog.row_tags) is present


def test_trigger_spec_validation():
    spec = TriggerSpec(gate_terms=((45, "v", -1.0),), gate_const=1.0, constraint_rows=(("e_y", -1.0, 1.0),),
                       node_set=(-1,))
    with pytest.raises(ValueError):
        spec.validate(40)
    with pytest.raises(ValueError):
        TriggerSpec(((0, "speed", 1.0),), 0.0, (), ()).validate(40)


def test_assemble_input_checks():
    ref, cons = two_node_problem()
    ltv = foh_discretize(ref, P)
    with pytest.raises(ValueError):
        assemble(ltv, ref, ZERO_SOFT, cons, None, 0.0, ScalingMap.identity(), P)
    bad = ConstraintSpec(corridor=np.tile([-4, 4], (3, 1)), x_initial=ref.x[0])
    with pytest.raises(ValueError):
        assemble(ltv, ref, ZERO_SOFT, bad, None, 1.0, ScalingMap.identity(), P)
    with pytest.raises(ValueError):
        ConstraintSpec(corridor=[[1.0, 1.0], [-1, 1]], x_initial=ref.x[0])


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        CostWeights(w_ey=-1.0)
