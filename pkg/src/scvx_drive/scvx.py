"""Successive convexification outer loop with trust-region scheduling."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .conic import SolveSettings, SolveStatus, solve
from .subproblem import (
    ConstraintSpec,
    CostWeights,
    assemble,
    extract,
    hard_violation,
    soft_cost,
    trigger_rows,
)
from .transcription import (
    DEFAULT_SUBSTEPS,
    ReferenceTrajectory,
    ScalingMap,
    build_scaling,
    foh_discretize,
    shoot,
)
from .vehicle import (
    DELTA,
    EPSI,
    EY,
    PSI,
    T,
    U0,
    U1,
    V,
    ModelVariant,
    SingularityError,
    VehicleParams,
    lateral_acceleration,
    s_rate,
)

log = logging.getLogger(__name__)

STALL_TOL = 1e-12


class InternalError(RuntimeError):
    """The subproblem became infeasible, which virtual control should rule out."""


@dataclass(frozen=True)
class ScvxConfig:
    rho0: float = 0.0
    rho1: float = 0.25
    rho2: float = 0.7
    shrink_factor: float = 2.0
    grow_factor: float = 3.2
    rho_tr_init: float = 1.0
    rho_tr_min: float = 1e-4
    rho_tr_max: float = 10.0
    max_iterations: int = 30
    eps_dx: float = 1e-4
    eps_nu: float = 1e-6
    substeps: int = DEFAULT_SUBSTEPS
    solver: SolveSettings = SolveSettings()

    def __post_init__(self):
        if not 0.0 <= self.rho0 < self.rho1 < self.rho2 < 1.0:
            raise ValueError("ratio thresholds must satisfy 0 <= rho0 < rho1 < rho2 < 1")
        if not (self.shrink_factor > 1 and self.grow_factor > 1):
            raise ValueError("trust-region shrink and grow factors must exceed 1")
        if not self.rho_tr_min < self.rho_tr_init <= self.rho_tr_max:
            raise ValueError("need rho_tr_min < rho_tr_init <= rho_tr_max")
        if self.max_iterations < 1 or self.substeps < 1:
            raise ValueError("max_iterations and substeps must be >= 1")


@dataclass
class IterationRecord:
    index: int
    trajectory: ReferenceTrajectory
    prev_cost: float
    nonlinear_cost: float
    predicted_cost: float
    ratio: float
    rho_tr: float
    nu_norm: float
    step: float
    accepted: bool
    status: str
    trigger_active: bool


@dataclass
class ConvergedPlan:
    trajectory: ReferenceTrajectory
    times: np.ndarray
    a_x: np.ndarray
    a_y: np.ndarray
    s_dot: np.ndarray
    history: list
    converged: bool
    reason: str
    trigger_active: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def a_norm(self) -> np.ndarray:
        return np.hypot(self.a_x, self.a_y)


@dataclass
class Problem:
    """Everything about a scenario the loop needs besides the iterate."""

    params: VehicleParams
    variant: ModelVariant
    weights: CostWeights
    cons: ConstraintSpec
    scaling: ScalingMap
    v_final: float
    trigger: object = None
    substeps: int = DEFAULT_SUBSTEPS


def initial_guess(scenario) -> ReferenceTrajectory:
    """Interpolate between the boundary conditions; steering from Ackermann geometry."""
    K = scenario.K
    s = np.linspace(0.0, scenario.s_span, K)
    kappa = scenario.curvature(s)
    v = np.linspace(scenario.v0, scenario.v_final, K)
    delta = np.arctan(scenario.params.wheelbase * kappa)
    # node times from the trapezoidal mean speed of each interval
    dt = np.diff(s) / (0.5 * (v[1:] + v[:-1]))
    t = np.concatenate([[0.0], np.cumsum(dt)])

    x = np.zeros((K, 6))
    x[:, PSI] = scenario.curvature.heading(s)
    x[:, V] = v
    x[:, DELTA] = delta
    x[:, T] = t
    u = np.zeros((K, 2))
    u[:, U0] = (scenario.v_final**2 - scenario.v0**2) / (2.0 * scenario.s_span)
    cons = scenario.constraint_spec()
    # keep the guess inside the actuator box and the friction circle so that a
    # small trust region around it still contains a feasible point
    a_y, _, _ = lateral_acceleration(v, delta, scenario.params, scenario.variant)
    reserve = np.sqrt(np.maximum(cons.friction_radius**2 - a_y**2, 0.0))
    u[:, U0] = np.clip(u[:, U0], np.maximum(cons.u0_min, -reserve), np.minimum(cons.u0_max, reserve))
    u[:, U1] = np.gradient(delta, t) if K > 2 else np.diff(delta)[0] / dt[0]

    for k, i, val in cons.state_pins():
        x[k, i] = val
    for k, i, val in cons.control_pins():
        u[k, i] = val
    return ReferenceTrajectory(x, u, kappa, (0.0, scenario.s_span))


def default_scaling(cons: ConstraintSpec, guess: ReferenceTrajectory) -> ScalingMap:
    """Scaling ranges from the constraint bounds; heading and time from the initial guess."""
    psi = guess.x[:, PSI]
    t_end = max(float(guess.x[-1, T]), 1.0)
    state_bounds = [
        (float(np.min(cons.corridor[:, 0])), float(np.max(cons.corridor[:, 1]))),
        (-0.5, 0.5),
        (float(np.min(psi)) - 0.5, float(np.max(psi)) + 0.5),
        (0.0, cons.v_max),
        (-cons.delta_max, cons.delta_max),
        (0.0, 2.0 * t_end),
    ]
    control_bounds = [(cons.u0_min, cons.u0_max), (-cons.delta_rate_max, cons.delta_rate_max)]
    return build_scaling(state_bounds, control_bounds)


def defects(traj: ReferenceTrajectory, problem: Problem, clamp: bool = False) -> np.ndarray:
    """Scaled multiple-shooting gaps x[k+1] - phi(x[k]) for every interval.

    Intervals crossing the s_dot guard give NaN unless ``clamp`` is set (see :func:`shoot`).
    """
    x_end = shoot(traj, problem.params, problem.variant, problem.substeps, clamp=clamp)
    return (traj.x[1:] - x_end) / problem.scaling.D_x


def nonlinear_cost(traj: ReferenceTrajectory, problem: Problem, rows=None) -> float:
    """Actual cost of a trajectory: soft terms plus the l1-penalized multiple-shooting defects.

    Intervals that cross the s_dot guard are shot with the progress rate floored
    at the guard, so singular trajectories get a large but finite merit.
    ``rows`` is accepted for symmetry with the subproblem; trigger rows are hard
    constraints there and do not enter the merit.  Raises SingularityError if a
    node itself violates the guard.
    """
    s_rate(traj.x, traj.kappa, problem.params, problem.variant)
    gap = float(np.sum(np.abs(defects(traj, problem, clamp=True))))
    if not np.isfinite(gap):
        return float("inf")
    return soft_cost(traj.x, traj.u, problem.weights, problem.v_final) + problem.weights.w_nu * gap


def trust_ratio(prev_cost: float, new_cost: float, predicted_cost: float):
    """Actual over predicted decrease, or None when the predicted decrease has stalled."""
    predicted = prev_cost - predicted_cost
    if predicted < STALL_TOL:
        return None
    return (prev_cost - new_cost) / predicted


class StallError(RuntimeError):
    pass


def ratio_step(prev_cost: float, new_cost: float, predicted_cost: float, rho_tr: float, config: ScvxConfig):
    """Accept/reject a step and schedule the trust-region radius."""
    r = trust_ratio(prev_cost, new_cost, predicted_cost)
    if r is None:
        raise StallError("predicted decrease below stall tolerance")
    if np.isnan(r):
        raise ValueError("merit ratio is undefined for non-finite costs")
    if r < config.rho0:
        accept, rho = False, rho_tr / config.shrink_factor
    elif r < config.rho1:
        accept, rho = True, rho_tr / config.shrink_factor
    elif r < config.rho2:
        accept, rho = True, rho_tr
    else:
        accept, rho = True, rho_tr * config.grow_factor
    return accept, float(np.clip(rho, config.rho_tr_min, config.rho_tr_max))


def make_problem(scenario, config: ScvxConfig, weights=None, cons=None, trigger="scenario", guess=None) -> Problem:
    weights = scenario.cost_weights() if weights is None else weights
    cons = scenario.constraint_spec() if cons is None else cons
    trigger = scenario.trigger_spec() if trigger == "scenario" else trigger
    if trigger is not None:
        trigger.validate(scenario.K)
    guess = initial_guess(scenario) if guess is None else guess
    return Problem(
        params=scenario.params,
        variant=ModelVariant(scenario.variant),
        weights=weights,
        cons=cons,
        scaling=default_scaling(cons, guess),
        v_final=scenario.v_final,
        trigger=trigger,
        substeps=config.substeps,
    )


def run(scenario, config: ScvxConfig = ScvxConfig(), weights=None, cons=None, trigger="scenario") -> ConvergedPlan:
    """Iterate linearize / discretize / solve / ratio-test until convergence."""
    started = time.perf_counter()
    ref = initial_guess(scenario)
    problem = make_problem(scenario, config, weights, cons, trigger, guess=ref)
    scaling = problem.scaling
    rho_tr = config.rho_tr_init
    history = []
    converged, reason = False, "iteration-limit"
    trigger_ever = False
    last = None

    for it in range(config.max_iterations):
        rows = trigger_rows(ref, problem.trigger)
        active = rows is not None
        trigger_ever |= active
        prev_cost = nonlinear_cost(ref, problem, rows)

        ltv = foh_discretize(ref, problem.params, problem.variant, problem.substeps, close_shooting=True)
        program = assemble(ltv, ref, problem.weights, problem.cons, rows or [], rho_tr, scaling,
                           problem.params, problem.variant, problem.v_final)
        result = solve(program, config.solver)
        if result.status is SolveStatus.PRIMAL_INFEASIBLE:
            raise InternalError(f"subproblem infeasible at iteration {it} (trust radius {rho_tr:.3g})")
        if not result.status.has_solution:
            log.warning("iteration %d: solver status %s, shrinking trust region", it, result.status.value)
            history.append(IterationRecord(it, ref.copy(), prev_cost, float("nan"), float("nan"), float("nan"),
                                           rho_tr, float("nan"), float("nan"), False, result.status.value, active))
            rho_tr = max(rho_tr / config.shrink_factor, config.rho_tr_min)
            continue

        cand, nu_norm, predicted = extract(result, program, scaling)
        step = float(max(np.max(np.abs(scaling.scale_x(cand.x) - scaling.scale_x(ref.x))),
                         np.max(np.abs(scaling.scale_u(cand.u) - scaling.scale_u(ref.u)))))
        try:
            new_cost = nonlinear_cost(cand, problem, rows)
        except SingularityError:
            new_cost = float("inf")
        last = (program, result)

        if step <= config.eps_dx and nu_norm <= config.eps_nu:
            accepted = new_cost < prev_cost
            history.append(IterationRecord(it, cand.copy(), prev_cost, new_cost, predicted, float("nan"), rho_tr,
                                           nu_norm, step, accepted, result.status.value, active))
            if accepted:
                ref = cand
            converged, reason = True, "converged"
            break

        if not np.isfinite(new_cost) or not np.isfinite(prev_cost):
            # singular trajectories have no usable merit ratio: drop singular
            # candidates, and take any regular one while the reference is singular
            accept = bool(np.isfinite(new_cost))
            new_rho = rho_tr if accept else max(rho_tr / config.shrink_factor, config.rho_tr_min)
            history.append(IterationRecord(it, (cand if accept else ref).copy(), prev_cost, new_cost, predicted,
                                           float("nan"), rho_tr, nu_norm, step, accept, result.status.value, active))
            log.info("iter %2d  J=%.6g  J_new=%.6g  rho=%.3g  nu=%.2e  step=%.2e  %s (singular merit)", it, prev_cost,
                     new_cost, rho_tr, nu_norm, step, "accept" if accept else "reject")
            if accept:
                ref = cand
            rho_tr = new_rho
            continue

        r = trust_ratio(prev_cost, new_cost, predicted)
        if r is None:
            history.append(IterationRecord(it, ref.copy(), prev_cost, new_cost, predicted, float("nan"), rho_tr,
                                           nu_norm, step, False, result.status.value, active))
            converged, reason = nu_norm <= config.eps_nu, "stall"
            break
        accept, new_rho = ratio_step(prev_cost, new_cost, predicted, rho_tr, config)
        # strict decrease keeps the accepted sequence monotone
        accept = accept and new_cost < prev_cost
        history.append(IterationRecord(it, (cand if accept else ref).copy(), prev_cost, new_cost, predicted, r,
                                       rho_tr, nu_norm, step, accept, result.status.value, active))
        log.info("iter %2d  J=%.6g  L=%.6g  r=%.3f  rho=%.3g  nu=%.2e  step=%.2e  %s%s", it, prev_cost, predicted,
                 r, rho_tr, nu_norm, step, "accept" if accept else "reject", "  [trigger]" if active else "")
        if accept:
            ref = cand
        rho_tr = new_rho

    plan = finalize(ref, problem, history, converged, reason, trigger_ever, last)
    plan.diagnostics["runtime_s"] = time.perf_counter() - started
    return plan


def finalize(traj, problem: Problem, history, converged, reason, trigger_ever, last) -> ConvergedPlan:
    x, u = traj.x, traj.u
    a_y, _, _ = lateral_acceleration(x[:, V], x[:, DELTA], problem.params, problem.variant)
    try:
        sdot = s_rate(x, traj.kappa, problem.params, problem.variant)
    except SingularityError:
        sdot = np.full(traj.K, np.nan)
    rows = trigger_rows(traj, problem.trigger)
    gap = defects(traj, problem)
    cons = problem.cons
    diagnostics = {
        "max_defect_scaled": float(np.max(np.abs(gap))),
        "defect_l1_scaled": float(np.sum(np.abs(gap))),
        "max_friction_excess_mps2": float(np.max(np.hypot(u[:, U0], a_y)) - cons.friction_radius),
        "max_delta_excess_rad": float(np.max(np.abs(x[:, DELTA])) - cons.delta_max),
        "max_delta_rate_excess_radps": float(np.max(np.abs(u[:, U1])) - cons.delta_rate_max),
        "max_corridor_excess_m": float(max(np.max(cons.corridor[:, 0] - x[:, EY]),
                                           np.max(x[:, EY] - cons.corridor[:, 1]))),
        "terminal_speed_mps": float(x[-1, V]),
        "trigger_gate_final": None if problem.trigger is None else problem.trigger.gate(x),
        "trigger_rows_final": rows is not None,
        "max_abs_e_psi_rad": float(np.max(np.abs(x[:, EPSI]))),
        "hard_violation_sum": hard_violation(x, u, cons, problem.params, problem.variant, rows),
    }
    if last is not None:
        program, result = last
        diagnostics["final_subproblem_residuals"] = program.residuals(result.x)
    final_active = bool(history and history[-1].trigger_active)
    return ConvergedPlan(
        trajectory=traj,
        times=x[:, T].copy(),
        a_x=u[:, U0].copy(),
        a_y=np.asarray(a_y),
        s_dot=np.asarray(sdot),
        history=history,
        converged=converged,
        reason=reason,
        trigger_active=bool(trigger_ever),
        diagnostics=dict(diagnostics, trigger_active_final=final_active),
    )


def recover_time(plan: ConvergedPlan, params: VehicleParams = None, variant=ModelVariant.ROBOT_CAR):
    """Node time stamps from the time channel and the matching control schedule u(t_k)."""
    traj = plan.trajectory
    if params is not None:
        s_rate(traj.x, traj.kappa, params, variant)
    elif np.any(~(plan.s_dot >= 0.1)):
        raise SingularityError("plan violates the s_dot guard; time recovery is undefined")
    t = traj.x[:, T].copy()
    if np.any(np.diff(t) <= 0):
        raise SingularityError("time stamps are not strictly increasing")
    return t, traj.u.copy()


def sample_controls(t_nodes, u_nodes, t):
    """Time-domain control value at t by linear interpolation between node stamps."""
    return np.stack([np.interp(t, t_nodes, u_nodes[:, j]) for j in range(u_nodes.shape[1])], axis=-1)
