"""Convex subproblem assembly for one successive-convexification iteration.

Decision variables are the scaled node states and controls, the scaled
virtual control on every interval, and auxiliary variables for the l1 terms
and the norm epigraphs.  Sign convention for the lateral error: e_y > 0 is
left of the path centerline.
"""

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, ProgramBuilder
from .transcription import DiscreteLTV, ReferenceTrajectory, ScalingMap
from .vehicle import (
    DELTA,
    EPSI,
    EY,
    N_U,
    N_X,
    STATE_NAMES,
    CONTROL_NAMES,
    U0,
    U1,
    V,
    ModelVariant,
    VehicleParams,
    lateral_acceleration,
)

GRAVITY = 9.81


@dataclass(frozen=True)
class CostWeights:
    w_ey: float = 1.0
    w_epsi: float = 1.0
    w_jerk: float = 1.0
    w_u0: float = 1.0
    w_u1: float = 1.0
    w_terminal: float = 1.0
    w_nu: float = 1e5

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"cost weight {name} must be nonnegative, got {value}")


def _channel(name, names):
    if isinstance(name, (int, np.integer)):
        return int(name)
    try:
        return names.index(name)
    except ValueError:
        raise ValueError(f"unknown channel {name!r}; expected one of {names}") from None


@dataclass
class ConstraintSpec:
    """Hard constraints of the subproblem, in physical units.

    ``corridor`` is a (K, 2) array of per-node (e_y lower, e_y upper) bounds.
    Boundary pins are dicts from channel name to value.
    """

    corridor: np.ndarray
    x_initial: np.ndarray
    v_max: float = 30.0
    v_min: float = 0.3
    delta_max: float = np.deg2rad(27.0)
    delta_rate_max: float = np.deg2rad(60.0)
    u0_min: float = -8.0
    u0_max: float = 4.0
    mu: float = 0.6
    gravity: float = GRAVITY
    final_state_pins: dict = field(default_factory=lambda: {"delta_f": 0.0})
    initial_control_pins: dict = field(default_factory=dict)
    final_control_pins: dict = field(default_factory=lambda: {"u0": 0.0, "u1": 0.0})

    def __post_init__(self):
        self.corridor = np.array(self.corridor, dtype=float)
        self.x_initial = np.array(self.x_initial, dtype=float)
        if self.corridor.ndim != 2 or self.corridor.shape[1] != 2:
            raise ValueError("corridor must be a (K, 2) array of (lower, upper) e_y bounds")
        if np.any(self.corridor[:, 0] >= self.corridor[:, 1]):
            bad = np.flatnonzero(self.corridor[:, 0] >= self.corridor[:, 1]).tolist()
            raise ValueError(f"empty corridor (lower >= upper) at nodes {bad}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"friction coefficient must lie in [0, 1], got {self.mu}")
        if not self.v_max > self.v_min:
            raise ValueError("v_max must exceed v_min")
        if not self.u0_max > self.u0_min:
            raise ValueError("u0_max must exceed u0_min")
        if self.x_initial.shape != (N_X,):
            raise ValueError(f"x_initial must have {N_X} entries")

    @property
    def K(self) -> int:
        return self.corridor.shape[0]

    @property
    def friction_radius(self) -> float:
        return self.mu * self.gravity

    def state_pins(self):
        """(node, channel, value) triples for every pinned state entry."""
        K = self.K
        pins = [(0, i, float(v)) for i, v in enumerate(self.x_initial)]
        pins += [(K - 1, _channel(c, STATE_NAMES), float(v)) for c, v in self.final_state_pins.items()]
        return pins

    def control_pins(self):
        K = self.K
        pins = [(0, _channel(c, CONTROL_NAMES), float(v)) for c, v in self.initial_control_pins.items()]
        pins += [(K - 1, _channel(c, CONTROL_NAMES), float(v)) for c, v in self.final_control_pins.items()]
        return pins


@dataclass(frozen=True)
class TriggerSpec:
    """State-triggered constraint: enforce ``c(z) <= 0`` at ``node_set`` while ``g(z) < 0``.

    ``gate_terms`` holds (node, channel, coefficient) entries of the affine gate
    g(z) = gate_const + sum coeff * x[node, channel]; ``constraint_rows`` holds
    (channel, coefficient, constant) entries giving coeff * x[node, channel] +
    constant <= 0 at every node in ``node_set``.  Negative nodes count from the end.
    """

    gate_terms: tuple
    gate_const: float
    constraint_rows: tuple
    node_set: tuple

    def gate(self, x) -> float:
        x = np.asarray(x)
        K = x.shape[0]
        g = self.gate_const
        for node, ch, coeff in self.gate_terms:
            g += coeff * x[_node(node, K), _channel(ch, STATE_NAMES)]
        return float(g)

    def rows(self, K):
        """Resolved (node, channel, coeff, const) rows."""
        out = []
        for node in self.node_set:
            for ch, coeff, const in self.constraint_rows:
                out.append((_node(node, K), _channel(ch, STATE_NAMES), float(coeff), float(const)))
        return out

    def validate(self, K) -> None:
        for node, ch, _ in self.gate_terms:
            _node(node, K)
            _channel(ch, STATE_NAMES)
        self.rows(K)

    @classmethod
    def terminal_speed_evasion(cls, speed_threshold=1.0, lateral_clearance=1.0, last_nodes=2) -> "TriggerSpec":
        """Move left by ``lateral_clearance`` at the last nodes if terminal speed exceeds the threshold."""
        return cls(
            gate_terms=((-1, "v", -1.0),),
            gate_const=float(speed_threshold),
            constraint_rows=(("e_y", -1.0, float(lateral_clearance)),),
            node_set=tuple(range(-last_nodes, 0)),
        )


def _node(node, K):
    node = int(node)
    k = node + K if node < 0 else node
    if not 0 <= k < K:
        raise ValueError(f"node index {node} outside [0, {K - 1}]")
    return k


def sigma_star(g):
    """Closed-form trigger slack sigma* = -min(g, 0)."""
    return np.maximum(-np.asarray(g, dtype=float), 0.0) + 0.0


def trigger_rows(ref: ReferenceTrajectory, trigger):
    """Rows to enforce this iteration, or None when the gate is inactive on the reference."""
    if trigger is None:
        return None
    if float(sigma_star(trigger.gate(ref.x))) > 0.0:
        return trigger.rows(ref.K)
    return None


@dataclass
class FrictionRows:
    """Per-node data of ||(u0, a_y_lin)||_2 <= radius with a_y linearized in (v, delta_f)."""

    radius: float
    a_y_ref: np.ndarray
    da_dv: np.ndarray
    da_ddelta: np.ndarray
    v_ref: np.ndarray
    delta_ref: np.ndarray

    def a_y(self, v, delta):
        return self.a_y_ref + self.da_dv * (np.asarray(v) - self.v_ref) + self.da_ddelta * (np.asarray(delta) - self.delta_ref)


def friction_rows(ref: ReferenceTrajectory, cons: ConstraintSpec, params: VehicleParams,
                  variant=ModelVariant.ROBOT_CAR) -> FrictionRows:
    v, delta = ref.x[:, V], ref.x[:, DELTA]
    a_y, da_dv, da_dd = lateral_acceleration(v, delta, params, variant)
    return FrictionRows(cons.friction_radius, a_y, da_dv, da_dd, v.copy(), delta.copy())


def soft_cost(x, u, weights: CostWeights, v_final: float) -> float:
    """Norm-based cost terms (everything except the virtual-control penalty)."""
    x = np.asarray(x)
    u = np.asarray(u)
    return float(
        weights.w_ey * np.linalg.norm(x[:, EY])
        + weights.w_epsi * np.linalg.norm(x[:, EPSI])
        + weights.w_jerk * np.linalg.norm(np.diff(u[:, U0]))
        + weights.w_u0 * np.linalg.norm(u[:, U0])
        + weights.w_u1 * np.linalg.norm(u[:, U1])
        + weights.w_terminal * abs(x[-1, V] - v_final)
    )


def hard_violation(x, u, cons: ConstraintSpec, params: VehicleParams, variant=ModelVariant.ROBOT_CAR,
                   rows=None) -> float:
    """Summed violation of the hard constraints, evaluated on the nonlinear model."""
    x = np.asarray(x)
    u = np.asarray(u)
    pos = lambda a: np.sum(np.maximum(a, 0.0))  # noqa: E731
    total = 0.0
    total += pos(x[:, V] - cons.v_max) + pos(cons.v_min - x[:, V])
    total += pos(np.abs(x[:, DELTA]) - cons.delta_max)
    total += pos(np.abs(u[:, U1]) - cons.delta_rate_max)
    total += pos(u[:, U0] - cons.u0_max) + pos(cons.u0_min - u[:, U0])
    total += pos(cons.corridor[:, 0] - x[:, EY]) + pos(x[:, EY] - cons.corridor[:, 1])
    a_y, _, _ = lateral_acceleration(x[:, V], x[:, DELTA], params, variant)
    total += pos(np.hypot(u[:, U0], a_y) - cons.friction_radius)
    for k, i, val in cons.state_pins():
        total += abs(x[k, i] - val)
    for k, i, val in cons.control_pins():
        total += abs(u[k, i] - val)
    for k, i, coeff, const in rows or ():
        total += max(coeff * x[k, i] + const, 0.0)
    return float(total)


def assemble(ltv: DiscreteLTV, ref: ReferenceTrajectory, weights: CostWeights, cons: ConstraintSpec,
             trigger, rho_tr: float, scaling: ScalingMap, params: VehicleParams = VehicleParams(),
             variant=ModelVariant.ROBOT_CAR, v_final: float = 0.5) -> ConicProgram:
    """Build the SOCP for one iteration about ``ref``.

    ``trigger`` may be a :class:`TriggerSpec` (gated on ``ref``) or an already
    resolved list of rows.
    """
    K = ref.K
    if ltv.n_intervals != K - 1:
        raise ValueError(f"discretization has {ltv.n_intervals} intervals, reference has {K} nodes")
    if cons.K != K:
        raise ValueError(f"constraint corridor has {cons.K} nodes, reference has {K}")
    if not rho_tr > 0:
        raise ValueError("trust-region radius must be positive")

    Dx, Cx, Du, Cu = scaling.D_x, scaling.C_x, scaling.D_u, scaling.C_u
    xbar_h = scaling.scale_x(ref.x)
    ubar_h = scaling.scale_u(ref.u)

    b = ProgramBuilder()
    X = b.variable("x", (K, N_X))
    U = b.variable("u", (K, N_U))
    NU = b.variable("nu", (K - 1, N_X))
    NU_ABS = b.variable("nu_abs", (K - 1, N_X))
    TX = b.variable("tr_x", (K, N_X))
    TU = b.variable("tr_u", (K, N_U))

    # (a) dynamics with virtual control, each row divided by the state scale
    inv_D = 1.0 / Dx
    eye = np.eye(N_X)
    for k in range(K - 1):
        A, Bm, Bp = ltv.A[k], ltv.B_minus[k], ltv.B_plus[k]
        rhs = inv_D * (A @ Cx + Bm @ Cu + Bp @ Cu + ltv.F[k] + ltv.w[k] - Cx)
        b.eq(
            [
                (X[k + 1], eye),
                (X[k], -inv_D[:, None] * A * Dx[None, :]),
                (U[k], -inv_D[:, None] * Bm * Du[None, :]),
                (U[k + 1], -inv_D[:, None] * Bp * Du[None, :]),
                (NU[k], -eye),
            ],
            rhs,
            tag="dynamics",
        )

    # (b) l1 virtual-control penalty
    flat_nu, flat_abs = NU.ravel(), NU_ABS.ravel()
    m = flat_nu.size
    I_m = np.eye(m)
    b.le([(flat_nu, I_m), (flat_abs, -I_m)], np.zeros(m), tag="nu_split")
    b.le([(flat_nu, -I_m), (flat_abs, -I_m)], np.zeros(m), tag="nu_split")
    b.cost(flat_abs, weights.w_nu)

    # (c) norm costs, each through one epigraph cone
    def norm_cost(name, weight, terms, const):
        if weight <= 0:
            return
        tau = b.variable(name, (1,))
        b.soc_le([(tau, [1.0])], 0.0, terms, const, tag=name)
        b.cost(tau, weight)

    ones_K = np.ones(K)
    norm_cost("tau_ey", weights.w_ey, [(X[:, EY], np.diag(Dx[EY] * ones_K))], Cx[EY] * ones_K)
    norm_cost("tau_epsi", weights.w_epsi, [(X[:, EPSI], np.diag(Dx[EPSI] * ones_K))], Cx[EPSI] * ones_K)
    diff = np.diff(np.eye(K), axis=0) * Du[U0]
    norm_cost("tau_jerk", weights.w_jerk, [(U[:, U0], diff)], np.zeros(K - 1))
    norm_cost("tau_u0", weights.w_u0, [(U[:, U0], np.diag(Du[U0] * ones_K))], Cu[U0] * ones_K)
    norm_cost("tau_u1", weights.w_u1, [(U[:, U1], np.diag(Du[U1] * ones_K))], Cu[U1] * ones_K)
    norm_cost("tau_terminal", weights.w_terminal, [(X[K - 1, V], [[Dx[V]]])], [Cx[V] - v_final])

    # (d) box bounds, written directly in scaled coordinates
    def box(idx, scale, offset, lo, hi, tag):
        idx = np.atleast_1d(idx).ravel()
        n = idx.size
        I_n = np.eye(n)
        b.le([(idx, I_n)], (np.broadcast_to(hi, n) - offset) / scale, tag=tag)
        b.le([(idx, -I_n)], -(np.broadcast_to(lo, n) - offset) / scale, tag=tag)

    box(X[:, V], Dx[V], Cx[V], cons.v_min, cons.v_max, "box_v")
    box(X[:, DELTA], Dx[DELTA], Cx[DELTA], -cons.delta_max, cons.delta_max, "box_delta")
    box(U[:, U0], Du[U0], Cu[U0], cons.u0_min, cons.u0_max, "box_u0")
    box(U[:, U1], Du[U1], Cu[U1], -cons.delta_rate_max, cons.delta_rate_max, "box_u1")

    # (e) friction circle per node
    fr = friction_rows(ref, cons, params, variant)
    for k in range(K):
        const_a = fr.a_y_ref[k] + fr.da_dv[k] * (Cx[V] - fr.v_ref[k]) + fr.da_ddelta[k] * (Cx[DELTA] - fr.delta_ref[k])
        b.soc_le(
            [],
            fr.radius,
            [
                (U[k, U0], [[Du[U0]], [0.0]]),
                (X[k, [V, DELTA]], [[0.0, 0.0], [fr.da_dv[k] * Dx[V], fr.da_ddelta[k] * Dx[DELTA]]]),
            ],
            [Cu[U0], const_a],
            tag="friction",
        )

    # (f) corridor on e_y
    box(X[:, EY], Dx[EY], Cx[EY], cons.corridor[:, 0], cons.corridor[:, 1], "corridor")

    # (g) boundary pins
    for k, i, val in cons.state_pins():
        b.eq([(X[k, i], [[1.0]])], [(val - Cx[i]) / Dx[i]], tag="pins")
    for k, i, val in cons.control_pins():
        b.eq([(U[k, i], [[1.0]])], [(val - Cu[i]) / Du[i]], tag="pins")

    # (h) l1 trust region per node
    I_x, I_u = np.eye(N_X), np.eye(N_U)
    for k in range(K):
        b.le([(X[k], I_x), (TX[k], -I_x)], xbar_h[k], tag="trust_split")
        b.le([(X[k], -I_x), (TX[k], -I_x)], -xbar_h[k], tag="trust_split")
        b.le([(U[k], I_u), (TU[k], -I_u)], ubar_h[k], tag="trust_split")
        b.le([(U[k], -I_u), (TU[k], -I_u)], -ubar_h[k], tag="trust_split")
        b.le([(TX[k], np.ones((1, N_X))), (TU[k], np.ones((1, N_U)))], [rho_tr], tag="trust_region")

    # (i) state-triggered rows, gated on the reference
    rows = trigger_rows(ref, trigger) if isinstance(trigger, TriggerSpec) else trigger
    for k, i, coeff, const in rows or ():
        b.le([(X[k, i], [[coeff * Dx[i]]])], [-(const + coeff * Cx[i])], tag="trigger")

    program = b.build()
    program.meta = {
        "kappa": ref.kappa.copy(),
        "s_span": ref.s_span,
        "x_ref_scaled": xbar_h,
        "u_ref_scaled": ubar_h,
        "rho_tr": float(rho_tr),
        "trigger_rows": list(rows or ()),
        "friction": fr,
    }
    return program


def extract(solution, program: ConicProgram, scaling: ScalingMap):
    """Unscale a solver result into (trajectory, ||nu||_1, subproblem objective)."""
    if not solution.status.has_solution:
        raise RuntimeError(f"cannot extract from solver status {solution.status.value}")
    z = solution.x
    x = scaling.unscale_x(z[program.variables["x"]])
    u = scaling.unscale_u(z[program.variables["u"]])
    traj = ReferenceTrajectory(x, u, program.meta["kappa"], program.meta["s_span"])
    nu_norm = float(np.sum(np.abs(z[program.variables["nu"]])))
    return traj, nu_norm, float(solution.objective)
