"""Linearization, first-order-hold discretization and variable scaling.

The reference trajectory lives on a uniform grid of ``K`` nodes over the
physical arc-length span.  Each interval is integrated independently from its
own reference node (multiple shooting); inside an interval the controls and
the curvature are interpolated linearly between the two end nodes.
"""

from dataclasses import dataclass, field

import numpy as np

from .vehicle import (
    DELTA,
    N_U,
    N_X,
    S_RATE_MIN,
    T,
    U0,
    U1,
    V,
    ModelVariant,
    VehicleParams,
    arc_dynamics,
    arc_dynamics_and_jacobians,
    valid_states,
)

OVERFLOW_GUARD = 1e12
DEFAULT_SUBSTEPS = 8


class DiscretizationError(RuntimeError):
    pass


@dataclass
class ReferenceTrajectory:
    """Node states ``x`` (K, 6), controls ``u`` (K, 2) and curvature ``kappa`` (K,)."""

    x: np.ndarray
    u: np.ndarray
    kappa: np.ndarray
    s_span: tuple

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        self.u = np.array(self.u, dtype=float)
        self.kappa = np.array(self.kappa, dtype=float)
        self.s_span = (float(self.s_span[0]), float(self.s_span[1]))
        K = self.x.shape[0]
        if K < 2:
            raise ValueError("a reference trajectory needs at least two nodes")
        if self.x.shape != (K, N_X) or self.u.shape != (K, N_U) or self.kappa.shape != (K,):
            raise ValueError(
                f"inconsistent trajectory shapes x{self.x.shape} u{self.u.shape} kappa{self.kappa.shape}"
            )
        if not self.s_span[1] > self.s_span[0]:
            raise ValueError("arc-length span must be increasing")

    @property
    def K(self) -> int:
        return self.x.shape[0]

    @property
    def s_nodes(self) -> np.ndarray:
        """Normalized node positions k/(K-1)."""
        return np.linspace(0.0, 1.0, self.K)

    @property
    def s_physical(self) -> np.ndarray:
        return self.s_span[0] + self.s_nodes * self.length

    @property
    def length(self) -> float:
        return self.s_span[1] - self.s_span[0]

    @property
    def ds(self) -> float:
        return self.length / (self.K - 1)

    def copy(self) -> "ReferenceTrajectory":
        return ReferenceTrajectory(self.x.copy(), self.u.copy(), self.kappa.copy(), self.s_span)


@dataclass
class DiscreteLTV:
    """Per-interval matrices of x[k+1] = A x[k] + Bm u[k] + Bp u[k+1] + F + w."""

    A: np.ndarray
    B_minus: np.ndarray
    B_plus: np.ndarray
    F: np.ndarray
    w: np.ndarray
    # nonlinear end state of each shooting interval (NaN where shooting failed)
    x_end: np.ndarray = field(default=None, repr=False)
    shooting_ok: np.ndarray = field(default=None, repr=False)

    @property
    def n_intervals(self) -> int:
        return self.A.shape[0]

    @property
    def affine(self) -> np.ndarray:
        return self.F + self.w


def foh_weights(s, s_k, s_k1):
    """Interpolation weights (lambda_minus, lambda_plus) on [s_k, s_k1]."""
    s = np.asarray(s, dtype=float)
    lam_p = (s - s_k) / (s_k1 - s_k)
    return 1.0 - lam_p, lam_p


def vehicle_system(params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """Adapters for the arc-length model: ``fun(x, u, kappa) -> (f, A, B)`` and a validity mask."""

    def fun(x, u, kappa):
        return arc_dynamics_and_jacobians(x, u, kappa, params, variant, check=False)

    def valid(x, u, kappa):
        return valid_states(x, kappa, params, variant)

    return fun, valid


def _check_nodes(ref: ReferenceTrajectory, params, variant):
    # raises SingularityError if any node violates the s_dot guard
    arc_dynamics(ref.x, ref.u, ref.kappa, params, variant)


def _rk4_sweep(rhs, state, h, substeps):
    dh = h / substeps
    for i in range(substeps):
        sig = i * dh
        k1 = rhs(sig, state)
        k2 = rhs(sig + dh / 2, [y + dh / 2 * d for y, d in zip(state, k1)])
        k3 = rhs(sig + dh / 2, [y + dh / 2 * d for y, d in zip(state, k2)])
        k4 = rhs(sig + dh, [y + dh * d for y, d in zip(state, k3)])
        state = [y + dh / 6 * (a + 2 * b + 2 * c + d) for y, a, b, c, d in zip(state, k1, k2, k3, k4)]
    return state


def _foh_pass(fun, valid, x_lo, x_hi, u_lo, u_hi, p_lo, p_hi, h, substeps):
    """One RK4 sweep over a batch of intervals.

    With ``x_hi`` given the reference inside each interval is the straight
    line between its nodes; otherwise it is integrated from ``x_lo``.
    """
    M, n_x = x_lo.shape
    n_u = u_lo.shape[1]
    ok = np.ones(M, dtype=bool)
    eye = np.broadcast_to(np.eye(n_x), (M, n_x, n_x))
    state = [
        x_lo.copy(),
        eye.copy(),  # Phi
        eye.copy(),  # Phi^{-1}
        np.zeros((M, n_x, n_u)),
        np.zeros((M, n_x, n_u)),
        np.zeros((M, n_x)),
        np.zeros((M, n_x)),
    ]

    def rhs(sig, y):
        lm, lp = 1.0 - sig / h, sig / h
        xb = y[0] if x_hi is None else lm * x_lo + lp * x_hi
        Phi, Psi = y[1], y[2]
        u = lm * u_lo + lp * u_hi
        p = lm * p_lo + lp * p_hi
        f, A, B = fun(xb, u, p)
        if valid is not None:
            ok[:] &= valid(xb, u, p)
        ok[:] &= np.all(np.isfinite(f), axis=-1)
        PsiB = Psi @ B
        w = -np.einsum("mij,mj->mi", A, xb) - np.einsum("mij,mj->mi", B, u)
        return [
            f if x_hi is None else np.zeros_like(f),
            A @ Phi,
            -Psi @ A,
            PsiB * lm,
            PsiB * lp,
            np.einsum("mij,mj->mi", Psi, f),
            np.einsum("mij,mj->mi", Psi, w),
        ]

    with np.errstate(all="ignore"):
        state = _rk4_sweep(rhs, state, h, substeps)
    return state, ok


def foh_discretize_system(fun, x_nodes, u_nodes, p_nodes, h: float, substeps: int = DEFAULT_SUBSTEPS,
                          valid=None, close_shooting: bool = False) -> DiscreteLTV:
    """FOH discretization of a generic system ``fun(x, u, p) -> (f, A, B)``.

    All intervals are integrated at once with classical RK4.  The inverse
    fundamental matrix is carried as its own ODE, Psi' = -Psi A, so no
    explicit inversion is needed.  Intervals whose nonlinear reference leaves
    the valid region are redone about the straight line between their nodes.

    ``close_shooting`` replaces the integrated w_k on shooting intervals by the
    value that makes the recurrence hit the RK4 end state exactly.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x_nodes = np.asarray(x_nodes, dtype=float)
    u_nodes = np.asarray(u_nodes, dtype=float)
    p_nodes = np.asarray(p_nodes, dtype=float)
    args = (u_nodes[:-1], u_nodes[1:], p_nodes[:-1], p_nodes[1:])

    state, ok = _foh_pass(fun, valid, x_nodes[:-1], None, *args, h, substeps)
    if not np.all(ok):
        bad = ~ok
        sub = tuple(a[bad] for a in args)
        redo, _ = _foh_pass(fun, None, x_nodes[:-1][bad], x_nodes[1:][bad], *sub, h, substeps)
        for y, r in zip(state, redo):
            y[bad] = r
        state[0][bad] = np.nan

    x_end, Phi, _, Pm, Pp, Pf, Pw = state
    for y in state[1:]:
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > OVERFLOW_GUARD:
            raise DiscretizationError("fundamental-matrix integration blew up")
    A, Bm, Bp = Phi, Phi @ Pm, Phi @ Pp
    F = np.einsum("mij,mj->mi", Phi, Pf)
    w = np.einsum("mij,mj->mi", Phi, Pw)
    if close_shooting:
        # pin the affine term to the RK4 shooting end point so the reference
        # reproduces the nonlinear propagation exactly, not just to O(h^4)
        pred = (np.einsum("mij,mj->mi", A, x_nodes[:-1]) + np.einsum("mij,mj->mi", Bm, u_nodes[:-1])
                + np.einsum("mij,mj->mi", Bp, u_nodes[1:]) + F)
        w = np.where(ok[:, None], x_end - pred, w)
    return DiscreteLTV(A=A, B_minus=Bm, B_plus=Bp, F=F, w=w, x_end=x_end, shooting_ok=ok)


def foh_discretize(ref: ReferenceTrajectory, params: VehicleParams, variant=ModelVariant.ROBOT_CAR,
                   substeps: int = DEFAULT_SUBSTEPS, close_shooting: bool = False) -> DiscreteLTV:
    _check_nodes(ref, params, variant)
    fun, valid = vehicle_system(params, variant)
    return foh_discretize_system(fun, ref.x, ref.u, ref.kappa, ref.ds, substeps, valid, close_shooting)


def shoot_system(fun, x_nodes, u_nodes, p_nodes, h: float, substeps: int = DEFAULT_SUBSTEPS, valid=None):
    """Nonlinear RK4 propagation of every interval from its own start node.

    ``fun(x, u, p)`` returns the state derivative.  Intervals that leave the
    valid region come back as NaN rows.
    """
    x_nodes = np.asarray(x_nodes, dtype=float)
    u_lo, u_hi = u_nodes[:-1], u_nodes[1:]
    p_lo, p_hi = p_nodes[:-1], p_nodes[1:]
    ok = np.ones(x_nodes.shape[0] - 1, dtype=bool)

    def rhs(sig, y):
        lm, lp = 1.0 - sig / h, sig / h
        u, p = lm * u_lo + lp * u_hi, lm * p_lo + lp * p_hi
        f = fun(y[0], u, p)
        if valid is not None:
            ok[:] &= valid(y[0], u, p)
        ok[:] &= np.all(np.isfinite(f), axis=-1)
        return [f]

    with np.errstate(all="ignore"):
        (x,) = _rk4_sweep(rhs, [x_nodes[:-1].copy()], h, substeps)
    x[~ok] = np.nan
    return x


def shoot(ref: ReferenceTrajectory, params: VehicleParams, variant=ModelVariant.ROBOT_CAR,
          substeps: int = DEFAULT_SUBSTEPS, clamp: bool = False) -> np.ndarray:
    """End state of each interval when integrating the nonlinear model from its start node.

    Rows are NaN where the integration crosses the s_dot guard.  With ``clamp``
    the progress rate is instead floored at the guard value, which keeps every
    row finite; the result then only matches the model where the guard holds.
    """
    if clamp:
        def fun(x, u, p):
            f = arc_dynamics(x, u, p, params, variant, check=False)
            return _clamp_progress(f, u)

        return shoot_system(fun, ref.x, ref.u, ref.kappa, ref.ds, substeps)

    _check_nodes(ref, params, variant)

    def fun(x, u, p):
        return arc_dynamics(x, u, p, params, variant, check=False)

    def valid(x, u, p):
        return valid_states(x, p, params, variant)

    return shoot_system(fun, ref.x, ref.u, ref.kappa, ref.ds, substeps, valid)


def _clamp_progress(f, u):
    # f[T] = 1/s_dot; past the guard, continue as if s_dot sat at the guard
    bad = ~((f[..., T] > 0.0) & (f[..., T] <= 1.0 / S_RATE_MIN))
    if np.any(bad):
        f = f.copy()
        u = np.broadcast_to(u, f.shape[:-1] + (u.shape[-1],))
        f[bad, V] = u[bad, U0] / S_RATE_MIN
        f[bad, DELTA] = u[bad, U1] / S_RATE_MIN
        f[bad, T] = 1.0 / S_RATE_MIN
    return f


def propagate(ltv: DiscreteLTV, x0, controls) -> np.ndarray:
    """Roll the discrete recurrence forward from x0 with K node controls."""
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    M = ltv.n_intervals
    n_x, n_u = ltv.B_minus.shape[1:]
    if x0.shape != (n_x,) or controls.shape != (M + 1, n_u):
        raise ValueError(f"dimension mismatch: x0{x0.shape}, controls{controls.shape}, expected ({n_x},), ({M + 1}, {n_u})")
    xs = np.empty((M + 1, n_x))
    xs[0] = x0
    for k in range(M):
        xs[k + 1] = (ltv.A[k] @ xs[k] + ltv.B_minus[k] @ controls[k] + ltv.B_plus[k] @ controls[k + 1]
                     + ltv.F[k] + ltv.w[k])
    return xs


def rk4_ltv_system(fun, x_nodes, u_nodes, p_nodes, h: float, x0, controls, steps: int = 256,
                   straight=None) -> np.ndarray:
    """Independent check of a DiscreteLTV: fine RK4 of the continuous LTV.

    The reference is re-integrated inside each interval from its node (as in
    the discretization), or taken as the straight line between nodes where
    ``straight[k]`` is set.  The linear state is carried continuously across
    nodes.  No fundamental matrix is formed.
    """
    x_nodes = np.asarray(x_nodes, dtype=float)
    u_nodes = np.asarray(u_nodes, dtype=float)
    p_nodes = np.asarray(p_nodes, dtype=float)
    controls = np.asarray(controls, dtype=float)
    K = x_nodes.shape[0]
    straight = np.zeros(K - 1, dtype=bool) if straight is None else np.asarray(straight, dtype=bool)
    out = np.empty_like(x_nodes)
    out[0] = np.asarray(x0, dtype=float)
    x = out[0].copy()

    def rhs(sig, xb, xl, k):
        lm, lp = 1.0 - sig / h, sig / h
        if straight[k]:
            xb = lm * x_nodes[k] + lp * x_nodes[k + 1]
        ub = lm * u_nodes[k] + lp * u_nodes[k + 1]
        p = lm * p_nodes[k] + lp * p_nodes[k + 1]
        uc = lm * controls[k] + lp * controls[k + 1]
        f, A, B = fun(xb, ub, p)
        return f, A @ xl + B @ uc + f - A @ xb - B @ ub

    dh = h / steps
    for k in range(K - 1):
        xb = x_nodes[k].copy()
        for i in range(steps):
            sig = i * dh
            a1, b1 = rhs(sig, xb, x, k)
            a2, b2 = rhs(sig + dh / 2, xb + dh / 2 * a1, x + dh / 2 * b1, k)
            a3, b3 = rhs(sig + dh / 2, xb + dh / 2 * a2, x + dh / 2 * b2, k)
            a4, b4 = rhs(sig + dh, xb + dh * a3, x + dh * b3, k)
            xb = xb + dh / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            x = x + dh / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        out[k + 1] = x
    return out


def rk4_ltv_oracle(ref: ReferenceTrajectory, params: VehicleParams, variant=ModelVariant.ROBOT_CAR,
                   x0=None, controls=None, steps: int = 256) -> np.ndarray:
    """Fine-step RK4 solution of the continuous LTV about ``ref`` at every node."""
    fun, _ = vehicle_system(params, variant)
    straight = np.isnan(shoot(ref, params, variant, steps)).any(axis=1)
    x0 = ref.x[0] if x0 is None else x0
    controls = ref.u if controls is None else controls
    return rk4_ltv_system(fun, ref.x, ref.u, ref.kappa, ref.ds, x0, controls, steps, straight)


class LinearizedModel:
    """Continuous LTV data about a reference, evaluable at any normalized s in [0, 1].

    Inside interval k the reference state is the nonlinear solution started
    from node k under the interpolated controls; intervals where that solution
    crosses the s_dot guard use the straight line between the nodes instead,
    exactly as the discretization does.
    """

    def __init__(self, ref: ReferenceTrajectory, params: VehicleParams, variant=ModelVariant.ROBOT_CAR,
                 fine_steps: int = 64):
        _check_nodes(ref, params, variant)
        self.ref = ref
        self.fun, _ = vehicle_system(params, variant)
        self.fine_steps = fine_steps
        self.straight = np.isnan(shoot(ref, params, variant, fine_steps)).any(axis=1)

    def reference_at(self, s: float):
        """Reference (x, u, kappa) at normalized position s."""
        ref = self.ref
        k = int(np.clip(np.floor(s * (ref.K - 1)), 0, ref.K - 2))
        ds = ref.ds
        h = (s - ref.s_nodes[k]) * ref.length

        def inputs(sig):
            lm, lp = foh_weights(sig, 0.0, ds)
            return lm * ref.u[k] + lp * ref.u[k + 1], lm * ref.kappa[k] + lp * ref.kappa[k + 1]

        if self.straight[k]:
            lm, lp = foh_weights(h, 0.0, ds)
            return (lm * ref.x[k] + lp * ref.x[k + 1], *inputs(h))

        def rhs(sig, y):
            return [self.fun(y[0], *inputs(sig))[0]]

        x = ref.x[k].copy()
        if h > 0:
            (x,) = _rk4_sweep(rhs, [x], h, self.fine_steps)
        return (x, *inputs(h))

    def __call__(self, s: float):
        """Return (A, B, F, w) at normalized position s."""
        x, u, kappa = self.reference_at(s)
        f, A, B = self.fun(x, u, kappa)
        return A, B, f, -A @ x - B @ u


def linearize_at(ref: ReferenceTrajectory, params: VehicleParams, variant=ModelVariant.ROBOT_CAR) -> LinearizedModel:
    return LinearizedModel(ref, params, variant)


@dataclass(frozen=True)
class ScalingMap:
    """Affine maps x = D_x xhat + C_x and u = D_u uhat + C_u (D stored as vectors)."""

    D_x: np.ndarray
    C_x: np.ndarray
    D_u: np.ndarray
    C_u: np.ndarray

    def __post_init__(self):
        for name in ("D_x", "C_x", "D_u", "C_u"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.D_x <= 0) or np.any(self.D_u <= 0):
            raise ValueError("scaling factors must be strictly positive")

    @classmethod
    def identity(cls, n_x: int = N_X, n_u: int = N_U) -> "ScalingMap":
        return cls(np.ones(n_x), np.zeros(n_x), np.ones(n_u), np.zeros(n_u))

    def scale_x(self, x):
        return (np.asarray(x, dtype=float) - self.C_x) / self.D_x

    def unscale_x(self, xhat):
        return np.asarray(xhat, dtype=float) * self.D_x + self.C_x

    def scale_u(self, u):
        return (np.asarray(u, dtype=float) - self.C_u) / self.D_u

    def unscale_u(self, uhat):
        return np.asarray(uhat, dtype=float) * self.D_u + self.C_u


def _range_map(bounds):
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(hi <= lo):
        bad = np.flatnonzero(hi <= lo).tolist()
        raise ValueError(f"degenerate scaling range for channels {bad}: max must exceed min")
    return (hi - lo) / 2.0, (hi + lo) / 2.0


def build_scaling(state_bounds, control_bounds) -> ScalingMap:
    """Map each channel's (min, max) range onto [-1, 1]."""
    D_x, C_x = _range_map(state_bounds)
    D_u, C_u = _range_map(control_bounds)
    return ScalingMap(D_x, C_x, D_u, C_u)
