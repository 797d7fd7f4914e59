"""Kinematic single-track vehicle models in road-aligned, arc-length coordinates.

State vector layout (``N_X = 6``)::

    [e_y, e_psi, psi, v, delta_f, t]

Control vector layout (``N_U = 2``)::

    [u0 (acceleration), u1 (steering rate)]

All array functions broadcast over leading dimensions, so a whole trajectory
(or a batch of integration stages) can be evaluated in one call.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

N_X = 6
N_U = 2

EY, EPSI, PSI, V, DELTA, T = range(N_X)
U0, U1 = range(N_U)

STATE_NAMES = ("e_y", "e_psi", "psi", "v", "delta_f", "t")
CONTROL_NAMES = ("u0", "u1")

# dynamics are rejected below this forward speed along the path
S_RATE_MIN = 0.1
# |1 - kappa*e_y| below this is treated as the curvature-center singularity
CURVATURE_SINGULAR_TOL = 1e-6


class SingularityError(ValueError):
    """Raised when a state sits at (or near) the s_dot = 0 singularity."""


class ModelVariant(str, Enum):
    ROBOT_CAR = "RobotCar"
    SIDE_SLIP = "SideSlip"


@dataclass(frozen=True)
class VehicleParams:
    l_r: float = 1.4
    l_f: float = 1.4

    def __post_init__(self):
        if not (self.l_r > 0 and self.l_f > 0):
            raise ValueError(f"axle distances must be positive, got l_r={self.l_r}, l_f={self.l_f}")

    @property
    def wheelbase(self) -> float:
        return self.l_r + self.l_f


@dataclass(frozen=True)
class ArcState:
    e_y: float
    e_psi: float
    psi: float
    v: float
    delta_f: float
    t: float = 0.0

    def __array__(self, dtype=None, copy=None):
        return np.array([self.e_y, self.e_psi, self.psi, self.v, self.delta_f, self.t], dtype=dtype)

    @classmethod
    def from_array(cls, x) -> "ArcState":
        x = np.asarray(x, dtype=float)
        return cls(*(float(xi) for xi in x))


@dataclass(frozen=True)
class Control:
    u0: float
    u1: float

    def __array__(self, dtype=None, copy=None):
        return np.array([self.u0, self.u1], dtype=dtype)


@dataclass(frozen=True)
class CurvatureProfile:
    """Piecewise-linear curvature kappa(s) from ordered (s, kappa) samples."""

    s: np.ndarray = field(repr=False)
    kappa: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        kappa = np.asarray(self.kappa, dtype=float)
        if s.ndim != 1 or s.shape != kappa.shape or s.size < 2:
            raise ValueError("curvature profile needs at least two matching (s, kappa) samples")
        if np.any(np.diff(s) <= 0):
            raise ValueError("curvature sample positions must be strictly increasing")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "kappa", kappa)

    @classmethod
    def constant(cls, kappa: float, s_span: float) -> "CurvatureProfile":
        return cls(np.array([0.0, s_span]), np.array([kappa, kappa]))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        lo, hi = self.s[0], self.s[-1]
        tol = 1e-9 * max(1.0, abs(hi - lo))
        if np.any(s < lo - tol) or np.any(s > hi + tol):
            raise ValueError(f"arc length outside curvature profile range [{lo}, {hi}]")
        return np.interp(s, self.s, self.kappa)

    def heading(self, s):
        """Path heading obtained by integrating the piecewise-linear curvature exactly."""
        s = np.asarray(s, dtype=float)
        seg = np.concatenate([[0.0], np.cumsum(0.5 * (self.kappa[1:] + self.kappa[:-1]) * np.diff(self.s))])
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, self.s.size - 2)
        ds = s - self.s[i]
        slope = (self.kappa[i + 1] - self.kappa[i]) / (self.s[i + 1] - self.s[i])
        return seg[i] + self.kappa[i] * ds + 0.5 * slope * ds**2


def _variant(variant) -> ModelVariant:
    return ModelVariant(variant)


def side_slip(delta_f, params: VehicleParams):
    """Side-slip angle beta = arctan(l_r / (l_r + l_f) * tan(delta_f))."""
    delta_f = np.asarray(delta_f, dtype=float)
    if np.any(np.abs(delta_f) >= np.pi / 2):
        raise ValueError("steering angle must satisfy |delta_f| < pi/2")
    beta = np.arctan(params.l_r / params.wheelbase * np.tan(delta_f))
    return beta if beta.ndim else float(beta)


def _side_slip_and_derivative(delta_f, params, variant):
    if variant is ModelVariant.ROBOT_CAR:
        zeros = np.zeros_like(delta_f)
        return zeros, zeros
    c = params.l_r / params.wheelbase
    tan_d = np.tan(delta_f)
    beta = np.arctan(c * tan_d)
    dbeta = c * (1.0 + tan_d**2) / (1.0 + (c * tan_d) ** 2)
    return beta, dbeta


def _yaw_gain_and_derivative(delta_f, beta, dbeta, params, variant):
    # yaw rate = v / l_r * gain(delta_f)
    if variant is ModelVariant.ROBOT_CAR:
        tan_d = np.tan(delta_f)
        return tan_d, 1.0 + tan_d**2
    return np.sin(beta), np.cos(beta) * dbeta


def _check_state(x, kappa):
    q = 1.0 - kappa * x[..., EY]
    if np.any(np.abs(q) < CURVATURE_SINGULAR_TOL):
        raise SingularityError("state at curvature center: 1 - kappa*e_y ~ 0")
    return q


def s_rate(state, kappa, params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """Progress rate along the path, s_dot = v cos(e_psi + beta) / (1 - kappa e_y)."""
    variant = _variant(variant)
    x = np.asarray(state, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    q = _check_state(x, kappa)
    beta, _ = _side_slip_and_derivative(x[..., DELTA], params, variant)
    sdot = x[..., V] * np.cos(x[..., EPSI] + beta) / q
    if np.any(~(sdot >= S_RATE_MIN)):
        raise SingularityError(f"s_dot below {S_RATE_MIN} m/s (min {np.min(sdot):.4g})")
    return sdot if sdot.ndim else float(sdot)


def time_dynamics(state, control, params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """Time derivatives of the global-frame state (X_w, Y_w, psi, v, delta_f)."""
    variant = _variant(variant)
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    psi, v, delta = x[..., 2], x[..., 3], x[..., 4]
    beta, dbeta = _side_slip_and_derivative(delta, params, variant)
    gain, _ = _yaw_gain_and_derivative(delta, beta, dbeta, params, variant)
    return np.stack(
        [
            v * np.cos(psi + beta),
            v * np.sin(psi + beta),
            v / params.l_r * gain,
            u[..., U0] + 0.0 * v,
            u[..., U1] + 0.0 * v,
        ],
        axis=-1,
    )


def arc_dynamics(state, control, kappa, params: VehicleParams, variant=ModelVariant.ROBOT_CAR, check: bool = True):
    """Arc-length derivatives dx/ds of the six-channel state."""
    return _arc_eval(state, control, kappa, params, variant, jacobians=False, check=check)


def dynamics_jacobians(state, control, kappa, params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """Exact Jacobians (dF/dx, dF/du) of :func:`arc_dynamics`."""
    _, A, B = _arc_eval(state, control, kappa, params, variant, jacobians=True)
    return A, B


def arc_dynamics_and_jacobians(state, control, kappa, params: VehicleParams, variant=ModelVariant.ROBOT_CAR,
                               check: bool = True):
    """Dynamics and both Jacobians in one pass.

    With ``check=False`` the singularity guard is skipped and invalid entries
    come back non-finite or meaningless; use :func:`valid_states` to mask them.
    """
    return _arc_eval(state, control, kappa, params, variant, jacobians=True, check=check)


def valid_states(state, kappa, params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """Boolean mask of states that pass the s_dot guard."""
    variant = _variant(variant)
    x = np.asarray(state, dtype=float)
    q = 1.0 - np.asarray(kappa, dtype=float) * x[..., EY]
    beta, _ = _side_slip_and_derivative(x[..., DELTA], params, variant)
    with np.errstate(all="ignore"):
        sdot = x[..., V] * np.cos(x[..., EPSI] + beta) / q
        return (np.abs(q) >= CURVATURE_SINGULAR_TOL) & (sdot >= S_RATE_MIN) & np.isfinite(sdot)


def _arc_eval(state, control, kappa, params, variant, jacobians, check=True):
    variant = _variant(variant)
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    ey, epsi, v, delta = x[..., EY], x[..., EPSI], x[..., V], x[..., DELTA]
    a, r = u[..., U0], u[..., U1]

    q = _check_state(x, kappa) if check else 1.0 - kappa * ey
    beta, dbeta = _side_slip_and_derivative(delta, params, variant)
    gain, dgain = _yaw_gain_and_derivative(delta, beta, dbeta, params, variant)
    theta = epsi + beta
    cos_th, tan_th = np.cos(theta), np.tan(theta)
    sdot = v * cos_th / q
    if check and np.any(~(sdot >= S_RATE_MIN)):
        raise SingularityError(f"s_dot below {S_RATE_MIN} m/s (min {np.min(sdot):.4g})")
    inv = 1.0 / sdot

    psi_p = gain * q / (params.l_r * cos_th)
    f = np.stack(
        [
            q * tan_th,
            psi_p - kappa,
            psi_p,
            a * inv,
            r * inv,
            inv,
        ],
        axis=-1,
    )
    if not jacobians:
        return f

    shape = f.shape[:-1]
    A = np.zeros(shape + (N_X, N_X))
    B = np.zeros(shape + (N_X, N_U))
    sec2 = 1.0 + tan_th**2

    # d(1/s_dot)
    dinv_ey = -kappa / (v * cos_th)
    dinv_epsi = inv * tan_th
    dinv_v = -inv / v
    dinv_delta = inv * tan_th * dbeta

    A[..., EY, EY] = -kappa * tan_th
    A[..., EY, EPSI] = q * sec2
    A[..., EY, DELTA] = q * sec2 * dbeta

    dpsi_ey = -kappa * gain / (params.l_r * cos_th)
    dpsi_epsi = psi_p * tan_th
    dpsi_delta = dgain * q / (params.l_r * cos_th) + psi_p * tan_th * dbeta
    for row in (EPSI, PSI):
        A[..., row, EY] = dpsi_ey
        A[..., row, EPSI] = dpsi_epsi
        A[..., row, DELTA] = dpsi_delta

    for row, gain_u in ((V, a), (DELTA, r), (T, 1.0)):
        A[..., row, EY] = gain_u * dinv_ey
        A[..., row, EPSI] = gain_u * dinv_epsi
        A[..., row, V] = gain_u * dinv_v
        A[..., row, DELTA] = gain_u * dinv_delta

    B[..., V, U0] = inv
    B[..., DELTA, U1] = inv
    return f, A, B


def lateral_acceleration(v, delta_f, params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """a_y = v * yaw_rate from the kinematic model, with its partials in (v, delta_f)."""
    variant = _variant(variant)
    v = np.asarray(v, dtype=float)
    delta_f = np.asarray(delta_f, dtype=float)
    beta, dbeta = _side_slip_and_derivative(delta_f, params, variant)
    gain, dgain = _yaw_gain_and_derivative(delta_f, beta, dbeta, params, variant)
    a_y = v**2 / params.l_r * gain
    da_dv = 2.0 * v / params.l_r * gain
    da_ddelta = v**2 / params.l_r * dgain
    return a_y, da_dv, da_ddelta


def steady_state_steering(kappa, params: VehicleParams, variant=ModelVariant.ROBOT_CAR):
    """Steering that holds an aligned vehicle on a path of curvature kappa."""
    variant = _variant(variant)
    kappa = np.asarray(kappa, dtype=float)
    if variant is ModelVariant.ROBOT_CAR:
        # yaw rate is v/l_r*tan(delta) as printed, so the lever arm is l_r
        out = np.arctan(params.l_r * kappa)
    else:
        out = np.arctan(params.wheelbase * kappa)
    return out if out.ndim else float(out)
