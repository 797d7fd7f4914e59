"""Discretization accuracy checks against an independent fine-step integrator."""

from dataclasses import dataclass

import numpy as np

from .transcription import (
    DEFAULT_SUBSTEPS,
    ReferenceTrajectory,
    foh_discretize,
    propagate,
    rk4_ltv_oracle,
    shoot_system,
)
from .vehicle import DELTA, U0, U1, V, arc_dynamics, lateral_acceleration

# terminal speed of a random reference, as a fraction of the initial speed
SPEED_FRACTION = (0.3, 0.9)
TOLERANCE = 1e-6


def random_feasible_reference(scenario, rng, max_tries: int = 100, fine_steps: int = 64) -> ReferenceTrajectory:
    """Draw smooth random controls and integrate the nonlinear model from the scenario's initial state.

    The result satisfies the dynamics (to fine-step RK4 accuracy), the speed,
    steering, actuator and friction bounds.  The corridor is not enforced.
    """
    K, L = scenario.K, scenario.s_span
    s = np.linspace(0.0, L, K)
    kappa = scenario.curvature(s)
    cons = scenario.constraint_spec()
    params, variant = scenario.params, scenario.variant

    def fun(x, u, p):
        return arc_dynamics(x, u, p, params, variant, check=False)

    for _ in range(max_tries):
        v_end = rng.uniform(*SPEED_FRACTION) * scenario.v0
        freq = rng.uniform(0.5, 2.0, 2)
        phase = rng.uniform(0.0, 2 * np.pi, 2)
        u = np.zeros((K, 2))
        u[:, U0] = (v_end**2 - scenario.v0**2) / (2 * L) + 0.3 * np.sin(2 * np.pi * freq[0] * s / L + phase[0])
        u[:, U1] = 0.02 * np.sin(2 * np.pi * freq[1] * s / L + phase[1])

        x = np.zeros((K, len(cons.x_initial)))
        x[0] = cons.x_initial
        for k in range(K - 1):
            x[k + 1] = shoot_system(fun, x[k:k + 2], u[k:k + 2], kappa[k:k + 2], s[1] - s[0], fine_steps)[0]
        if not np.all(np.isfinite(x)):
            continue
        a_y, _, _ = lateral_acceleration(x[:, V], x[:, DELTA], params, variant)
        ok = (
            np.all((x[:, V] >= cons.v_min) & (x[:, V] <= cons.v_max))
            and np.all(np.abs(x[:, DELTA]) <= cons.delta_max)
            and np.all(np.abs(u[:, U1]) <= cons.delta_rate_max)
            and np.all((u[:, U0] >= cons.u0_min) & (u[:, U0] <= cons.u0_max))
            and np.all(np.hypot(u[:, U0], a_y) <= cons.friction_radius)
        )
        if ok:
            return ReferenceTrajectory(x, u, kappa, (0.0, L))
    raise RuntimeError(f"no feasible random reference after {max_tries} draws")


@dataclass
class DiscretizationReport:
    substeps: int
    max_error: float  # max over nodes and channels, scaled units
    coarse_error: float  # same with half the substeps
    worst_node: int
    worst_channel: int

    @property
    def order_ratio(self) -> float:
        return self.coarse_error / self.max_error if self.max_error > 0 else float("inf")

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def discretization_error(ref: ReferenceTrajectory, params, variant, D_x, substeps: int = DEFAULT_SUBSTEPS,
                         oracle_steps: int = 256) -> DiscretizationReport:
    """Compare the discrete recurrence under the reference controls with fine RK4 on the continuous LTV."""
    fine = rk4_ltv_oracle(ref, params, variant, steps=oracle_steps)
    errs = []
    for n in (substeps, max(substeps // 2, 1)):
        ltv = foh_discretize(ref, params, variant, n)
        xs = propagate(ltv, ref.x[0], ref.u)
        errs.append(np.abs(xs - fine) / D_x)
    k, i = np.unravel_index(np.argmax(errs[0]), errs[0].shape)
    return DiscretizationReport(substeps, float(errs[0].max()), float(errs[1].max()), int(k), int(i))
