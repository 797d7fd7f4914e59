import numpy as np
import pytest

from scvx_drive.scenarios import preset
from scvx_drive.scvx import ScvxConfig, make_problem, run
from scvx_drive.transcription import ReferenceTrajectory, shoot_system
from scvx_drive.vehicle import VehicleParams, arc_dynamics

PRESET_NAMES = ("stop-50m", "stop-obstacle", "evasion-trigger")


@pytest.fixture(scope="session")
def plans():
    """Converged plans of the built-in presets, computed once per session."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = run(preset(name), ScvxConfig())
        return cache[name]

    return get


@pytest.fixture(scope="session")
def problems():
    return {name: make_problem(preset(name), ScvxConfig()) for name in PRESET_NAMES}


def shot_reference(x0, u, kappa, s_span, params=VehicleParams(), variant="RobotCar", substeps=64):
    """Reference whose nodes come from integrating the nonlinear model node to node."""
    u = np.asarray(u, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    K = u.shape[0]
    h = (s_span[1] - s_span[0]) / (K - 1)
    x = np.zeros((K, len(x0)))
    x[0] = x0

    def fun(xx, uu, pp):
        return arc_dynamics(xx, uu, pp, params, variant, check=False)

    for k in range(K - 1):
        x[k + 1] = shoot_system(fun, x[k:k + 2], u[k:k + 2], kappa[k:k + 2], h, substeps)[0]
    return ReferenceTrajectory(x, u, kappa, s_span)
