"""Speed and path planning for road vehicles by successive convexification."""

from .conic import ConicProgram, ProgramBuilder, SolveSettings, SolveStatus, solve
from .scenarios import Scenario, ScenarioError, load_scenario, preset
from .scvx import ConvergedPlan, InternalError, ScvxConfig, recover_time, run
from .subproblem import ConstraintSpec, CostWeights, TriggerSpec, assemble
from .transcription import DiscreteLTV, ReferenceTrajectory, ScalingMap, foh_discretize, propagate
from .vehicle import ModelVariant, SingularityError, VehicleParams

__version__ = "0.1.0"

__all__ = [
    "ConicProgram", "ConstraintSpec", "ConvergedPlan", "CostWeights", "DiscreteLTV", "InternalError",
    "ModelVariant", "ProgramBuilder", "ReferenceTrajectory", "ScalingMap", "Scenario", "ScenarioError",
    "ScvxConfig", "SingularityError", "SolveSettings", "SolveStatus", "TriggerSpec", "VehicleParams",
    "assemble", "foh_discretize", "load_scenario", "preset", "propagate", "recover_time", "run", "solve",
]
