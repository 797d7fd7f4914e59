"""Scenario definitions: JSON schema, validation and built-in presets."""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .subproblem import ConstraintSpec, CostWeights, TriggerSpec
from .vehicle import CurvatureProfile, ModelVariant, VehicleParams, steady_state_steering

SCHEMA_VERSION = 1

CONSTRAINT_KEYS = {
    "v_max", "v_min", "delta_max", "delta_rate_max", "u0_min", "u0_max", "mu", "gravity",
    "final_state_pins", "initial_control_pins", "final_control_pins",
}
ANGLE_KEYS = {"delta_max", "delta_rate_max"}
WEIGHT_KEYS = {"w_ey", "w_epsi", "w_jerk", "w_u0", "w_u1", "w_terminal", "w_nu"}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    s_span: float
    K: int
    v0: float
    v_final: float
    curvature_spec: dict = field(default_factory=lambda: {"preset": "straight"})
    l_r: float = 1.4
    l_f: float = 1.4
    variant: str = ModelVariant.ROBOT_CAR.value
    constraints: dict = field(default_factory=dict)
    road_half_width: float = 4.0
    obstacles: list = field(default_factory=list)
    trigger: dict = None
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.K, int) or self.K < 10:
            raise ScenarioError(f"K must be an integer >= 10, got {self.K!r}")
        if not self.s_span > 0:
            raise ScenarioError(f"s_span must be positive, got {self.s_span}")
        if not self.v0 > self.v_final > 0:
            raise ScenarioError(f"need v0 > v_final > 0, got v0={self.v0}, v_final={self.v_final}")
        if not self.road_half_width > 0:
            raise ScenarioError("road_half_width must be positive")
        try:
            ModelVariant(self.variant)
        except ValueError:
            raise ScenarioError(f"unknown model variant {self.variant!r}") from None
        unknown = set(self.constraints) - CONSTRAINT_KEYS
        if unknown:
            raise ScenarioError(f"unknown constraint keys {sorted(unknown)}")
        unknown = set(self.weights) - WEIGHT_KEYS
        if unknown:
            raise ScenarioError(f"unknown weight keys {sorted(unknown)}")
        for ob in self.obstacles:
            lo, hi = ob["nodes"]
            if not 0 <= lo <= hi <= self.K - 1:
                raise ScenarioError(f"obstacle node range {ob['nodes']} outside [0, {self.K - 1}]")
            if ob.get("side") not in ("left", "right"):
                raise ScenarioError(f"obstacle side must be 'left' or 'right', got {ob.get('side')!r}")
            if not 0 <= ob["clearance"] < self.road_half_width:
                raise ScenarioError("obstacle clearance must lie within the road half width")
        try:
            self.params
            self.curvature
            self.constraint_spec()
            self.cost_weights()
            spec = self.trigger_spec()
            if spec is not None:
                spec.validate(self.K)
        except ScenarioError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ScenarioError(str(exc)) from exc

    @property
    def params(self) -> VehicleParams:
        return VehicleParams(self.l_r, self.l_f)

    @property
    def curvature(self) -> CurvatureProfile:
        return curvature_from_spec(self.curvature_spec, self.s_span)

    @property
    def s_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.s_span, self.K)

    def corridor(self) -> np.ndarray:
        corridor = np.tile([-self.road_half_width, self.road_half_width], (self.K, 1)).astype(float)
        for ob in self.obstacles:
            lo, hi = ob["nodes"]
            if ob["side"] == "right":
                corridor[lo:hi + 1, 1] = np.minimum(corridor[lo:hi + 1, 1], -ob["clearance"])
            else:
                corridor[lo:hi + 1, 0] = np.maximum(corridor[lo:hi + 1, 0], ob["clearance"])
        return corridor

    def constraint_spec(self) -> ConstraintSpec:
        kappa0 = float(self.curvature(0.0))
        delta0 = steady_state_steering(kappa0, self.params, self.variant)
        x_initial = [0.0, 0.0, 0.0, self.v0, delta0, 0.0]
        return ConstraintSpec(corridor=self.corridor(), x_initial=x_initial, **copy.deepcopy(self.constraints))

    def cost_weights(self) -> CostWeights:
        return CostWeights(**self.weights)

    def trigger_spec(self):
        if self.trigger is None:
            return None
        kind = self.trigger.get("type")
        if kind != "terminal-speed-evasion":
            raise ScenarioError(f"unknown trigger type {kind!r}")
        opts = {k: v for k, v in self.trigger.items() if k != "type"}
        return TriggerSpec.terminal_speed_evasion(**opts)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "s_span": self.s_span,
            "K": self.K,
            "v0": self.v0,
            "v_final": self.v_final,
            "curvature": copy.deepcopy(self.curvature_spec),
            "vehicle": {"l_r": self.l_r, "l_f": self.l_f, "variant": self.variant},
            "constraints": copy.deepcopy(self.constraints),
            "road_half_width": self.road_half_width,
            "obstacles": copy.deepcopy(self.obstacles),
            "trigger": copy.deepcopy(self.trigger),
            "weights": copy.deepcopy(self.weights),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def curvature_from_spec(spec: dict, s_span: float) -> CurvatureProfile:
    if "samples" in spec:
        samples = np.asarray(spec["samples"], dtype=float)
        if samples.ndim != 2 or samples.shape[1] != 2:
            raise ScenarioError("curvature samples must be a list of [s, kappa] pairs")
        profile = CurvatureProfile(samples[:, 0], samples[:, 1])
        if profile.s[0] > 0 or profile.s[-1] < s_span:
            raise ScenarioError(f"curvature samples must cover [0, {s_span}]")
        return profile
    preset = spec.get("preset")
    if preset == "straight":
        return CurvatureProfile.constant(0.0, s_span)
    if preset == "constant-radius":
        radius = float(spec["radius"])
        sign = 1.0 if spec.get("direction", "left") == "left" else -1.0
        return CurvatureProfile.constant(sign / radius, s_span)
    if preset == "clothoid":
        # straight lead-in, linear curvature ramp, then constant arc
        start, length = float(spec["blend_start"]), float(spec["blend_length"])
        kappa = float(spec["kappa_end"])
        if not 0 <= start and start + length < s_span and length > 0:
            raise ScenarioError("clothoid blend must fit strictly inside the arc-length span")
        pts = [(0.0, 0.0), (start, 0.0), (start + length, kappa), (s_span, kappa)]
        if start == 0:
            pts = pts[1:]
        s, k = zip(*pts)
        return CurvatureProfile(np.array(s), np.array(k))
    raise ScenarioError(f"unknown curvature preset {preset!r}")


def _normalize_angles(constraints: dict) -> dict:
    out = {}
    for key, value in constraints.items():
        if key.endswith("_deg"):
            base = key[: -len("_deg")]
            if base not in ANGLE_KEYS:
                raise ScenarioError(f"'{key}': degree suffix only allowed on {sorted(ANGLE_KEYS)}")
            if base in constraints:
                raise ScenarioError(f"both '{base}' and '{key}' given")
            out[base] = float(np.deg2rad(value))
        else:
            out[key] = value
    return out


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario file must contain a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    known = {"schema_version", "name", "s_span", "K", "v0", "v_final", "curvature", "vehicle", "constraints",
             "road_half_width", "obstacles", "trigger", "weights", "preset"}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")

    if "preset" in data:
        base = preset(data["preset"]).to_dict()
        base.update({k: v for k, v in data.items() if k != "preset"})
        data = base
    missing = {"name", "s_span", "K", "v0", "v_final"} - set(data)
    if missing:
        raise ScenarioError(f"missing required keys {sorted(missing)}")
    vehicle = data.get("vehicle", {})
    try:
        return Scenario(
            name=str(data["name"]),
            s_span=float(data["s_span"]),
            K=data["K"],
            v0=float(data["v0"]),
            v_final=float(data["v_final"]),
            curvature_spec=data.get("curvature", {"preset": "straight"}),
            l_r=float(vehicle.get("l_r", 1.4)),
            l_f=float(vehicle.get("l_f", 1.4)),
            variant=vehicle.get("variant", ModelVariant.ROBOT_CAR.value),
            constraints=_normalize_angles(data.get("constraints") or {}),
            road_half_width=float(data.get("road_half_width", 4.0)),
            obstacles=list(data.get("obstacles") or []),
            trigger=data.get("trigger"),
            weights=dict(data.get("weights") or {}),
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc


def load_scenario(path) -> Scenario:
    """Load a scenario from a JSON file, or a built-in preset by name."""
    if str(path) in PRESETS:
        return preset(str(path))
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"no such scenario file or preset: {path} (presets: {', '.join(PRESETS)})")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(data)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(scenario.to_json() + "\n")


_CURVED_ROAD = {"preset": "constant-radius", "radius": 200.0}

PRESETS = {
    "stop-50m": dict(
        name="stop-50m", s_span=50.0, K=40, v0=20.0, v_final=0.5,
        curvature_spec=_CURVED_ROAD, constraints={"mu": 0.6},
    ),
    "stop-obstacle": dict(
        name="stop-obstacle", s_span=50.0, K=40, v0=20.0, v_final=0.5,
        curvature_spec=_CURVED_ROAD, constraints={"mu": 0.6},
        obstacles=[{"nodes": [20, 24], "clearance": 0.5, "side": "right"}],
    ),
    "evasion-trigger": dict(
        name="evasion-trigger", s_span=50.0, K=40, v0=25.0, v_final=0.5,
        curvature_spec=_CURVED_ROAD, constraints={"mu": 0.6},
        trigger={"type": "terminal-speed-evasion", "speed_threshold": 1.0, "lateral_clearance": 1.0,
                 "last_nodes": 2},
    ),
}


def preset(name: str) -> Scenario:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; presets: {', '.join(PRESETS)}") from None
    return Scenario(**copy.deepcopy(spec))
