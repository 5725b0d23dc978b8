"""
Scenario and run configuration
JSON scenario files, environment defaults and the config hash carried by every output
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

from compensation import ImpedanceParams
from simulator import ActuatorConfig, PayloadSegment, PDGains, PerturbationProfile, PerturbationSegment

logger = logging.getLogger(__name__)

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "scenarios")


class ConfigError(ValueError):
    """Invalid scenario file or command-line option"""


@dataclass(frozen=True)
class ExplorationConfig:
    waypoints: Tuple[float, ...] = (-1.2, 1.2, -1.2, 1.2, -1.2, 1.2, -1.2)
    duration: float = 16.35
    sample_rate: float = 20.0
    torque_noise: float = 0.03
    position_noise: float = 1e-4
    perturbation_threshold: float = 0.02
    lowpass_cutoff: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(float(w) for w in self.waypoints))
        if self.duration <= 0 or self.sample_rate <= 0:
            raise ConfigError("Exploration duration and sample rate must be positive")
        if self.torque_noise < 0 or self.position_noise < 0:
            raise ConfigError("Noise levels must be non-negative")


@dataclass(frozen=True)
class IdentificationConfig:
    """SEM defaults for the scenario; command-line flags override them"""
    modes: int = 2
    stay_probability: float = 0.95
    iterations: int = 50
    disturbance: bool = True
    sgn_feature: bool = False
    restarts: int = 3


@dataclass(frozen=True)
class EvaluationConfig:
    drag_velocity: float = 0.1
    coupling_stiffness: float = 200.0
    settle: float = 1.0
    stiffness: float = 3.5
    stiffness_amplitude: float = 2.0
    stiffness_frequency: float = 0.05
    passivity_duration: float = 60.0
    impulse_period: float = 2.0
    impulse_width: float = 0.05
    impulse_factor: float = 5.0
    tolerance: float = 1e-3
    equilibrium_stiffness: Tuple[float, ...] = (0.5, 1.0, 2.0, 3.5, 5.0, 10.0, 20.0, 50.0)
    equilibrium_setpoint: float = 0.5
    control_rate: float = 1000.0
    compensate_duration: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "equilibrium_stiffness", tuple(float(k) for k in self.equilibrium_stiffness))


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce a simulated experiment"""
    name: str = "default"
    actuator: ActuatorConfig = field(default_factory=ActuatorConfig)
    pd: PDGains = field(default_factory=PDGains)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    perturbations: Tuple[PerturbationSegment, ...] = ()
    payloads: Tuple[PayloadSegment, ...] = ()
    impedance: ImpedanceParams = field(default_factory=lambda: ImpedanceParams(stiffness=3.5))
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: Optional[int] = None

    @property
    def perturbation_profile(self) -> PerturbationProfile:
        return PerturbationProfile(self.perturbations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "actuator": self.actuator.to_dict(),
            "pd": asdict(self.pd),
            "exploration": {**asdict(self.exploration), "waypoints": list(self.exploration.waypoints)},
            "perturbations": [asdict(s) for s in self.perturbations],
            "payloads": [asdict(p) for p in self.payloads],
            "impedance": self.impedance.to_dict(),
            "identification": asdict(self.identification),
            "evaluation": {**asdict(self.evaluation),
                           "equilibrium_stiffness": list(self.evaluation.equilibrium_stiffness)},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("Scenario must be a JSON object")
        _check_keys("scenario", data, {f.name for f in fields(cls)})
        try:
            actuator = data.get("actuator", {})
            _check_keys("actuator", actuator, {f.name for f in fields(ActuatorConfig)})
            return cls(
                name=str(data.get("name", "custom")),
                actuator=ActuatorConfig.from_dict(actuator),
                pd=_section(PDGains, "pd", data),
                exploration=_section(ExplorationConfig, "exploration", data),
                perturbations=tuple(_item(PerturbationSegment, "perturbations", item)
                                    for item in data.get("perturbations", [])),
                payloads=tuple(_item(PayloadSegment, "payloads", item) for item in data.get("payloads", [])),
                impedance=_section(ImpedanceParams, "impedance", data, ImpedanceParams(stiffness=3.5)),
                identification=_section(IdentificationConfig, "identification", data),
                evaluation=_section(EvaluationConfig, "evaluation", data),
                seed=None if data.get("seed") is None else int(data["seed"]),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid scenario: {e}") from e

    def validate(self) -> "ScenarioConfig":
        PerturbationProfile(self.perturbations)
        lo, hi = self.actuator.range_of_motion
        if any(w < lo or w > hi for w in self.exploration.waypoints):
            raise ConfigError(f"Waypoints must lie within the range of motion [{lo}, {hi}]")
        return self


def _check_keys(section: str, data: Dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}")


def _section(cls, name: str, data: Dict, default=None):
    if name not in data:
        return default if default is not None else cls()
    return _item(cls, name, data[name])


def _item(cls, name: str, data: Dict):
    _check_keys(name, data, {f.name for f in fields(cls)})
    return cls(**data)


def load_scenario(path: Optional[str] = None) -> ScenarioConfig:
    """Read and validate a scenario file; None gives the built-in default"""
    if path is None:
        return default_scenario()
    if not os.path.exists(path):
        candidate = os.path.join(SCENARIO_DIR, path if path.endswith(".json") else f"{path}.json")
        if not os.path.exists(candidate):
            raise ConfigError(f"Scenario file not found: {path}")
        path = candidate
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Scenario {path} is not valid JSON: {e}") from e
    scenario = ScenarioConfig.from_dict(data).validate()
    logger.info("Loaded scenario '%s' from %s", scenario.name, path)
    return scenario


def default_scenario() -> ScenarioConfig:
    """Perturbation run with 327 samples, 92 of them pushed

    Three passes per direction; every position is pushed in at most one pass of
    each direction, so it is also visited unpushed.
    """
    pushes = [(1.75, 2.55, 0.9), (2.95, 4.10, -0.8), (5.65, 6.40, 1.0), (9.55, 10.65, -0.9), (11.85, 12.65, 0.8)]
    return ScenarioConfig(
        name="default",
        perturbations=tuple(PerturbationSegment(start=a, end=b, kind="constant", magnitude=m) for a, b, m in pushes),
    )


@dataclass(frozen=True)
class RunConfig:
    """Resolved command options (flags > scenario > environment)"""
    scenario_path: Optional[str] = None
    modes: int = 2
    stay_probability: float = 0.95
    iterations: int = 50
    seed: int = 0
    sgn_feature: bool = False
    disturbance: bool = True
    restarts: int = 3
    output_dir: str = "results"

    def __post_init__(self):
        if self.modes < 1:
            raise ConfigError("--modes must be at least 1")
        if not 0.0 < self.stay_probability < 1.0:
            raise ConfigError("--pi must lie strictly between 0 and 1")
        if self.iterations < 1:
            raise ConfigError("--iters must be at least 1")
        if self.restarts < 1:
            raise ConfigError("--restarts must be at least 1")

    def hash_fields(self) -> Dict[str, Any]:
        return {
            "modes": self.modes,
            "stay_probability": self.stay_probability,
            "iterations": self.iterations,
            "seed": self.seed,
            "sgn_feature": self.sgn_feature,
            "disturbance": self.disturbance,
            "restarts": self.restarts,
        }

    @classmethod
    def resolve(cls, scenario: ScenarioConfig, overrides: Optional[Dict[str, Any]] = None,
                env: Optional[Dict[str, str]] = None) -> "RunConfig":
        env = environment_defaults() if env is None else env
        ident = scenario.identification
        values = {
            "modes": ident.modes,
            "stay_probability": ident.stay_probability,
            "iterations": ident.iterations,
            "seed": scenario.seed if scenario.seed is not None else int(env["seed"]),
            "sgn_feature": ident.sgn_feature,
            "disturbance": ident.disturbance,
            "restarts": ident.restarts,
            "output_dir": env["output_dir"],
        }
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(**values)


def environment_defaults() -> Dict[str, Any]:
    try:
        seed = int(os.getenv("GPSEM_SEED", "0"))
    except ValueError as e:
        raise ConfigError(f"GPSEM_SEED must be an integer: {e}") from e
    return {
        "output_dir": os.getenv("GPSEM_OUTPUT_DIR", "results"),
        "seed": seed,
        "log_level": os.getenv("GPSEM_LOG_LEVEL", "INFO").upper(),
    }


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(scenario: ScenarioConfig, run: Optional[RunConfig] = None) -> str:
    """SHA-256 of the resolved scenario plus run options"""
    payload = {"scenario": scenario.to_dict(), "run": run.hash_fields() if run else None}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
