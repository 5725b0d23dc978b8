import json

import numpy as np
import pytest

from data_loader import FeatureLayout, FeatureScaler
from gp_core import GPHyperparams, fit
from simulator import ActuatorConfig, PDGains, PerturbationProfile, PerturbationSegment, run_exploration


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def actuator():
    return ActuatorConfig()


@pytest.fixture
def frictionless():
    return ActuatorConfig(viscous=0.0, coulomb=0.0, stribeck=0.0)


@pytest.fixture(scope="session")
def short_dataset():
    """Six seconds of exploration with two pushes (120 samples)"""
    pushes = PerturbationProfile([
        PerturbationSegment(start=1.0, end=2.0, kind="constant", magnitude=0.9),
        PerturbationSegment(start=4.0, end=4.8, kind="constant", magnitude=-0.8),
    ])
    return run_exploration(ActuatorConfig(), PDGains(), (0.0, 1.0, -1.0, 0.0), 6.0, pushes,
                           rng=np.random.default_rng(0), torque_noise=0.03, position_noise=1e-4)


@pytest.fixture(scope="session")
def gravity_gp():
    """GP trained on exact gravity torque 2·sin θ at rest, with its scaler"""
    layout = FeatureLayout()
    theta = np.linspace(-1.4, 1.4, 41)
    raw = np.column_stack([np.zeros_like(theta), np.zeros_like(theta), theta])
    scaler = FeatureScaler.fit(raw, layout)
    model = fit(scaler.transform(raw), 2.0 * np.sin(theta), GPHyperparams(1.0, 4.0, 1e-4))
    return model, scaler, layout


@pytest.fixture
def short_scenario_file(tmp_path):
    """Four-second scenario file for command-line runs"""
    data = {
        "name": "short",
        "exploration": {"waypoints": [0.0, 0.6, -0.6, 0.0], "duration": 4.0},
        "perturbations": [{"start": 1.0, "end": 1.6, "kind": "constant", "magnitude": 0.8}],
        "identification": {"modes": 2, "iterations": 2},
        "evaluation": {"equilibrium_stiffness": [1.0, 5.0], "compensate_duration": 1.0},
    }
    path = tmp_path / "short.json"
    path.write_text(json.dumps(data))
    return str(path)
