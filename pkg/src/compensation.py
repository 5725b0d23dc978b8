"""
Passive GP feedforward compensation
Impedance law, position-only evaluation of the learned inverse dynamics,
storage functions and the energy audit at the actuator port
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from data_loader import FeatureLayout, FeatureScaler
from gp_core import GPModel, fixed_coordinate_factors, kernel_potential, potential_bound
from mixture_sem import MixtureData, MixtureState, fit_mode_model, from_bundle
from simulator import ActuatorConfig, ClosedLoopLog, SimState, simulate_closed_loop

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-3


@dataclass(frozen=True)
class ImpedanceParams:
    """Rendered spring/damper about θ_des; inertia is left physical"""
    stiffness: float = 0.0
    damping: float = 0.0
    setpoint: float = 0.0
    inertia: Optional[float] = None

    def __post_init__(self):
        if self.stiffness < 0 or self.damping < 0:
            raise ValueError("Impedance stiffness and damping must be non-negative")

    def to_dict(self) -> Dict:
        return {"stiffness": self.stiffness, "damping": self.damping,
                "setpoint": self.setpoint, "inertia": self.inertia}


@dataclass(frozen=True, eq=False)
class CompensationPolicy:
    """τ = τ_ff(θ) + τ_imp(θ, θ̇)

    τ_ff is the GP mean at [θ̈=0, θ̇=0, θ(, sgn=0)]. `viscous_gain` adds
    gain·θ̇ and exists only to build non-passive counterexamples.
    """
    gp: Optional[GPModel]
    scaler: FeatureScaler
    layout: FeatureLayout
    impedance: ImpedanceParams = field(default_factory=ImpedanceParams)
    viscous_gain: float = 0.0

    def __post_init__(self):
        if self.gp is not None and self.gp.dim != self.layout.dim:
            raise ValueError(
                f"GP trained on {self.gp.dim} features, layout '{self.layout.label}' has {self.layout.dim}"
            )
        # slice of the GP along θ with every other coordinate held at the query values
        if self.gp is not None and self.gp.n > 0:
            weights = self.gp.alpha * fixed_coordinate_factors(self.gp, self.layout.position_index, self.anchor)
            centres = self.gp.X[:, self.layout.position_index]
        else:
            weights, centres = np.empty(0), np.empty(0)
        object.__setattr__(self, "_weights", weights)
        object.__setattr__(self, "_centres", centres)

    @property
    def sgn_feature_enabled(self) -> bool:
        return self.layout.sgn_feature

    @property
    def anchor(self) -> np.ndarray:
        """Standardised query vector at θ = 0 (only the position coordinate varies)"""
        return self.scaler.transform(self.layout.query(0.0))

    @property
    def position_scale(self) -> float:
        return float(self.scaler.scale[self.layout.position_index])

    @property
    def is_compensated(self) -> bool:
        return self.gp is not None and self.gp.n > 0

    def standardized_position(self, theta):
        i = self.layout.position_index
        return (np.asarray(theta, dtype=float) - self.scaler.mean[i]) / self.scaler.scale[i]

    def without_feedforward(self) -> "CompensationPolicy":
        return replace(self, gp=None)

    def with_impedance(self, impedance: ImpedanceParams) -> "CompensationPolicy":
        return replace(self, impedance=impedance)

    def with_viscous_gain(self, gain: float) -> "CompensationPolicy":
        return replace(self, viscous_gain=gain)

    def torque(self, theta: float, theta_dot: float) -> float:
        return (feedforward_torque(self, theta)
                + impedance_torque(self.impedance, theta, theta_dot)
                + self.viscous_gain * theta_dot)

    @classmethod
    def uncompensated(cls, layout: FeatureLayout, impedance: Optional[ImpedanceParams] = None) -> "CompensationPolicy":
        return cls(gp=None, scaler=FeatureScaler.identity(layout.dim), layout=layout,
                   impedance=impedance or ImpedanceParams())

    @classmethod
    def from_state(cls, state: MixtureState, data: MixtureData, impedance: Optional[ImpedanceParams] = None,
                   mode: Optional[int] = None) -> "CompensationPolicy":
        """Policy from the nominal GP of a trained mixture (default: the disturbance parent)"""
        mode = state.disturbance_parent if mode is None else mode
        if not 0 <= mode < state.n_nominal:
            raise ValueError(f"Mode {mode + 1} is not a nominal mode")
        gp = fit_mode_model(state, data, mode)
        logger.info("Feedforward GP from mode %d (%d samples)", mode + 1, gp.n)
        return cls(gp=gp, scaler=state.scaler, layout=state.layout, impedance=impedance or ImpedanceParams())

    @classmethod
    def from_bundle(cls, bundle: Dict, impedance: Optional[ImpedanceParams] = None,
                    mode: Optional[int] = None) -> "CompensationPolicy":
        state, data = from_bundle(bundle)
        return cls.from_state(state, data, impedance, mode)


def feedforward_torque(p: CompensationPolicy, theta):
    """GP mean at the position-only query; depends on θ alone"""
    if not p.is_compensated:
        return 0.0 if np.ndim(theta) == 0 else np.zeros(np.shape(theta))
    h = p.gp.hyperparams
    z = p.standardized_position(theta)
    diff = (z[..., None] - p._centres) / h.length_scale
    result = h.signal_variance * (np.exp(-diff * diff) @ p._weights)
    return float(result) if np.ndim(result) == 0 else result


def impedance_torque(ip: ImpedanceParams, theta, theta_dot):
    """−K_imp·(θ−θ_des) − B_imp·θ̇"""
    return -ip.stiffness * (theta - ip.setpoint) - ip.damping * theta_dot


def policy_torque(p: CompensationPolicy, theta, theta_dot):
    return p.torque(theta, theta_dot)


def feedforward_potential(p: CompensationPolicy, theta):
    """Bounded P(θ) with P′(θ) = τ_ff(θ)"""
    if not p.is_compensated:
        return 0.0 if np.ndim(theta) == 0 else np.zeros(np.shape(theta))
    z = p.standardized_position(theta)
    value = p.position_scale * np.asarray(
        kernel_potential(p.gp, z, p.layout.position_index, anchor=p.anchor)
    )
    return float(value) if np.ndim(value) == 0 else value


def feedforward_potential_bound(p: CompensationPolicy) -> float:
    if not p.is_compensated:
        return 0.0
    return p.position_scale * potential_bound(p.gp, p.layout.position_index, anchor=p.anchor)


def controller_storage(p: CompensationPolicy, theta):
    """½K_imp(θ−θ_des)² − P(θ): energy the controller can still release"""
    ip = p.impedance
    spring = 0.5 * ip.stiffness * (np.asarray(theta, dtype=float) - ip.setpoint) ** 2
    value = spring - feedforward_potential(p, theta)
    return float(value) if np.ndim(value) == 0 else value


def storage_function(p: CompensationPolicy, theta, theta_dot, cfg: ActuatorConfig):
    """S = ½Mθ̇² + V_g(θ) − P(θ) + ½K_imp(θ−θ_des)²"""
    kinetic = 0.5 * cfg.inertia * np.asarray(theta_dot, dtype=float) ** 2
    value = kinetic + cfg.gravity_potential(theta) + controller_storage(p, theta)
    return float(value) if np.ndim(value) == 0 else value


def storage_lower_bound(p: CompensationPolicy, cfg: ActuatorConfig) -> float:
    return cfg.gravity_potential_min - feedforward_potential_bound(p)


@dataclass(eq=False)
class EnergyLedger:
    """Power flow and cumulative energy through one port

    margin(t) = S(0) − S(t) − W(t) when a storage trace is known, else S₀ − W(t);
    a violation is margin < −tolerance at any time.
    """
    time: np.ndarray
    power: np.ndarray
    energy: np.ndarray
    margin: np.ndarray
    initial_storage: float
    tolerance: float

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margin)) if self.margin.size else 0.0

    @property
    def violation(self) -> bool:
        return bool(self.min_margin < -self.tolerance)

    @property
    def total_energy(self) -> float:
        return float(self.energy[-1]) if self.energy.size else 0.0

    def summary(self) -> Dict:
        return {
            "initial_storage": self.initial_storage,
            "total_energy": self.total_energy,
            "min_margin": self.min_margin,
            "tolerance": self.tolerance,
            "violation": self.violation,
        }


def energy_audit(time, torque, velocity, storage=None, initial_storage: float = 0.0,
                 tolerance: float = DEFAULT_TOLERANCE) -> EnergyLedger:
    """Trapezoidal energy W(t) = ∫τ·θ̇ dt of a uniformly sampled port log"""
    time = np.asarray(time, dtype=float)
    torque = np.asarray(torque, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    if not (time.shape == torque.shape == velocity.shape):
        raise ValueError("Time, torque and velocity logs must have equal length")
    if time.size > 2:
        steps = np.diff(time)
        if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-12):
            raise ValueError("Energy audit requires uniformly sampled timestamps")
    power = torque * velocity
    energy = cumulative_trapezoid(power, time, initial=0.0) if time.size > 1 else np.zeros_like(power)
    if storage is not None:
        storage = np.asarray(storage, dtype=float)
        initial_storage = float(storage[0])
        margin = initial_storage - storage - energy
    else:
        margin = initial_storage - energy
    return EnergyLedger(time=time, power=power, energy=energy, margin=margin,
                        initial_storage=float(initial_storage), tolerance=tolerance)


def audit_closed_loop(p: CompensationPolicy, log: ClosedLoopLog, tolerance: float = DEFAULT_TOLERANCE) -> EnergyLedger:
    """Actuator-port ledger of a closed-loop run against the controller storage"""
    return energy_audit(log.time, log.tau_cmd, log.theta_dot,
                        storage=controller_storage(p, log.theta), tolerance=tolerance)


def run_closed_loop(p: CompensationPolicy,
                    cfg: ActuatorConfig,
                    duration: float,
                    external: Optional[Callable[[float, SimState], float]] = None,
                    external_trace: Optional[np.ndarray] = None,
                    initial: Optional[SimState] = None,
                    control_rate: float = 1000.0,
                    decimation: int = 10) -> ClosedLoopLog:
    """Simulate the plant under the policy with a zero-order-hold controller"""
    initial = initial or SimState(theta=p.impedance.setpoint)
    logger.info(
        "Closed loop %.1fs: K_imp=%.3g B_imp=%.3g, feedforward %s",
        duration, p.impedance.stiffness, p.impedance.damping, "on" if p.is_compensated else "off",
    )
    return simulate_closed_loop(cfg, p.torque, duration, external=external, external_trace=external_trace,
                                initial=initial, control_rate=control_rate, decimation=decimation)


def gravity_model_error(p: CompensationPolicy, cfg: ActuatorConfig, theta) -> np.ndarray:
    """g̃(θ) = g(θ) − τ_ff(θ), the gravity left uncompensated"""
    theta = np.asarray(theta, dtype=float)
    return cfg.gravity(theta) - np.asarray(feedforward_torque(p, theta))

