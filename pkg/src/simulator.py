"""
1-DOF actuator simulator
Rigid load with gravity, Coulomb/viscous/Stribeck friction and stick-slip,
PD exploration with external perturbations and annotated dataset generation
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from data_loader import NOMINAL_MODE, PERTURBED_MODE, Dataset, FeatureLayout

logger = logging.getLogger(__name__)

GRAVITY = 9.81
PERTURBATION_KINDS = ("constant", "noise", "impulse")


class SimulationError(RuntimeError):
    """Simulation became unstable or received non-finite values"""


@dataclass(frozen=True)
class ActuatorConfig:
    """Physical parameters of the load side

    Gravity torque g(θ) = gravity_torque·sin θ, Coulomb level modulated by
    γ(θ) = 1 + coulomb_load_gain·|sin θ|.
    """
    inertia: float = 0.73
    viscous: float = 0.05
    coulomb: float = 0.3
    stribeck: float = 0.3
    stribeck_velocity: float = 0.05
    gravity_torque: float = 2.0
    coulomb_load_gain: float = 0.2
    dt: float = 1e-4
    velocity_limit: float = 10.0
    range_of_motion: Tuple[float, float] = (-1.5, 1.5)

    def __post_init__(self):
        if self.inertia <= 0:
            raise ValueError("Inertia must be positive")
        for name in ("viscous", "coulomb", "stribeck", "stribeck_velocity", "coulomb_load_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dt <= 0:
            raise ValueError("Integration step must be positive")
        lo, hi = self.range_of_motion
        if not lo < hi:
            raise ValueError("Range of motion must be an increasing pair")
        object.__setattr__(self, "range_of_motion", (float(lo), float(hi)))

    def coulomb_modulation(self, theta: float) -> float:
        return 1.0 + self.coulomb_load_gain * abs(math.sin(theta))

    def breakaway(self, theta: float) -> float:
        """Static friction limit γ(θ)·τ_c + τ_s"""
        return self.coulomb_modulation(theta) * self.coulomb + self.stribeck

    def gravity(self, theta):
        return self.gravity_torque * np.sin(theta)

    def gravity_potential(self, theta):
        """V_g with V_g' = g and V_g(0) = 0"""
        return self.gravity_torque * (1.0 - np.cos(theta))

    @property
    def gravity_potential_min(self) -> float:
        return 0.0 if self.gravity_torque >= 0 else 2.0 * self.gravity_torque

    @property
    def is_frictionless(self) -> bool:
        return self.viscous == 0 and self.coulomb == 0 and self.stribeck == 0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["range_of_motion"] = list(self.range_of_motion)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ActuatorConfig":
        data = dict(data)
        if "range_of_motion" in data:
            data["range_of_motion"] = tuple(data["range_of_motion"])
        return cls(**data)


@dataclass(frozen=True)
class SimState:
    theta: float = 0.0
    theta_dot: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class PDGains:
    kp: float = 100.0
    kd: float = 12.0


@dataclass(frozen=True)
class PerturbationSegment:
    """External torque process active on [start, end)

    constant: magnitude (signed); noise: low-pass white noise with standard
    deviation `magnitude` and `bandwidth` Hz; impulse: half-sine of peak
    `magnitude` and duration `width` starting at `start`.
    """
    start: float
    end: float
    kind: str = "constant"
    magnitude: float = 0.0
    bandwidth: float = 2.0
    width: float = 0.05

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"Unknown perturbation kind '{self.kind}'")
        if not self.end > self.start:
            raise ValueError("Perturbation segment must have end > start")
        if not math.isfinite(self.magnitude):
            raise ValueError("Perturbation magnitude must be finite")
        if self.kind == "impulse" and (self.width <= 0 or self.start + self.width > self.end + 1e-12):
            raise ValueError("Impulse width must be positive and fit inside its segment")
        if self.kind == "noise" and self.bandwidth <= 0:
            raise ValueError("Noise bandwidth must be positive")


class PerturbationProfile:
    """Schedule of non-overlapping external torque segments"""

    def __init__(self, segments: Sequence[PerturbationSegment] = ()):
        self.segments = sorted(segments, key=lambda s: s.start)
        for a, b in zip(self.segments, self.segments[1:]):
            if b.start < a.end:
                raise ValueError(f"Perturbation segments overlap at t={b.start}")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def is_empty(self) -> bool:
        return not self.segments or all(s.magnitude == 0 for s in self.segments)

    def torque_trace(self, times: np.ndarray, dt: float, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """External torque at each inner-step time"""
        rng = rng if rng is not None else np.random.default_rng(0)
        tau = np.zeros_like(times, dtype=float)
        for seg in self.segments:
            active = (times >= seg.start) & (times < seg.end)
            if not np.any(active):
                continue
            if seg.kind == "constant":
                tau[active] = seg.magnitude
            elif seg.kind == "impulse":
                local = times[active] - seg.start
                pulse = np.where(local < seg.width, np.sin(np.pi * local / seg.width), 0.0)
                tau[active] = seg.magnitude * pulse
            else:
                a = math.exp(-2.0 * math.pi * seg.bandwidth * dt)
                white = rng.standard_normal(int(np.count_nonzero(active)))
                tau[active] = signal.lfilter([math.sqrt(1.0 - a * a) * seg.magnitude], [1.0, -a], white)
        return tau

    def to_list(self) -> List[Dict]:
        return [asdict(s) for s in self.segments]

    @classmethod
    def from_list(cls, items: Sequence[Dict]) -> "PerturbationProfile":
        return cls([PerturbationSegment(**item) for item in items])


def impulse_train(duration: float, period: float, magnitude: float, width: float = 0.05,
                  first: float = 1.0, alternate: bool = True) -> PerturbationProfile:
    """Half-sine impacts every `period` seconds, alternating direction"""
    if period <= width:
        raise ValueError("Impulse period must exceed the impulse width")
    segments = []
    start, sign = first, 1.0
    while start + width <= duration:
        segments.append(PerturbationSegment(start=start, end=start + width, kind="impulse",
                                            magnitude=sign * magnitude, width=width))
        start += period
        if alternate:
            sign = -sign
    return PerturbationProfile(segments)


@dataclass(frozen=True)
class PayloadSegment:
    """Tool of `mass` at `radius` attached on [start, end), annotated as `mode_id`"""
    start: float
    end: float
    mass: float
    radius: float
    mode_id: int = 3

    def __post_init__(self):
        if self.mode_id in (NOMINAL_MODE, PERTURBED_MODE):
            raise ValueError(f"Payload mode id {self.mode_id} is reserved for nominal/perturbed samples")


def friction_torque(theta_dot: float, theta: float, cfg: ActuatorConfig, applied: float = 0.0) -> float:
    """Friction on the load

    Moving: −sgn(θ̇)·[γ(θ)τ_c + τ_s·exp(−(θ̇/v_s)²)] − β·θ̇.
    At rest: opposes the net applied torque up to the breakaway level.
    """
    if theta_dot == 0.0:
        limit = cfg.breakaway(theta)
        if abs(applied) <= limit:
            return -applied
        return -math.copysign(limit, applied)
    stribeck = 0.0
    if cfg.stribeck > 0 and cfg.stribeck_velocity > 0:
        stribeck = cfg.stribeck * math.exp(-(theta_dot / cfg.stribeck_velocity) ** 2)
    dry = cfg.coulomb_modulation(theta) * cfg.coulomb + stribeck
    return -math.copysign(dry, theta_dot) - cfg.viscous * theta_dot


def step(state: SimState, tau_cmd: float, tau_ext: float, dt: float, cfg: ActuatorConfig) -> SimState:
    """Semi-implicit Euler step with stiction and zero-crossing snap"""
    if dt <= 0:
        raise ValueError("dt must be positive")
    theta, theta_dot = state.theta, state.theta_dot
    if not (math.isfinite(tau_cmd) and math.isfinite(tau_ext) and math.isfinite(theta) and math.isfinite(theta_dot)):
        raise SimulationError(f"Non-finite simulation input at t={state.t:.4f}")

    net = tau_cmd + tau_ext - cfg.gravity_torque * math.sin(theta)
    if theta_dot == 0.0:
        if abs(net) <= cfg.breakaway(theta):
            return SimState(theta, 0.0, state.t + dt)
        friction = friction_torque(0.0, theta, cfg, applied=net)
    else:
        friction = friction_torque(theta_dot, theta, cfg)

    new_dot = theta_dot + (net + friction) / cfg.inertia * dt
    if theta_dot != 0.0 and new_dot * theta_dot < 0.0:
        new_dot = 0.0
    return SimState(theta + new_dot * dt, new_dot, state.t + dt)


def attach_payload(cfg: ActuatorConfig, mass: float, radius: float) -> ActuatorConfig:
    """Add a point mass at `radius`: inertia += m·r², gravity amplitude += m·g·r"""
    if mass < 0:
        raise ValueError("Payload mass must be non-negative")
    if mass == 0:
        return cfg
    return replace(
        cfg,
        inertia=cfg.inertia + mass * radius ** 2,
        gravity_torque=cfg.gravity_torque + mass * GRAVITY * radius,
    )


def reference_trajectory(waypoints: Sequence[float], duration: float) -> Callable[[float], Tuple[float, float]]:
    """Cosine-blended reference through waypoints, equal time per segment"""
    points = np.asarray(waypoints, dtype=float)
    if len(points) < 2:
        raise ValueError("Need at least two waypoints")
    segment_time = duration / (len(points) - 1)

    def reference(t: float) -> Tuple[float, float]:
        if t >= duration:
            return float(points[-1]), 0.0
        i = min(int(t // segment_time), len(points) - 2)
        s = (t - i * segment_time) / segment_time
        delta = points[i + 1] - points[i]
        pos = points[i] + delta * (1.0 - math.cos(math.pi * s)) / 2.0
        vel = delta * math.pi * math.sin(math.pi * s) / (2.0 * segment_time)
        return pos, vel

    return reference


def lowpass(values: np.ndarray, cutoff: float, sample_rate: float) -> np.ndarray:
    """Zero-phase second-order Butterworth low-pass"""
    nyquist = sample_rate / 2.0
    if cutoff >= nyquist or len(values) <= 9:
        return values
    b, a = signal.butter(2, cutoff / nyquist)
    return signal.filtfilt(b, a, values)


def estimate_derivatives(theta: np.ndarray, sample_rate: float, cutoff: float = 4.0) -> Tuple[np.ndarray, np.ndarray]:
    """Velocity and acceleration by central differences plus zero-phase filtering"""
    dt = 1.0 / sample_rate
    theta_dot = lowpass(np.gradient(theta, dt), cutoff, sample_rate)
    theta_ddot = lowpass(np.gradient(theta_dot, dt), cutoff, sample_rate)
    return theta_dot, theta_ddot


def _payload_configs(cfg: ActuatorConfig, payloads: Sequence[PayloadSegment]) -> List[Tuple[PayloadSegment, ActuatorConfig]]:
    ordered = sorted(payloads, key=lambda p: p.start)
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise ValueError("Payload segments overlap")
    return [(p, attach_payload(cfg, p.mass, p.radius)) for p in ordered]


def run_exploration(cfg: ActuatorConfig,
                    gains: PDGains,
                    waypoints: Sequence[float],
                    duration: float,
                    perturbation: Optional[PerturbationProfile] = None,
                    sample_rate: float = 20.0,
                    rng: Optional[np.random.Generator] = None,
                    payloads: Sequence[PayloadSegment] = (),
                    torque_noise: float = 0.0,
                    position_noise: float = 0.0,
                    perturbation_threshold: float = 0.02,
                    lowpass_cutoff: float = 4.0,
                    layout: Optional[FeatureLayout] = None) -> Dataset:
    """Simulate PD tracking through waypoints and log an annotated dataset at sample_rate"""
    rng = rng if rng is not None else np.random.default_rng(0)
    perturbation = perturbation or PerturbationProfile()
    lo, hi = cfg.range_of_motion
    if any(w < lo or w > hi for w in waypoints):
        raise ValueError(f"Waypoints must lie within the range of motion [{lo}, {hi}]")

    decimation = int(round(1.0 / (sample_rate * cfg.dt)))
    if decimation < 1 or abs(decimation * cfg.dt * sample_rate - 1.0) > 1e-9:
        raise ValueError("Sample period must be an integer multiple of the integration step")
    n_samples = int(math.floor(duration * sample_rate + 1e-9))
    n_steps = n_samples * decimation
    times = np.arange(n_steps) * cfg.dt
    tau_ext_trace = perturbation.torque_trace(times, cfg.dt, rng)
    reference = reference_trajectory(waypoints, duration)
    payload_cfgs = _payload_configs(cfg, payloads)

    log_theta = np.empty(n_samples)
    log_tau = np.empty(n_samples)
    log_ext = np.empty(n_samples)
    log_mode = np.empty(n_samples, dtype=int)

    state = SimState(theta=float(reference(0.0)[0]))
    active_cfg = cfg
    mode_id = NOMINAL_MODE
    for k in range(n_steps):
        t = times[k]
        active_cfg, mode_id = cfg, NOMINAL_MODE
        for segment, seg_cfg in payload_cfgs:
            if segment.start <= t < segment.end:
                active_cfg, mode_id = seg_cfg, segment.mode_id
                break
        ref_pos, ref_vel = reference(t)
        tau_cmd = gains.kp * (ref_pos - state.theta) + gains.kd * (ref_vel - state.theta_dot)
        tau_ext = float(tau_ext_trace[k])
        if k % decimation == 0:
            i = k // decimation
            log_theta[i] = state.theta
            log_tau[i] = tau_cmd
            log_ext[i] = tau_ext
            log_mode[i] = PERTURBED_MODE if abs(tau_ext) > perturbation_threshold else mode_id
        state = step(state, tau_cmd, tau_ext, cfg.dt, active_cfg)
        if abs(state.theta_dot) > cfg.velocity_limit:
            raise SimulationError(
                f"PD exploration unstable at t={state.t:.3f}s: |θ̇|={abs(state.theta_dot):.2f} rad/s "
                f"exceeds limit {cfg.velocity_limit} (kp={gains.kp}, kd={gains.kd})"
            )

    theta_meas = log_theta + position_noise * rng.standard_normal(n_samples)
    tau_meas = log_tau + torque_noise * rng.standard_normal(n_samples)
    theta_dot, theta_ddot = estimate_derivatives(theta_meas, sample_rate, lowpass_cutoff)

    dataset = Dataset(
        time=np.arange(n_samples) / sample_rate,
        theta=theta_meas,
        theta_dot=theta_dot,
        theta_ddot=theta_ddot,
        tau=tau_meas,
        sample_rate=sample_rate,
        truth_mode=log_mode,
        external_torque=log_ext,
        layout=layout or FeatureLayout(),
        provenance="simulator",
    )
    logger.info(
        "Exploration: %d samples, %d perturbed, %d payload-attached",
        n_samples, int(np.sum(log_mode == PERTURBED_MODE)),
        int(np.sum((log_mode != NOMINAL_MODE) & (log_mode != PERTURBED_MODE))),
    )
    return dataset


@dataclass
class ClosedLoopLog:
    """Inner-rate trace of a closed-loop run, decimated by `decimation`"""
    time: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    tau_cmd: np.ndarray
    tau_ext: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.time[1] - self.time[0]) if len(self.time) > 1 else 0.0


def simulate_closed_loop(cfg: ActuatorConfig,
                         controller: Callable[[float, float], float],
                         duration: float,
                         external: Optional[Callable[[float, SimState], float]] = None,
                         external_trace: Optional[np.ndarray] = None,
                         initial: Optional[SimState] = None,
                         control_rate: float = 1000.0,
                         decimation: int = 10) -> ClosedLoopLog:
    """Run the plant under controller(θ, θ̇) held at control_rate

    External torque comes either from a precomputed per-step trace or from a
    callback of (t, state) evaluated every step (e.g. a coupled drag agent).
    """
    n_steps = int(round(duration / cfg.dt))
    hold = max(1, int(round(1.0 / (control_rate * cfg.dt))))
    n_log = (n_steps + decimation - 1) // decimation
    out = {key: np.empty(n_log) for key in ("time", "theta", "theta_dot", "tau_cmd", "tau_ext")}

    state = initial or SimState()
    tau_cmd = 0.0
    for k in range(n_steps):
        if k % hold == 0:
            tau_cmd = float(controller(state.theta, state.theta_dot))
        if external_trace is not None:
            tau_ext = float(external_trace[k])
        elif external is not None:
            tau_ext = float(external(state.t, state))
        else:
            tau_ext = 0.0
        if k % decimation == 0:
            i = k // decimation
            out["time"][i] = state.t
            out["theta"][i] = state.theta
            out["theta_dot"][i] = state.theta_dot
            out["tau_cmd"][i] = tau_cmd
            out["tau_ext"][i] = tau_ext
        state = step(state, tau_cmd, tau_ext, cfg.dt, cfg)
        if abs(state.theta_dot) > cfg.velocity_limit:
            raise SimulationError(f"Closed loop unstable at t={state.t:.3f}s (|θ̇|={abs(state.theta_dot):.2f})")
    return ClosedLoopLog(**out)
