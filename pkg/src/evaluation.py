"""
Evaluation harness
Classification scoring, impedance rendering tests, equilibrium error under
gravity model error and the impact passivity audit
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from compensation import (
    CompensationPolicy,
    EnergyLedger,
    ImpedanceParams,
    audit_closed_loop,
    energy_audit,
    gravity_model_error,
    run_closed_loop,
)
from data_loader import NOMINAL_MODE, PERTURBED_MODE
from simulator import ActuatorConfig, ClosedLoopLog, PerturbationProfile, SimState, impulse_train

logger = logging.getLogger(__name__)

EXHAUSTIVE_MATCH_LIMIT = 4


@dataclass
class ConfusionCounts:
    """Counts of predicted mode per true mode after label alignment"""
    matrix: np.ndarray
    true_modes: Tuple[int, ...]
    pred_modes: Tuple[int, ...]
    mapping: Dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def count(self, true_mode: int, pred_mode: int) -> int:
        if true_mode not in self.true_modes or pred_mode not in self.pred_modes:
            return 0
        return int(self.matrix[self.true_modes.index(true_mode), self.pred_modes.index(pred_mode)])

    def row_total(self, true_mode: int) -> int:
        if true_mode not in self.true_modes:
            return 0
        return int(self.matrix[self.true_modes.index(true_mode)].sum())

    def rate(self, true_mode: int, pred_mode: int) -> float:
        total = self.row_total(true_mode)
        return self.count(true_mode, pred_mode) / total if total else float("nan")

    @property
    def accuracy(self) -> float:
        correct = sum(self.count(m, m) for m in self.true_modes)
        return correct / self.total if self.total else float("nan")

    def perturbation_rates(self) -> Dict[str, float]:
        """Correctly kept nominal samples and missed perturbed samples"""
        return {
            "correct_nominal": self.rate(NOMINAL_MODE, NOMINAL_MODE),
            "missed_perturbed": 1.0 - self.rate(PERTURBED_MODE, PERTURBED_MODE),
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"true_mode": t, "pred_mode": p, "count": self.count(t, p)}
            for t in self.true_modes for p in self.pred_modes
        ]
        return pd.DataFrame(rows, columns=["true_mode", "pred_mode", "count"])


def _best_assignment(contingency: np.ndarray) -> np.ndarray:
    """Column assigned to each row maximising total agreement"""
    n = contingency.shape[0]
    if n <= EXHAUSTIVE_MATCH_LIMIT:
        best, best_score = None, -1
        for perm in itertools.permutations(range(n)):
            score = contingency[np.arange(n), perm].sum()
            if score > best_score:
                best, best_score = np.array(perm), score
        return best
    rows, cols = linear_sum_assignment(-contingency)
    return cols[np.argsort(rows)]


def align_labels(pred: np.ndarray, truth: np.ndarray) -> Tuple[np.ndarray, Dict[int, int]]:
    """Relabel predicted ids onto truth ids by maximum agreement"""
    pred_ids = np.unique(pred)
    truth_ids = np.unique(truth)
    n = max(len(pred_ids), len(truth_ids))
    contingency = np.zeros((n, n), dtype=int)
    for i, p in enumerate(pred_ids):
        for j, t in enumerate(truth_ids):
            contingency[i, j] = int(np.sum((pred == p) & (truth == t)))
    assignment = _best_assignment(contingency)
    spare = itertools.count(int(truth_ids.max()) + 1)
    mapping = {}
    for i, p in enumerate(pred_ids):
        j = assignment[i]
        mapping[int(p)] = int(truth_ids[j]) if j < len(truth_ids) else next(spare)
    aligned = np.array([mapping[int(p)] for p in pred], dtype=int)
    return aligned, mapping


def score_classification(pred, truth, align: bool = True) -> ConfusionCounts:
    """Confusion counts of predicted against true 1-based mode ids

    `pred` may be a label vector or a (T, K) posterior matrix (argmax is taken).
    """
    pred = np.asarray(pred)
    if pred.ndim == 2:
        pred = np.argmax(pred, axis=1) + 1
    pred = pred.astype(int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError(f"Prediction length {pred.shape[0]} does not match truth length {truth.shape[0]}")
    mapping = {}
    if align and pred.size:
        pred, mapping = align_labels(pred, truth)
    true_modes = tuple(int(m) for m in np.unique(truth))
    pred_modes = tuple(sorted(set(true_modes) | set(int(m) for m in np.unique(pred))))
    matrix = np.zeros((len(true_modes), len(pred_modes)), dtype=int)
    for i, t in enumerate(true_modes):
        for j, p in enumerate(pred_modes):
            matrix[i, j] = int(np.sum((truth == t) & (pred == p)))
    return ConfusionCounts(matrix=matrix, true_modes=true_modes, pred_modes=pred_modes, mapping=mapping)


@dataclass
class RenderingMetrics:
    """Paired uncompensated/compensated metrics of one rendering experiment"""
    test: str
    uncompensated: Dict[str, float]
    compensated: Dict[str, float]
    traces: Dict[str, pd.DataFrame] = field(default_factory=dict)
    extra: Dict[str, float] = field(default_factory=dict)

    def ratio(self, metric: str) -> float:
        base = self.uncompensated[metric]
        return self.compensated[metric] / base if base > 0 else float("nan")

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for condition, metrics in (("uncompensated", self.uncompensated), ("compensated", self.compensated)):
            rows.append({"condition": condition, **metrics})
        return pd.DataFrame(rows)

    def summary(self) -> Dict:
        return {"test": self.test, "uncompensated": self.uncompensated,
                "compensated": self.compensated, **self.extra}


def _trace_frame(log: ClosedLoopLog, **columns) -> pd.DataFrame:
    data = {"t": log.time, "theta": log.theta, "theta_dot": log.theta_dot,
            "tau_cmd": log.tau_cmd, "tau_ext": log.tau_ext}
    data.update(columns)
    return pd.DataFrame(data)


def drag_reference(start: float, end: float, velocity: float, settle: float) -> Tuple[Callable[[float], Tuple[float, float]], float, float]:
    """Hold, sweep start→end, hold, sweep back; returns (reference, reversal time, duration)"""
    sweep = abs(end - start) / velocity
    direction = math.copysign(1.0, end - start)
    reversal = 2.0 * settle + sweep
    duration = reversal + sweep + settle

    def reference(t: float) -> Tuple[float, float]:
        if t < settle:
            return start, 0.0
        if t < settle + sweep:
            return start + direction * velocity * (t - settle), direction * velocity
        if t < reversal:
            return end, 0.0
        if t < reversal + sweep:
            return end - direction * velocity * (t - reversal), -direction * velocity
        return start, 0.0

    return reference, reversal, duration


def _drag_run(policy: CompensationPolicy, cfg: ActuatorConfig, reference, duration: float,
              stiffness: float, damping: float, start: float, control_rate: float) -> ClosedLoopLog:
    def coupling(t: float, state: SimState) -> float:
        pos, vel = reference(t)
        return stiffness * (pos - state.theta) + damping * (vel - state.theta_dot)

    return run_closed_loop(policy, cfg, duration, external=coupling,
                           initial=SimState(theta=start), control_rate=control_rate)


def zero_impedance_test(policy: CompensationPolicy,
                        cfg: ActuatorConfig,
                        drag_velocity: float = 0.1,
                        theta_range: Optional[Tuple[float, float]] = None,
                        coupling_stiffness: float = 200.0,
                        coupling_damping: Optional[float] = None,
                        settle: float = 1.0,
                        reversal_window: float = 1.0,
                        control_rate: float = 1000.0) -> RenderingMetrics:
    """Drag the load at constant velocity with and without feedforward and compare port torque"""
    if drag_velocity <= 0:
        raise ValueError("Drag velocity must be positive")
    lo, hi = theta_range if theta_range is not None else tuple(0.8 * v for v in cfg.range_of_motion)
    damping = coupling_damping if coupling_damping is not None else 2.0 * math.sqrt(coupling_stiffness * cfg.inertia)
    reference, reversal, duration = drag_reference(lo, hi, drag_velocity, settle)
    zero = ImpedanceParams()

    results, traces = {}, {}
    for name, candidate in (("uncompensated", policy.without_feedforward()), ("compensated", policy)):
        log = _drag_run(candidate.with_impedance(zero), cfg, reference, duration,
                        coupling_stiffness, damping, lo, control_rate)
        moving = ((log.time >= settle) & (log.time < reversal - settle)) | \
                 ((log.time >= reversal) & (log.time < duration - settle))
        after_reversal = (log.time >= reversal) & (log.time < reversal + reversal_window)
        port = log.tau_ext
        results[name] = {
            "rms_port_torque": float(np.sqrt(np.mean(port[moving] ** 2))),
            "reversal_peak": float(np.max(np.abs(port[after_reversal]))),
        }
        traces[name] = _trace_frame(log, reference=[reference(t)[0] for t in log.time])
        logger.info("Zero impedance (%s): RMS %.4f N·m", name, results[name]["rms_port_torque"])

    metrics = RenderingMetrics("zero_impedance", results["uncompensated"], results["compensated"], traces)
    metrics.extra = {"rms_ratio": metrics.ratio("rms_port_torque"), "drag_velocity": drag_velocity}
    return metrics


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def stiffness_torque_trace(times: np.ndarray, amplitude: float, frequency: float, onset: float) -> np.ndarray:
    envelope = smoothstep(times / onset) if onset > 0 else np.ones_like(times)
    return amplitude * envelope * np.sin(2.0 * math.pi * frequency * times)


def hysteresis_width(tau: np.ndarray, deflection: np.ndarray, levels: int = 200) -> float:
    """Largest deflection gap between the unloading and reloading branches at equal torque"""
    if tau.size < 4:
        return 0.0
    peak = int(np.argmax(tau))
    trough = peak + int(np.argmin(tau[peak:]))
    unload_tau, unload_x = tau[peak:trough + 1], deflection[peak:trough + 1]
    reload_tau, reload_x = tau[trough:], deflection[trough:]
    if unload_tau.size < 2 or reload_tau.size < 2:
        return 0.0
    top = min(unload_tau.max(), reload_tau.max())
    bottom = max(unload_tau.min(), reload_tau.min())
    if top <= bottom:
        return 0.0
    grid = np.linspace(bottom, top, levels)
    order_u = np.argsort(unload_tau, kind="stable")
    order_r = np.argsort(reload_tau, kind="stable")
    x_unload = np.interp(grid, unload_tau[order_u], unload_x[order_u])
    x_reload = np.interp(grid, reload_tau[order_r], reload_x[order_r])
    return float(np.max(np.abs(x_unload - x_reload)))


def stiffness_rendering_test(policy: CompensationPolicy,
                             cfg: ActuatorConfig,
                             stiffness: float = 3.5,
                             amplitude: float = 2.0,
                             frequency: float = 0.05,
                             cycles: float = 1.25,
                             onset: Optional[float] = None,
                             control_rate: float = 1000.0) -> RenderingMetrics:
    """Quasi-static sinusoidal external torque against a rendered spring"""
    if stiffness <= 0:
        raise ValueError("Stiffness rendering needs K_imp > 0")
    impedance = ImpedanceParams(stiffness=stiffness, damping=policy.impedance.damping,
                                setpoint=policy.impedance.setpoint)
    duration = cycles / frequency
    onset = 0.25 / frequency if onset is None else onset
    times = np.arange(int(round(duration / cfg.dt))) * cfg.dt
    trace = stiffness_torque_trace(times, amplitude, frequency, onset)

    results, traces = {}, {}
    for name, candidate in (("uncompensated", policy.without_feedforward()), ("compensated", policy)):
        candidate = candidate.with_impedance(impedance)
        log = run_closed_loop(candidate, cfg, duration, external_trace=trace,
                              initial=SimState(theta=impedance.setpoint), control_rate=control_rate)
        deflection = log.theta - impedance.setpoint
        results[name] = {
            "max_deviation": float(np.max(np.abs(log.tau_ext - stiffness * deflection))),
            "hysteresis": hysteresis_width(log.tau_ext, deflection),
        }
        traces[name] = _trace_frame(log, deflection=deflection, ideal_torque=stiffness * deflection)
        logger.info("Stiffness rendering (%s): max deviation %.4f N·m, hysteresis %.4f rad",
                    name, results[name]["max_deviation"], results[name]["hysteresis"])

    swept = np.linspace(-amplitude / stiffness, amplitude / stiffness, 101) + impedance.setpoint
    min_gamma = float(min(cfg.coulomb_modulation(t) for t in swept))
    metrics = RenderingMetrics("stiffness", results["uncompensated"], results["compensated"], traces)
    metrics.extra = {"stiffness": stiffness, "hysteresis_bound": 2.0 * cfg.coulomb * min_gamma / stiffness}
    return metrics


def equilibrium_error_report(model_error: Callable[[float], float],
                             stiffness_values: Sequence[float],
                             setpoint: float = 0.0,
                             max_iter: int = 1000,
                             tol: float = 1e-12) -> pd.DataFrame:
    """Equilibrium deflection Δ = g̃(θ_des + Δ)/K_imp per stiffness, by fixed-point iteration"""
    rows = []
    for stiffness in stiffness_values:
        if stiffness <= 0:
            raise ValueError("Stiffness values must be positive")
        delta, converged, iterations = 0.0, False, 0
        for iterations in range(1, max_iter + 1):
            new = float(model_error(setpoint + delta)) / stiffness
            if not math.isfinite(new):
                break
            step = abs(new - delta)
            delta = new
            if step <= tol * max(1.0, abs(delta)):
                converged = True
                break
        if not converged:
            logger.warning("Equilibrium fixed point did not converge for K_imp=%.4g", stiffness)
        rows.append({
            "stiffness": float(stiffness),
            "deflection": delta,
            "converged": converged,
            "iterations": iterations,
        })
    return pd.DataFrame(rows, columns=["stiffness", "deflection", "converged", "iterations"])


def gravity_error_function(policy: CompensationPolicy, cfg: ActuatorConfig) -> Callable[[float], float]:
    return lambda theta: float(gravity_model_error(policy, cfg, theta))


@dataclass
class PassivityResult:
    ledger: EnergyLedger
    interaction: EnergyLedger
    trace: pd.DataFrame

    @property
    def passed(self) -> bool:
        return not self.ledger.violation

    def summary(self) -> Dict:
        return {
            "verdict": "pass" if self.passed else "fail",
            "S0": self.ledger.initial_storage,
            "min_margin": self.ledger.min_margin,
            "actuator_energy": self.ledger.total_energy,
            "interaction_energy": self.interaction.total_energy,
            "tolerance": self.ledger.tolerance,
        }


def default_impulses(cfg: ActuatorConfig, duration: float = 60.0, period: float = 2.0,
                     width: float = 0.05, factor: float = 5.0) -> PerturbationProfile:
    """Half-sine impacts at `factor`× the breakaway torque at θ = 0"""
    return impulse_train(duration, period, factor * cfg.breakaway(0.0), width)


def passivity_impulse_test(policy: CompensationPolicy,
                           cfg: ActuatorConfig,
                           impulses: Optional[PerturbationProfile] = None,
                           duration: float = 60.0,
                           tolerance: float = 1e-3,
                           control_rate: float = 1000.0,
                           rng: Optional[np.random.Generator] = None) -> PassivityResult:
    """Impact train on the compensated actuator, audited at the actuator port"""
    impulses = impulses if impulses is not None else default_impulses(cfg, duration)
    times = np.arange(int(round(duration / cfg.dt))) * cfg.dt
    trace = impulses.torque_trace(times, cfg.dt, rng)
    log = run_closed_loop(policy, cfg, duration, external_trace=trace,
                          initial=SimState(theta=policy.impedance.setpoint), control_rate=control_rate)
    ledger = audit_closed_loop(policy, log, tolerance)
    interaction = energy_audit(log.time, log.tau_ext, log.theta_dot, tolerance=tolerance)
    frame = _trace_frame(
        log,
        actuator_power=ledger.power,
        actuator_energy=ledger.energy,
        interaction_power=interaction.power,
        interaction_energy=interaction.energy,
        margin=ledger.margin,
    )
    result = PassivityResult(ledger=ledger, interaction=interaction, trace=frame)
    logger.info("Passivity audit: %s (min margin %.3e J, %d impacts)",
                result.summary()["verdict"], ledger.min_margin, len(impulses))
    return result
