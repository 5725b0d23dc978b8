"""
Actuator identification pipeline
Connects simulation → SEM identification → classification → compensation → evaluation
and writes datasets, bundles, CSV reports, summaries and figures
"""

import json
import logging
import os
from typing import Any, Callable, Dict, Optional

import numpy as np
import pandas as pd

from compensation import CompensationPolicy, ImpedanceParams, audit_closed_loop, run_closed_loop
from data_loader import (
    Dataset,
    FeatureLayout,
    read_bundle,
    read_dataset,
    write_bundle,
    write_dataset,
    write_report,
)
from evaluation import (
    ConfusionCounts,
    default_impulses,
    equilibrium_error_report,
    gravity_error_function,
    passivity_impulse_test,
    score_classification,
    stiffness_rendering_test,
    zero_impedance_test,
)
from figures import (
    classification_figure,
    convergence_figure,
    equilibrium_figure,
    paired_figure,
    passivity_figure,
    save_figure,
)
from mixture_sem import (
    MixtureData,
    MixtureState,
    SEMOptions,
    classify,
    from_bundle,
    mode_ids,
    posterior_labels,
    run_sem,
    to_bundle,
)
from scenario import RunConfig, ScenarioConfig, config_hash, default_scenario
from simulator import SimulationError, run_exploration

logger = logging.getLogger(__name__)

__version__ = "0.1.0"
EVALUATIONS = ("classification", "zero-imp", "stiffness", "passivity", "equilibrium")


def error_kind(error: Exception) -> str:
    """validation | numerical | internal"""
    if isinstance(error, (np.linalg.LinAlgError, SimulationError, FloatingPointError)):
        return "numerical"
    if isinstance(error, (ValueError, KeyError, FileNotFoundError)):
        return "validation"
    return "internal"


class ActuatorPipeline:
    """Reproducible experiment runner for one scenario and run configuration"""

    def __init__(self,
                 scenario: Optional[ScenarioConfig] = None,
                 run: Optional[RunConfig] = None,
                 output_dir: Optional[str] = None,
                 write_figures: bool = True):
        self.scenario = scenario or default_scenario()
        self.run = run or RunConfig.resolve(self.scenario)
        self.output_dir = output_dir or self.run.output_dir
        self.write_figures = write_figures
        self.layout = FeatureLayout(sgn_feature=self.run.sgn_feature)
        self.config_hash = config_hash(self.scenario, self.run)
        self.files_written = []

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _rng(self) -> np.random.Generator:
        return np.random.default_rng(self.run.seed)

    def _record(self, path: str) -> str:
        self.files_written.append(path)
        return path

    def _failure(self, command: str, error: Exception) -> Dict[str, Any]:
        kind = error_kind(error)
        logger.error("%s failed (%s): %s", command, kind, error)
        return {"success": False, "command": command, "error": str(error), "error_kind": kind}

    def _guard(self, command: str, body: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
        try:
            result = body()
            result.setdefault("success", True)
            result.setdefault("command", command)
            result.setdefault("config_hash", self.config_hash)
            return result
        except Exception as e:
            return self._failure(command, e)

    def sem_options(self) -> SEMOptions:
        return SEMOptions(
            n_modes=self.run.modes,
            stay_probability=self.run.stay_probability,
            iterations=self.run.iterations,
            disturbance=self.run.disturbance,
            n_init=self.run.restarts,
        )

    def write_summary(self, command: str, summary: Dict[str, Any], name: str = "summary.json") -> str:
        path = self._path(name)
        os.makedirs(self.output_dir, exist_ok=True)
        payload = {"command": command, "config_hash": self.config_hash, "scenario": self.scenario.name,
                   "seed": self.run.seed, "results": summary}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        return self._record(path)

    def _figure(self, fig, name: str) -> Optional[str]:
        if not self.write_figures:
            return None
        return self._record(save_figure(fig, self._path(name)))

    def _report(self, frame: pd.DataFrame, name: str) -> str:
        return self._record(write_report(frame, self._path(name), self.config_hash))

    # ------------------------------------------------------------------ commands

    def simulate(self, out_path: Optional[str] = None) -> Dict[str, Any]:
        """Run the PD exploration of the scenario and write the annotated dataset"""
        def body():
            s = self.scenario
            ex = s.exploration
            dataset = run_exploration(
                s.actuator, s.pd, ex.waypoints, ex.duration,
                perturbation=s.perturbation_profile,
                sample_rate=ex.sample_rate,
                rng=self._rng(),
                payloads=s.payloads,
                torque_noise=ex.torque_noise,
                position_noise=ex.position_noise,
                perturbation_threshold=ex.perturbation_threshold,
                lowpass_cutoff=ex.lowpass_cutoff,
                layout=self.layout,
            )
            path = self._record(write_dataset(dataset, out_path or self._path("dataset.csv"), self.config_hash))
            return {"dataset_path": path, "dataset": dataset, "summary": dataset.summary()}
        return self._guard("simulate", body)

    def load_dataset(self, path: str) -> Dataset:
        return read_dataset(path).with_layout(self.layout)

    def identify(self, dataset_path: str, bundle_path: Optional[str] = None) -> Dict[str, Any]:
        """Run SEM on a dataset and write the model bundle"""
        def body():
            dataset = self.load_dataset(dataset_path)
            state = run_sem(dataset, self.sem_options(), self._rng(), self.layout)
            bundle = to_bundle(state, dataset, self.config_hash)
            path = self._record(write_bundle(bundle, bundle_path or self._path("bundle.json")))

            summary = {
                "modes": state.n_modes,
                "mode_sizes": state.mode_sizes().tolist(),
                "hyperparams": [h.to_dict() for h in state.hyperparams],
                "stay_probability": state.stay_probability,
                "disturbance_cov": state.disturbance_cov,
                "final_log_likelihood": state.trace[-1] if state.trace else None,
            }
            if dataset.has_truth:
                counts = _score(state, state.labels, dataset.truth_mode)
                summary["label_accuracy"] = counts.accuracy
                if state.has_disturbance:
                    summary.update(counts.perturbation_rates())
            self._report(pd.DataFrame({"iteration": np.arange(1, len(state.trace) + 1),
                                       "log_likelihood": state.trace}), "sem_trace.csv")
            self._figure(convergence_figure(state.trace), "sem_trace.html")
            self.write_summary("identify", summary)
            return {"bundle_path": path, "state": state, "summary": summary}
        return self._guard("identify", body)

    def _posteriors(self, bundle: Dict, dataset: Optional[Dataset]):
        state, train = from_bundle(bundle)
        training = bundle["training"]
        if dataset is None or _same_training_set(training, dataset, state.layout):
            probs = classify(state, train)
            time = np.asarray(training["time"], dtype=float)
            tau = train.tau
        else:
            query = MixtureData.prepare(dataset, state.scaler, state.layout)
            probs = classify(state, train, query)
            time, tau = dataset.time, dataset.tau
        return state, probs, time, tau

    def classify(self, bundle_path: str, dataset_path: Optional[str] = None) -> Dict[str, Any]:
        """Mode posteriors for the training set or a new dataset"""
        def body():
            bundle = read_bundle(bundle_path)
            dataset = self.load_dataset(dataset_path) if dataset_path else None
            state, probs, time, tau = self._posteriors(bundle, dataset)
            ids = mode_ids(state, np.arange(probs.shape[1]))
            frame = pd.DataFrame({"t": time, "tau": tau, "pred_mode": ids[posterior_labels(probs)]})
            for k in range(probs.shape[1]):
                frame[f"p_mode_{ids[k]}"] = probs[:, k]
            counts_by_mode = frame["pred_mode"].value_counts().sort_index()
            summary = {"samples": len(frame),
                       "predicted_counts": {int(k): int(v) for k, v in counts_by_mode.items()}}
            if dataset is not None and dataset.has_truth:
                frame["truth_mode"] = dataset.truth_mode
                counts = _score(state, posterior_labels(probs), dataset.truth_mode)
                self._report(counts.to_frame(), "classification.csv")
                summary["accuracy"] = counts.accuracy
            path = self._report(frame, "posteriors.csv")
            self._figure(classification_figure(frame), "classification.html")
            self.write_summary("classify", summary)
            return {"report_path": path, "posteriors": probs, "summary": summary}
        return self._guard("classify", body)

    def load_policy(self, bundle_path: Optional[str] = None,
                    impedance: Optional[ImpedanceParams] = None) -> CompensationPolicy:
        impedance = impedance or self.scenario.impedance
        if bundle_path is None:
            return CompensationPolicy.uncompensated(self.layout, impedance)
        return CompensationPolicy.from_bundle(read_bundle(bundle_path), impedance)

    def compensate(self, bundle_path: Optional[str] = None, duration: Optional[float] = None) -> Dict[str, Any]:
        """Closed-loop run of the policy against the scenario's external torque schedule"""
        def body():
            policy = self.load_policy(bundle_path)
            cfg = self.scenario.actuator
            ev = self.scenario.evaluation
            duration_s = duration or ev.compensate_duration
            times = np.arange(int(round(duration_s / cfg.dt))) * cfg.dt
            trace = self.scenario.perturbation_profile.torque_trace(times, cfg.dt, self._rng())
            log = run_closed_loop(policy, cfg, duration_s, external_trace=trace, control_rate=ev.control_rate)
            ledger = audit_closed_loop(policy, log, ev.tolerance)
            frame = pd.DataFrame({"t": log.time, "theta": log.theta, "theta_dot": log.theta_dot,
                                  "tau_cmd": log.tau_cmd, "tau_ext": log.tau_ext,
                                  "power": ledger.power, "energy": ledger.energy, "margin": ledger.margin})
            path = self._report(frame, "compensate_trace.csv")
            summary = {"compensated": policy.is_compensated, **ledger.summary()}
            self.write_summary("compensate", summary)
            return {"report_path": path, "ledger": ledger, "summary": summary}
        return self._guard("compensate", body)

    # ---------------------------------------------------------------- evaluation

    def evaluate(self, which: str = "all", bundle_path: Optional[str] = None,
                 dataset_path: Optional[str] = None) -> Dict[str, Any]:
        """Run one evaluation (or all) and write its reports"""
        def body():
            selected = EVALUATIONS if which == "all" else (which,)
            unknown = [w for w in selected if w not in EVALUATIONS]
            if unknown:
                raise ValueError(f"Unknown evaluation '{unknown[0]}', choose from {', '.join(EVALUATIONS)} or all")
            handlers = {
                "classification": lambda: self._evaluate_classification(bundle_path, dataset_path),
                "zero-imp": lambda: self._evaluate_zero_impedance(bundle_path),
                "stiffness": lambda: self._evaluate_stiffness(bundle_path),
                "passivity": lambda: self._evaluate_passivity(bundle_path),
                "equilibrium": lambda: self._evaluate_equilibrium(bundle_path),
            }
            results = {name: handlers[name]() for name in selected}
            self.write_summary(f"evaluate:{which}", results)
            return {"results": results, "summary": results}
        return self._guard("evaluate", body)

    def _evaluate_classification(self, bundle_path, dataset_path) -> Dict[str, Any]:
        if bundle_path is None or dataset_path is None:
            raise ValueError("Classification evaluation needs --bundle and --dataset")
        dataset = self.load_dataset(dataset_path)
        if not dataset.has_truth:
            raise ValueError("Classification evaluation needs a dataset with truth columns")
        state, probs, _, _ = self._posteriors(read_bundle(bundle_path), dataset)
        counts = _score(state, posterior_labels(probs), dataset.truth_mode)
        self._report(counts.to_frame(), "classification.csv")
        return {"accuracy": counts.accuracy, **counts.perturbation_rates(),
                "counts": counts.to_frame().to_dict(orient="records")}

    def _evaluate_zero_impedance(self, bundle_path) -> Dict[str, Any]:
        ev = self.scenario.evaluation
        metrics = zero_impedance_test(self.load_policy(bundle_path), self.scenario.actuator,
                                      drag_velocity=ev.drag_velocity, coupling_stiffness=ev.coupling_stiffness,
                                      settle=ev.settle, control_rate=ev.control_rate)
        self._report(metrics.to_frame(), "zero_impedance.csv")
        self._report(_stack_traces(metrics.traces), "zero_impedance_trace.csv")
        self._figure(paired_figure(metrics.traces, "theta", "tau_ext", "Rendering of zero impedance"),
                     "zero_impedance.html")
        return metrics.summary()

    def _evaluate_stiffness(self, bundle_path) -> Dict[str, Any]:
        ev = self.scenario.evaluation
        metrics = stiffness_rendering_test(self.load_policy(bundle_path), self.scenario.actuator,
                                           stiffness=ev.stiffness, amplitude=ev.stiffness_amplitude,
                                           frequency=ev.stiffness_frequency, control_rate=ev.control_rate)
        self._report(metrics.to_frame(), "stiffness.csv")
        self._report(_stack_traces(metrics.traces), "stiffness_trace.csv")
        self._figure(paired_figure(metrics.traces, "deflection", "tau_ext",
                                   f"Rendering of pure stiffness K_imp={ev.stiffness}", ideal="ideal_torque"),
                     "stiffness.html")
        return metrics.summary()

    def _evaluate_passivity(self, bundle_path) -> Dict[str, Any]:
        ev = self.scenario.evaluation
        cfg = self.scenario.actuator
        policy = self.load_policy(bundle_path, ImpedanceParams(stiffness=self.scenario.impedance.stiffness,
                                                                setpoint=self.scenario.impedance.setpoint))
        impulses = default_impulses(cfg, ev.passivity_duration, ev.impulse_period, ev.impulse_width, ev.impulse_factor)
        rows, summary = [], {}
        for name, candidate in (("policy", policy), ("viscous_injection", policy.with_viscous_gain(2.0 * cfg.viscous))):
            result = passivity_impulse_test(candidate, cfg, impulses, ev.passivity_duration, ev.tolerance,
                                            ev.control_rate, self._rng())
            rows.append({"condition": name, **result.summary()})
            summary[name] = result.summary()
            if name == "policy":
                self._report(result.trace, "passivity_trace.csv")
                self._figure(passivity_figure(result.trace), "passivity.html")
        self._report(pd.DataFrame(rows), "passivity.csv")
        return summary

    def _evaluate_equilibrium(self, bundle_path) -> Dict[str, Any]:
        ev = self.scenario.evaluation
        policy = self.load_policy(bundle_path)
        table = equilibrium_error_report(gravity_error_function(policy, self.scenario.actuator),
                                         ev.equilibrium_stiffness, setpoint=ev.equilibrium_setpoint)
        self._report(table, "equilibrium.csv")
        self._figure(equilibrium_figure(table), "equilibrium.html")
        return {"rows": table.to_dict(orient="records"), "all_converged": bool(table["converged"].all())}

    def get_stats(self) -> Dict[str, Any]:
        """Pipeline configuration at a glance"""
        return {
            "scenario": self.scenario.name,
            "config_hash": self.config_hash,
            "seed": self.run.seed,
            "modes": self.run.modes,
            "stay_probability": self.run.stay_probability,
            "iterations": self.run.iterations,
            "disturbance_mode": self.sem_options().has_disturbance,
            "feature_layout": self.layout.label,
            "output_dir": self.output_dir,
            "files_written": len(self.files_written),
        }


def _score(state: MixtureState, labels, truth) -> ConfusionCounts:
    """Confusion counts in data-file mode ids

    With a disturbance mode the perturbed id is fixed, so no alignment is done.
    """
    return score_classification(mode_ids(state, labels), truth, align=not state.has_disturbance)


def _same_training_set(training: Dict, dataset: Dataset, layout: FeatureLayout) -> bool:
    features = np.asarray(training["features"], dtype=float)
    return features.shape == dataset.features(layout).shape and np.array_equal(features, dataset.features(layout)) \
        and np.array_equal(np.asarray(training["tau"], dtype=float), dataset.tau)


def _stack_traces(traces: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    return pd.concat([frame.assign(condition=name) for name, frame in traces.items()], ignore_index=True)


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")
