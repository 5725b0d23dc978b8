"""
Dataset loading utilities for actuator identification
Datasets are CSV with a one-line JSON header; model bundles are JSON
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BUNDLE_SCHEMA_VERSION = 1
HEADER_PREFIX = "# gpsem-dataset "
NOMINAL_MODE = 1
PERTURBED_MODE = 2


class DatasetFormatError(ValueError):
    """Dataset or bundle file does not match the declared schema"""


@dataclass(frozen=True)
class FeatureLayout:
    """Feature order [θ̈, θ̇, θ] with optional sgn(θ̇) appended"""
    sgn_feature: bool = False

    @property
    def names(self) -> tuple:
        base = ("theta_ddot", "theta_dot", "theta")
        return base + ("sgn_theta_dot",) if self.sgn_feature else base

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def position_index(self) -> int:
        return 2

    @property
    def sgn_index(self) -> Optional[int]:
        return 3 if self.sgn_feature else None

    @property
    def label(self) -> str:
        return "sgn" if self.sgn_feature else "base"

    @classmethod
    def from_label(cls, label: str) -> "FeatureLayout":
        if label not in ("base", "sgn"):
            raise DatasetFormatError(f"Unknown feature layout: {label}")
        return cls(sgn_feature=(label == "sgn"))

    def query(self, theta: float, theta_dot: float = 0.0, theta_ddot: float = 0.0, sgn: float = 0.0) -> np.ndarray:
        """Raw feature vector for one state"""
        values = [theta_ddot, theta_dot, theta]
        if self.sgn_feature:
            values.append(sgn)
        return np.array(values, dtype=float)


@dataclass(eq=False)
class Dataset:
    """Timestamped samples of state and applied torque, with optional ground truth"""
    time: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_ddot: np.ndarray
    tau: np.ndarray
    sample_rate: float
    truth_mode: Optional[np.ndarray] = None
    external_torque: Optional[np.ndarray] = None
    layout: FeatureLayout = field(default_factory=FeatureLayout)
    provenance: str = "external"

    def __post_init__(self):
        arrays = ("time", "theta", "theta_dot", "theta_ddot", "tau")
        for name in arrays:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.time)
        for name in arrays:
            value = getattr(self, name)
            if value.shape != (n,):
                raise ValueError(f"Column {name} has shape {value.shape}, expected ({n},)")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"Column {name} contains non-finite values")
        if n > 1 and not np.all(np.diff(self.time) > 0):
            raise ValueError("Sample times must be strictly increasing")
        if (self.truth_mode is None) != (self.external_torque is None):
            raise ValueError("Truth mode and external torque must be given together")
        if self.truth_mode is not None:
            self.truth_mode = np.asarray(self.truth_mode, dtype=int)
            self.external_torque = np.asarray(self.external_torque, dtype=float)
            if self.truth_mode.shape != (n,) or self.external_torque.shape != (n,):
                raise ValueError("Truth columns must match the dataset length")
        if self.sample_rate <= 0:
            raise ValueError("Sample rate must be positive")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def has_truth(self) -> bool:
        return self.truth_mode is not None

    @property
    def sgn_theta_dot(self) -> np.ndarray:
        return np.sign(self.theta_dot)

    def features(self, layout: Optional[FeatureLayout] = None) -> np.ndarray:
        """Raw feature matrix (T, d) in the layout order"""
        layout = layout or self.layout
        columns = [self.theta_ddot, self.theta_dot, self.theta]
        if layout.sgn_feature:
            columns.append(self.sgn_theta_dot)
        return np.column_stack(columns)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return replace(
            self,
            time=self.time[idx],
            theta=self.theta[idx],
            theta_dot=self.theta_dot[idx],
            theta_ddot=self.theta_ddot[idx],
            tau=self.tau[idx],
            truth_mode=None if self.truth_mode is None else self.truth_mode[idx],
            external_torque=None if self.external_torque is None else self.external_torque[idx],
        )

    def with_layout(self, layout: FeatureLayout) -> "Dataset":
        return replace(self, layout=layout)

    def to_frame(self) -> pd.DataFrame:
        data = {
            "t": self.time,
            "theta": self.theta,
            "theta_dot": self.theta_dot,
            "theta_ddot": self.theta_ddot,
        }
        if self.layout.sgn_feature:
            data["sgn_theta_dot"] = self.sgn_theta_dot
        data["tau"] = self.tau
        if self.has_truth:
            data["truth_mode"] = self.truth_mode
            data["external_torque"] = self.external_torque
        return pd.DataFrame(data)

    def summary(self) -> Dict[str, Any]:
        info = {
            "samples": len(self),
            "duration_s": float(self.time[-1] - self.time[0]) if len(self) else 0.0,
            "sample_rate": self.sample_rate,
            "feature_layout": self.layout.label,
            "provenance": self.provenance,
        }
        if self.has_truth:
            modes, counts = np.unique(self.truth_mode, return_counts=True)
            info["truth_counts"] = {int(m): int(c) for m, c in zip(modes, counts)}
        return info


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    """Per-coordinate standardisation; the sgn coordinate passes through unchanged"""
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, layout: FeatureLayout) -> "FeatureScaler":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        if layout.sgn_index is not None:
            mean[layout.sgn_index] = 0.0
            scale[layout.sgn_index] = 1.0
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "FeatureScaler":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def to_dict(self) -> Dict[str, list]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "FeatureScaler":
        return cls(mean=np.asarray(data["mean"], dtype=float), scale=np.asarray(data["scale"], dtype=float))


def _expected_columns(layout: FeatureLayout, has_truth: bool) -> list:
    columns = ["t", "theta", "theta_dot", "theta_ddot"]
    if layout.sgn_feature:
        columns.append("sgn_theta_dot")
    columns.append("tau")
    if has_truth:
        columns += ["truth_mode", "external_torque"]
    return columns


def write_dataset(dataset: Dataset, path: str, config_hash: Optional[str] = None) -> str:
    """Write a dataset as header line + CSV; floats keep full round-trip precision"""
    header = {
        "schema_version": SCHEMA_VERSION,
        "sample_rate": dataset.sample_rate,
        "feature_layout": dataset.layout.label,
        "provenance": dataset.provenance,
        "has_truth": dataset.has_truth,
        "config_hash": config_hash,
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(HEADER_PREFIX + json.dumps(header, sort_keys=True) + "\n")
        dataset.to_frame().to_csv(f, index=False, float_format=None, lineterminator="\n")
    logger.info("Wrote %d samples to %s", len(dataset), path)
    return path


def read_dataset_header(path: str) -> Dict[str, Any]:
    with open(path, "r") as f:
        first = f.readline()
    if not first.startswith(HEADER_PREFIX):
        raise DatasetFormatError(f"{path} has no dataset header line")
    try:
        header = json.loads(first[len(HEADER_PREFIX):])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"Invalid dataset header in {path}: {e}")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"Unsupported schema version {header.get('schema_version')} (expected {SCHEMA_VERSION})"
        )
    return header


def read_dataset(path: str) -> Dataset:
    """Load a dataset written by write_dataset, checking schema and columns"""
    header = read_dataset_header(path)
    layout = FeatureLayout.from_label(header["feature_layout"])
    has_truth = bool(header["has_truth"])
    frame = pd.read_csv(path, skiprows=1, float_precision="round_trip")
    expected = _expected_columns(layout, has_truth)
    if list(frame.columns) != expected:
        raise DatasetFormatError(f"Columns {list(frame.columns)} do not match declared layout {expected}")
    return Dataset(
        time=frame["t"].to_numpy(dtype=float),
        theta=frame["theta"].to_numpy(dtype=float),
        theta_dot=frame["theta_dot"].to_numpy(dtype=float),
        theta_ddot=frame["theta_ddot"].to_numpy(dtype=float),
        tau=frame["tau"].to_numpy(dtype=float),
        sample_rate=float(header["sample_rate"]),
        truth_mode=frame["truth_mode"].to_numpy(dtype=int) if has_truth else None,
        external_torque=frame["external_torque"].to_numpy(dtype=float) if has_truth else None,
        layout=layout,
        provenance=header.get("provenance", "external"),
    )


def write_bundle(bundle: Dict[str, Any], path: str) -> str:
    """Write an identification bundle (JSON, round-trip float precision)"""
    payload = dict(bundle)
    payload["schema_version"] = BUNDLE_SCHEMA_VERSION
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info("Wrote model bundle to %s", path)
    return path


def read_bundle(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            bundle = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"Invalid bundle JSON in {path}: {e}")
    if bundle.get("schema_version") != BUNDLE_SCHEMA_VERSION:
        raise DatasetFormatError(f"Unsupported bundle schema version {bundle.get('schema_version')}")
    return bundle


def write_report(frame: pd.DataFrame, path: str, config_hash: Optional[str] = None) -> str:
    """CSV report with a leading comment line carrying the config hash"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        frame.to_csv(f, index=False, lineterminator="\n")
    return path


def read_report(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def format_counts(counts: Dict[int, int]) -> str:
    return ", ".join(f"mode {mode}: {count}" for mode, count in sorted(counts.items()))
