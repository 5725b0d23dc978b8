#!/usr/bin/env python3
"""
Convert a logged actuator recording to the gpsem dataset format
Usage: python scripts/convert_external_log.py input.csv output.csv [--rate 20] [--cutoff 4]

The input CSV needs columns t, theta and tau (optionally tau_ext). Velocity and
acceleration are estimated from the position trace.
"""

import argparse
import os
import sys

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from data_loader import NOMINAL_MODE, PERTURBED_MODE, Dataset, format_counts, write_dataset  # noqa: E402
from simulator import estimate_derivatives  # noqa: E402

REQUIRED_COLUMNS = ("t", "theta", "tau")


def convert_log(input_csv: str, output_csv: str, sample_rate: float = None, cutoff: float = 4.0,
                threshold: float = 0.02) -> Dataset:
    """Read a raw log, estimate derivatives and write a dataset"""
    frame = pd.read_csv(input_csv)
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Missing column(s): {', '.join(missing)}")
    frame = frame.dropna(subset=list(REQUIRED_COLUMNS)).sort_values("t").reset_index(drop=True)

    time = frame["t"].to_numpy(dtype=float)
    steps = np.diff(time)
    if sample_rate is None:
        sample_rate = 1.0 / float(np.median(steps))
    if np.any(np.abs(steps - 1.0 / sample_rate) > 0.1 / sample_rate):
        raise ValueError("Log is not uniformly sampled at the given rate; resample it first")

    theta = frame["theta"].to_numpy(dtype=float)
    theta_dot, theta_ddot = estimate_derivatives(theta, sample_rate, cutoff)

    truth_mode = external = None
    if "tau_ext" in frame.columns:
        external = frame["tau_ext"].fillna(0.0).to_numpy(dtype=float)
        truth_mode = np.where(np.abs(external) > threshold, PERTURBED_MODE, NOMINAL_MODE)

    dataset = Dataset(
        time=time,
        theta=theta,
        theta_dot=theta_dot,
        theta_ddot=theta_ddot,
        tau=frame["tau"].to_numpy(dtype=float),
        sample_rate=sample_rate,
        truth_mode=truth_mode,
        external_torque=external,
        provenance="external",
    )
    write_dataset(dataset, output_csv)
    return dataset


def main() -> int:
    parser = argparse.ArgumentParser(description="Convert an actuator log to a gpsem dataset")
    parser.add_argument("input_csv")
    parser.add_argument("output_csv")
    parser.add_argument("--rate", type=float, help="sample rate in Hz (default: inferred)")
    parser.add_argument("--cutoff", type=float, default=4.0, help="derivative low-pass cutoff in Hz")
    args = parser.parse_args()

    if not os.path.exists(args.input_csv):
        print(f"❌ Log file not found: {args.input_csv}")
        return 2

    print(f"🔄 Converting actuator log: {args.input_csv}")
    try:
        dataset = convert_log(args.input_csv, args.output_csv, args.rate, args.cutoff)
    except ValueError as e:
        print(f"❌ Conversion failed: {e}")
        return 2

    info = dataset.summary()
    print(f"✅ {info['samples']} samples at {info['sample_rate']:.1f} Hz")
    if "truth_counts" in info:
        print(f"📊 Truth labels: {format_counts(info['truth_counts'])}")
    print(f"📁 Dataset written to {args.output_csv}")
    print("🚀 Next: python app.py identify --dataset " + args.output_csv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
