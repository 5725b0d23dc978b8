"""
Plot-data figures
Static HTML exports of every evaluation trace
"""

import logging
import os
from typing import Dict, Optional

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)


def save_figure(fig: go.Figure, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.write_html(path, include_plotlyjs="cdn")
    logger.info("Wrote figure %s", path)
    return path


def classification_figure(frame: pd.DataFrame, title: str = "Mode classification") -> go.Figure:
    """Torque over time coloured by predicted mode (frame: t, tau, pred_mode[, truth_mode])"""
    data = frame.copy()
    data["pred_mode"] = data["pred_mode"].astype(str)
    fig = px.scatter(data, x="t", y="tau", color="pred_mode", title=title,
                     labels={"t": "time [s]", "tau": "torque [N·m]", "pred_mode": "mode"})
    if "truth_mode" in data:
        perturbed = data[data["truth_mode"] != 1]
        fig.add_trace(go.Scatter(x=perturbed["t"], y=perturbed["tau"], mode="markers", name="truth: not nominal",
                                 marker=dict(symbol="circle-open", size=11, color="black")))
    fig.update_layout(height=400)
    return fig


def convergence_figure(trace) -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=np.arange(1, len(trace) + 1), y=list(trace), mode="lines+markers",
                             name="sample log-likelihood"))
    fig.update_layout(title="SEM convergence", xaxis_title="iteration", yaxis_title="log-likelihood", height=400)
    return fig


def paired_figure(traces: Dict[str, pd.DataFrame], x: str, y: str, title: str,
                  ideal: Optional[str] = None) -> go.Figure:
    """Uncompensated vs compensated traces on one axis"""
    fig = go.Figure()
    for name, frame in traces.items():
        fig.add_trace(go.Scatter(x=frame[x], y=frame[y], name=name, mode="lines"))
    if ideal is not None:
        frame = next(iter(traces.values()))
        fig.add_trace(go.Scatter(x=frame[x], y=frame[ideal], name="ideal", mode="lines",
                                 line=dict(dash="dash", color="gray")))
    fig.update_layout(title=title, xaxis_title=x, yaxis_title=y, height=400)
    return fig


def passivity_figure(frame: pd.DataFrame) -> go.Figure:
    """Power and cumulative energy into the actuator during impacts"""
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True, subplot_titles=("Power [W]", "Energy [J]"))
    fig.add_trace(go.Scatter(x=frame["t"], y=frame["interaction_power"], name="interaction power"), row=1, col=1)
    fig.add_trace(go.Scatter(x=frame["t"], y=frame["actuator_power"], name="actuator power"), row=1, col=1)
    fig.add_trace(go.Scatter(x=frame["t"], y=frame["interaction_energy"], name="interaction energy"), row=2, col=1)
    fig.add_trace(go.Scatter(x=frame["t"], y=frame["actuator_energy"], name="actuator energy"), row=2, col=1)
    fig.add_trace(go.Scatter(x=frame["t"], y=frame["margin"], name="storage margin",
                             line=dict(dash="dot")), row=2, col=1)
    fig.update_layout(title="Power and energy during impacts", height=600)
    return fig


def equilibrium_figure(table: pd.DataFrame) -> go.Figure:
    fig = px.line(table, x="stiffness", y="deflection", markers=True, log_x=True,
                  title="Equilibrium deflection under gravity model error")
    fig.update_layout(height=400)
    return fig
