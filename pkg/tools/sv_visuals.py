# =========================================
# file: tools/sv_visuals.py
# =========================================
from __future__ import annotations

from typing import Sequence, Tuple

import pandas as pd
import plotly.graph_objects as go

LOSS_LABELS = {
    "loss_total": "Total",
    "loss_ce": "Global classification (CE)",
    "loss_pn": "Prototypical (PN)",
    "loss_contra": "Contrastive",
}


# ------------------------------
# TRAINING LOSS CURVES
# ------------------------------
def loss_curve_chart(metrics: pd.DataFrame, title: str = "Training Loss") -> go.Figure:
    fig = go.Figure()

    for column, label in LOSS_LABELS.items():
        if column not in metrics or not metrics[column].abs().gt(0).any():
            continue
        fig.add_trace(
            go.Scatter(
                x=metrics["step"],
                y=metrics[column],
                mode="lines",
                name=label,
                hovertemplate=f"{label}: %{{y:.4f}} at step %{{x}}<extra></extra>",
            )
        )

    fig.update_layout(
        title=dict(text=title, x=0, xanchor="left", font=dict(size=16)),
        xaxis_title="Step",
        yaxis_title="Loss",
        height=360,
        margin=dict(l=20, r=20, t=55, b=20),
    )
    return fig


# ------------------------------
# PER-SYSTEM METRIC BARS
# ------------------------------
def system_metric_bars(summary: pd.DataFrame, metric: str, title: str) -> go.Figure:
    """Grouped bars: one group per system, one bar per condition, mean over seeds."""
    fig = go.Figure()

    for condition, df in summary.groupby("condition", sort=False):
        fig.add_trace(
            go.Bar(
                name=str(condition),
                x=df["system"],
                y=df[f"{metric}_mean"],
                error_y=dict(type="data", array=df[f"{metric}_std"].fillna(0.0)),
                hovertemplate=f"%{{x}} ({condition}): %{{y:.4f}}<extra></extra>",
            )
        )

    fig.update_layout(
        barmode="group",
        title=dict(text=title, x=0, xanchor="left", font=dict(size=16)),
        yaxis_title=metric.upper() if metric == "eer" else "minDCF",
        height=380,
        margin=dict(l=20, r=20, t=55, b=20),
        showlegend=True,
    )
    return fig


# ------------------------------
# HTML OUTPUT
# ------------------------------
def figures_to_html(figures: Sequence[Tuple[str, go.Figure]], title: str) -> str:
    """One static page; fixed div ids keep the output byte-stable across reruns."""
    body = [
        fig.to_html(full_html=False, include_plotlyjs="cdn" if i == 0 else False, div_id=name)
        for i, (name, fig) in enumerate(figures)
    ]
    return (
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\" />"
        f"<title>{title}</title></head>\n<body>\n" + "\n".join(body) + "\n</body>\n</html>\n"
    )
