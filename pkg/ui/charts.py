# ui/charts.py
from typing import Dict, List, Optional

import pandas as pd
import plotly.graph_objects as go

from core.detection import PRPoint

DARK_LAYOUT = dict(
    plot_bgcolor='#1e293b',
    paper_bgcolor='#0f172a',
    font_color='#f8fafc',
    legend=dict(bgcolor='#1e293b', bordercolor='#6366f1', borderwidth=1),
)
AXIS = dict(gridcolor='#334155', zerolinecolor='#334155', tickfont={'color': '#94a3b8'})


def _title(text: str) -> Dict:
    return {'text': text, 'x': 0.5, 'xanchor': 'center', 'font': {'size': 20, 'color': '#f8fafc'}}


class ChartGenerator:
    """Generate plotly figures for training curves and evaluation reports"""

    def __init__(self):
        self.colors = {
            'L_A': '#6366f1', 'L_T': '#ec4899', 'L_KoLeo': '#06b6d4',
            'L_C': '#10b981', 'total': '#f59e0b', 'val_BAcc': '#ef4444',
            'prototype': '#6366f1', 'baseline': '#94a3b8',
        }

    def create_loss_curve(self, log: pd.DataFrame, title: str = "Training Losses") -> go.Figure:
        """
        Create one line per loss component over epochs, validation BAcc on a second axis

        Args:
            log: Training log records (epoch, L_A, L_T, L_KoLeo, L_C, total, val_BAcc)
            title: Chart title

        Returns:
            Plotly Figure object
        """
        fig = go.Figure()
        x = list(range(1, len(log) + 1))
        for column in ('L_A', 'L_T', 'L_KoLeo', 'L_C', 'total'):
            if column not in log or log[column].isna().all():
                continue
            fig.add_trace(go.Scatter(
                x=x, y=log[column], mode='lines+markers', name=column,
                line=dict(color=self.colors[column], width=3 if column == 'total' else 2),
            ))
        if 'val_BAcc' in log and not log['val_BAcc'].isna().all():
            fig.add_trace(go.Scatter(
                x=x, y=log['val_BAcc'], mode='lines+markers', name='val BAcc', yaxis='y2',
                line=dict(color=self.colors['val_BAcc'], dash='dot'),
            ))
        fig.update_layout(
            title=_title(title),
            xaxis_title="Logged epoch",
            yaxis_title="Loss",
            xaxis=AXIS,
            yaxis=AXIS,
            yaxis2=dict(title="BAcc", overlaying='y', side='right', range=[0, 1], **AXIS),
            height=450,
            **DARK_LAYOUT,
        )
        return fig

    def create_pr_curve(self, points: List[PRPoint], ap: float, baseline: Optional[List[PRPoint]] = None,
                        title: str = "Scale-sweep precision/recall") -> go.Figure:
        """
        Create the precision/recall trace of a scale sweep

        Args:
            points: One point per scale factor
            ap: Average precision reported in the legend
            baseline: Optional random-centroid sweep drawn for reference
            title: Chart title

        Returns:
            Plotly Figure object
        """
        fig = go.Figure()
        fig.add_trace(go.Scatter(
            x=[p.recall for p in points], y=[p.precision for p in points],
            mode='lines+markers', name=f"prototype (AP {ap:.3f})",
            line=dict(color=self.colors['prototype'], width=3),
            text=[f"scale {p.scale}" for p in points],
            hovertemplate="<b>%{text}</b><br>recall %{x:.3f}<br>precision %{y:.3f}<extra></extra>",
        ))
        if baseline:
            fig.add_trace(go.Scatter(
                x=[p.recall for p in baseline], y=[p.precision for p in baseline],
                mode='lines', name="random centroids", line=dict(color=self.colors['baseline'], dash='dash'),
            ))
        fig.update_layout(
            title=_title(title),
            xaxis_title="Recall",
            yaxis_title="Precision",
            xaxis=dict(range=[0, 1.02], **AXIS),
            yaxis=dict(range=[0, 1.02], **AXIS),
            height=450,
            **DARK_LAYOUT,
        )
        return fig

    def create_comparison_chart(self, table: pd.DataFrame, label: str, metrics: List[str],
                                title: str = "Comparison") -> go.Figure:
        """Grouped bars, one group per row of `table` (ablation strategies, resolutions)"""
        fig = go.Figure()
        for metric in metrics:
            if metric not in table:
                continue
            fig.add_trace(go.Bar(
                name=metric,
                x=table[label].astype(str),
                y=table[metric],
                text=table[metric].round(3),
                textposition='auto',
            ))
        fig.update_layout(
            title=_title(title),
            barmode='group',
            xaxis=AXIS,
            yaxis=AXIS,
            height=450,
            **DARK_LAYOUT,
        )
        return fig
