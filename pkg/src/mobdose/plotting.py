"""SVG figures for analyses and simulation experiments.

Figures are built with the object-oriented matplotlib API (no pyplot state)
and written as SVG with a fixed hash salt, text kept as ``<text>`` elements
and no timestamp, so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from .dose_models import FittedDoseModel

_SVG_RC = {"svg.hashsalt": "mobdose", "svg.fonttype": "none", "path.simplify": False}
_TABLE_COLUMNS = ("none", "z1", "z2", "z3", "z4_z10")


def save_svg(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _label(method: str, restriction: str) -> str:
    return method if restriction in ("na", "", None) else f"{method} ({restriction[:5]}.)"


def dose_response_figure(models: Mapping[str, FittedDoseModel], d_max: float | None = None,
                         n_points: int = 201, title: str | None = None) -> Figure:
    """Fitted mean response against dose, one curve per labelled model."""
    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot()
    if d_max is None:
        d_max = max(m.spec.d_max for m in models.values())
    grid = np.linspace(0.0, d_max, n_points)
    for i, (label, model) in enumerate(models.items()):
        ax.plot(grid, model.predict(grid), label=label, linewidth=1.5, gid=f"curve-{i}")
    ax.set_xlabel("dose")
    ax.set_ylabel("mean response")
    ax.set_xlim(0.0, d_max)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return fig


def _panels(n: int, width: float = 3.2, height: float = 3.0) -> tuple[Figure, list]:
    fig = Figure(figsize=(max(width * n, 4.0), height))
    axes = [fig.add_subplot(1, n, i + 1) for i in range(n)]
    return fig, axes


def selection_figure(freq: pd.DataFrame) -> Figure:
    """Grouped bars of covariate selection frequencies, one panel per case and sigma."""
    groups = list(freq.groupby(["case", "sigma"], sort=True))
    fig, axes = _panels(max(len(groups), 1))
    x = np.arange(len(_TABLE_COLUMNS))
    for ax, ((case, sigma), sub) in zip(axes, groups):
        width = 0.8 / max(len(sub), 1)
        for i, row in enumerate(sub.itertuples(index=False)):
            heights = [getattr(row, c) for c in _TABLE_COLUMNS]
            ax.bar(x + (i - (len(sub) - 1) / 2) * width, heights, width,
                   label=_label(row.method, row.restriction))
        ax.set_xticks(x, [c.replace("_", "-") for c in _TABLE_COLUMNS])
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"case {case}, sigma {sigma:g}")
    axes[0].set_ylabel("relative frequency")
    if groups:
        axes[-1].legend(frameon=False, fontsize="x-small")
    fig.tight_layout()
    return fig


def mse_ratio_figure(results: pd.DataFrame) -> Figure:
    """Boxplots of log2(MSE_method / MSE_globalEmax), one panel per case and sigma."""
    ok = results[(results.error == "") & (results.method != "globalEmax")
                 & results.tei_mse.notna()].copy()
    ok["log2_ratio"] = np.log2(ok.tei_mse / ok.tei_mse_global)
    groups = list(ok.groupby(["case", "sigma"], sort=True))
    fig, axes = _panels(max(len(groups), 1), height=3.4)
    for ax, ((case, sigma), sub) in zip(axes, groups):
        parts = list(sub.groupby(["method", "restriction"], sort=True))
        data = [p.log2_ratio.dropna().to_numpy() for _, p in parts]
        ax.boxplot(data, showfliers=False)
        ax.set_xticks(np.arange(1, len(parts) + 1), [_label(*k) for k, _ in parts],
                      rotation=60, ha="right", fontsize="x-small")
        ax.axhline(0.0, color="grey", linewidth=0.8)
        ax.set_title(f"case {case}, sigma {sigma:g}")
    axes[0].set_ylabel("log2 MSE ratio vs globalEmax")
    fig.tight_layout()
    return fig


def med_figure(summary: pd.DataFrame) -> Figure:
    """Bars of the mean fraction of correctly estimated MEDs per case."""
    groups = list(summary.groupby(["case", "sigma"], sort=True))
    fig, axes = _panels(max(len(groups), 1), height=3.4)
    for ax, ((case, sigma), sub) in zip(axes, groups):
        labels = [_label(m, r) for m, r in zip(sub.method, sub.restriction)]
        ax.bar(np.arange(len(sub)), sub["mean"].to_numpy())
        ax.set_xticks(np.arange(len(sub)), labels, rotation=60, ha="right", fontsize="x-small")
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"case {case}, sigma {sigma:g}")
    axes[0].set_ylabel("correct MED fraction")
    fig.tight_layout()
    return fig


def test_ll_figure(summary: pd.DataFrame) -> Figure:
    """Median test-set log-likelihood against sigma, one panel per case."""
    groups = list(summary.groupby("case", sort=True))
    fig, axes = _panels(max(len(groups), 1))
    for ax, (case, sub) in zip(axes, groups):
        for (method, restriction), part in sub.groupby(["method", "restriction"], sort=True):
            part = part.sort_values("sigma")
            ax.plot(part.sigma, part["median"], marker="o", label=_label(method, restriction))
        ax.set_xlabel("sigma")
        ax.set_title(f"case {case}")
    axes[0].set_ylabel("median test log-likelihood")
    axes[-1].legend(frameon=False, fontsize="x-small")
    fig.tight_layout()
    return fig
