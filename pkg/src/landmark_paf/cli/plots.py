"""Static SVG figures with deterministic output."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..paf import EstimateSeries  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "landmark-paf"
matplotlib.rcParams["svg.fonttype"] = "none"


def plot_series(series_list: Sequence[EstimateSeries], path) -> None:
    """One panel per method (estimate with interval) above a risk-set bar panel."""
    k = len(series_list)
    fig, axes = plt.subplots(k + 1, 1, figsize=(7, 2.6 * (k + 1)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, s in zip(axes, series_list):
        ok = np.isfinite(s.estimate)
        ax.axhline(0.0, color="0.6", lw=0.8)
        if s.ci_low is not None:
            ax.fill_between(s.landmark, s.ci_low, s.ci_high, color="tab:blue", alpha=0.2, lw=0,
                            label=f"{s.method.value} CI")
        ax.plot(s.landmark[ok], s.estimate[ok], "o-", ms=3, color="tab:blue", label=s.method.value)
        ax.set_ylabel("PAF")
        ax.set_title(f"{s.method.value}, window {s.window:g}")
        ax.legend(loc="best", fontsize=8)
    s = series_list[0]
    ax = axes[-1]
    width = 0.4 * (np.min(np.diff(s.landmark)) if len(s) > 1 else 1.0)
    ax.bar(s.landmark - width / 2, s.n_at_risk - s.n_exposed, width, label="unexposed")
    ax.bar(s.landmark + width / 2, s.n_exposed, width, label="exposed")
    ax.plot(s.landmark, s.n_cases, "k.-", ms=3, label="cases in window")
    ax.set_xlabel("landmark")
    ax.set_ylabel("at risk")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
