"""Figures written next to the delimited report files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .projection import Projection  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
_MARKERS = {"seed": "*", "gen": "^", "real": "x"}


def render_report(report, out_dir: str | Path) -> list[Path]:
    """Bar chart of mean accuracy (with seed std) per method, one panel per shot count."""
    out_dir = Path(out_dir)
    shots = sorted({a["n"] for a in report.aggregates})
    if not shots:
        return []
    methods = list(dict.fromkeys(a["method"] for a in report.aggregates))
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(shots), figsize=(3.2 * len(shots), 2.8), squeeze=False)
        for ax, n in zip(axes[0], shots):
            vals = [report.mean(m, n) for m in methods]
            errs = [next(a["std"] for a in report.aggregates if a["method"] == m and a["n"] == n)
                    for m in methods]
            ax.bar(range(len(methods)), [100 * v for v in vals], yerr=[100 * e for e in errs],
                   color="0.6", edgecolor="k", capsize=3)
            ax.set_xticks(range(len(methods)))
            ax.set_xticklabels(methods, rotation=30, ha="right")
            ax.set_title(f"{n}-shot")
            ax.set_ylabel("top-1 accuracy (%)")
            lo = 100 * min(vals) - 10
            ax.set_ylim(max(0, lo), 100)
        fig.tight_layout()
        path = out_dir / "accuracy.png"
        fig.savefig(path)
        plt.close(fig)
    return [path]


def render_projection(proj: Projection, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        classes = sorted(set(proj.labels.tolist()))
        cmap = plt.get_cmap("tab10")
        prov = np.asarray(proj.provenance)
        for i, c in enumerate(classes):
            for kind, marker in _MARKERS.items():
                sel = (proj.labels == c) & (prov == kind)
                if sel.any():
                    ax.scatter(proj.coords[sel, 0], proj.coords[sel, 1], marker=marker,
                               s=70 if kind == "seed" else 18, color=cmap(i % 10),
                               alpha=0.9 if kind == "seed" else 0.5,
                               label=kind if i == 0 else None)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
