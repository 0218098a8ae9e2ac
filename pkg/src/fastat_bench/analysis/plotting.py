"""Matplotlib figures for the analysis layer.

Every figure is written as SVG together with a CSV holding exactly the
plotted values.
"""
import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.2, 3.2),
    "savefig.bbox": "tight",
    "svg.fonttype": "none",
}


def _save(fig, out: Path):
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out.with_suffix(".svg"))
    plt.close(fig)
    return out.with_suffix(".svg")


def pareto_plot(points, frontier, out, title="", xlabel="Training time (s)", ylabel="AA accuracy (%)"):
    """Scatter all points; frontier points are stars joined by a step line."""
    out = Path(out)
    on_front = {p.label for p in frontier}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for p in points:
            star = p.label in on_front
            ax.scatter(p.cost, p.score, marker="*" if star else "o", s=90 if star else 22,
                       color="tab:red" if star else "tab:gray", zorder=3 if star else 2)
            ax.annotate(p.label, (p.cost, p.score), textcoords="offset points", xytext=(3, 3), fontsize=6)
        if frontier:
            ax.step([p.cost for p in frontier], [p.score for p in frontier], where="post",
                    color="tab:red", lw=0.8, alpha=0.6)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(alpha=0.3)
        svg = _save(fig, out)
    sidecar = out.with_suffix(".csv")
    with open(sidecar, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "cost", "score", "pareto_optimal"])
        for p in sorted(points, key=lambda p: (p.cost, p.label)):
            w.writerow([p.label, p.cost, p.score, int(p.label in on_front)])
    return [svg, sidecar]


def radar_plot(table, out, title=""):
    """One polygon per selected method over the normalized metrics."""
    out = Path(out)
    names = [m for m, _ in table.metrics if any(m in table.normalized[s] for s in table.selected)]
    angles = [2 * math.pi * i / len(names) for i in range(len(names))] if names else []
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4.4, 4.4))
        ax = fig.add_subplot(projection="polar")
        for method in table.selected:
            vals = [table.normalized[method].get(m, 0.0) for m in names]
            if not vals:
                continue
            ax.plot(angles + angles[:1], vals + vals[:1], lw=1, label=method)
            ax.fill(angles + angles[:1], vals + vals[:1], alpha=0.08)
        ax.set_xticks(angles)
        ax.set_xticklabels(names)
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right", bbox_to_anchor=(1.35, 1.1))
        svg = _save(fig, out)
    sidecar = out.with_suffix(".csv")
    with open(sidecar, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "metric", "raw", "normalized", "selected"])
        for method in sorted(table.rows):
            for m, _ in table.metrics:
                raw = table.rows[method].get(m)
                norm = table.normalized[method].get(m)
                w.writerow([method, m, "" if raw is None else raw, "" if norm is None else norm,
                            int(method in table.selected)])
    return [svg, sidecar]
