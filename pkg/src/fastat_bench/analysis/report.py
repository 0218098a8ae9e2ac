"""Turn a summary into tables and figures on disk."""
from pathlib import Path
from typing import List, Sequence

from ..evalsuite import AggregateResult
from . import plotting, tables
from .pareto import ParetoPoint, pareto_frontier
from .radar import DEFAULT_METRICS, radar_select

KINDS = ("markdown-table", "csv", "pareto-plot", "radar-plot")


def by_dataset(aggs: Sequence[AggregateResult]):
    groups = {}
    for a in aggs:
        groups.setdefault(a.dataset, []).append(a)
    return dict(sorted(groups.items()))


def pareto_points(aggs, x="train_seconds", y="aa_lite_pct") -> List[ParetoPoint]:
    return [ParetoPoint(a.method, a.mean(x), a.mean(y)) for a in aggs
            if a.mean(x) is not None and a.mean(y) is not None]


def emit(summary: Sequence[AggregateResult], kind: str, out, x="train_seconds", y="aa_lite_pct") -> List[Path]:
    if not summary:
        raise ValueError("summary is empty")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {KINDS}")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    files = []
    for dataset, aggs in by_dataset(summary).items():
        if kind == "markdown-table":
            files.append(tables.write_markdown(aggs, out / f"table_{dataset}.md"))
        elif kind == "csv":
            files.append(tables.write_csv(aggs, out / f"table_{dataset}.csv"))
        elif kind == "pareto-plot":
            pts = pareto_points(aggs, x, y)
            files += plotting.pareto_plot(pts, pareto_frontier(pts), out / f"pareto_{dataset}",
                                          title=dataset, xlabel=x, ylabel=y)
        else:
            rows = {a.method: {m: a.mean(m) for m, _ in DEFAULT_METRICS} for a in aggs}
            files += plotting.radar_plot(radar_select(rows), out / f"radar_{dataset}", title=dataset)
    return files
