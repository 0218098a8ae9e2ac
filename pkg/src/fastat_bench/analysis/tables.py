"""Markdown/CSV renderings of aggregated results in the benchmark's column order."""
import csv
from pathlib import Path
from typing import Sequence

from ..evalsuite import AggregateResult, format_stat

COLUMNS = (
    ("Method", None),
    ("Clean", "clean_pct"),
    ("PGD-10", "pgd10_pct"),
    ("PGD-20", "pgd20_pct"),
    ("PGD-50", "pgd50_pct"),
    ("AA", "aa_lite_pct"),
    ("Time", "train_seconds"),
    ("Mem", "peak_memory_gb"),
)
MEAN_ONLY = {"train_seconds", "peak_memory_gb"}


def _cell(agg: AggregateResult, metric: str) -> str:
    stat = agg.metrics.get(metric)
    if stat is None:
        return "—"
    if metric in MEAN_ONLY:
        return f"{stat.mean:.2f}"
    return format_stat(stat)


def table_rows(aggs: Sequence[AggregateResult]):
    rows = []
    for a in sorted(aggs, key=lambda a: a.method):
        rows.append([a.method] + [_cell(a, m) for _, m in COLUMNS[1:]])
    return rows


def markdown_table(aggs: Sequence[AggregateResult]) -> str:
    header = [c for c, _ in COLUMNS]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|"]
    for row in table_rows(aggs):
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def write_markdown(aggs, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(markdown_table(aggs))
    return path


def write_csv(aggs, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([c for c, _ in COLUMNS])
        w.writerows(table_rows(aggs))
    return path
