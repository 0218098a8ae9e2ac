"""Top-two-per-metric method selection and min-max normalization for radar charts."""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

HIGHER = "higher-better"
LOWER = "lower-better"

DEFAULT_METRICS: Tuple[Tuple[str, str], ...] = (
    ("clean_pct", HIGHER),
    ("pgd10_pct", HIGHER),
    ("pgd20_pct", HIGHER),
    ("pgd50_pct", HIGHER),
    ("aa_lite_pct", HIGHER),
    ("train_seconds", LOWER),
    ("peak_memory_gb", LOWER),
)


def minmax_normalize(values: Sequence[float], direction: str = HIGHER) -> List[float]:
    """Map to [0, 1] with 1 = best; a constant column maps to 0.5."""
    if not values:
        raise ValueError("values must be nonempty")
    if direction not in (HIGHER, LOWER):
        raise ValueError(f"unknown direction {direction!r}")
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.5] * len(values)
    if direction == HIGHER:
        return [(v - lo) / (hi - lo) for v in values]
    return [(hi - v) / (hi - lo) for v in values]


@dataclass
class RadarTable:
    metrics: List[Tuple[str, str]]
    rows: Dict[str, Dict[str, float]]
    selected: List[str]
    normalized: Dict[str, Dict[str, float]]
    top: Dict[str, List[str]] = field(default_factory=dict)


def radar_select(
    rows: Mapping[str, Mapping[str, float]],
    metrics: Sequence[Tuple[str, str]] = DEFAULT_METRICS,
    k: int = 2,
) -> RadarTable:
    """Top-k methods per metric after direction adjustment; selection is the deduplicated union.

    Methods missing a metric are ignored for that metric and get no
    normalized value on it.
    """
    if not rows:
        raise ValueError("need at least one method")
    if not metrics:
        raise ValueError("need at least one metric")
    methods = sorted(rows)
    selected, top, normalized = [], {}, {m: {} for m in methods}
    for name, direction in metrics:
        have = [m for m in methods if rows[m].get(name) is not None]
        if not have:
            continue
        sign = 1.0 if direction == HIGHER else -1.0
        ranked = sorted(have, key=lambda m: (-sign * rows[m][name], m))
        top[name] = ranked[:k]
        for m in ranked[:k]:
            if m not in selected:
                selected.append(m)
        for m, v in zip(have, minmax_normalize([rows[m][name] for m in have], direction)):
            normalized[m][name] = v
    return RadarTable(list(metrics), {m: dict(rows[m]) for m in methods}, selected, normalized, top)
