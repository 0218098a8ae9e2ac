"""Pareto frontier over (cost to minimize, score to maximize)."""
from dataclasses import dataclass
from typing import List, Sequence


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    cost: float
    score: float

    def __post_init__(self):
        if not self.cost > 0:
            raise ValueError(f"{self.label}: cost must be > 0")
        if not 0.0 <= self.score <= 100.0:
            raise ValueError(f"{self.label}: score must lie in [0, 100]")


def dominates(q: ParetoPoint, p: ParetoPoint) -> bool:
    return q.cost <= p.cost and q.score >= p.score and (q.cost < p.cost or q.score > p.score)


def pareto_frontier(points: Sequence[ParetoPoint]) -> List[ParetoPoint]:
    """Points not strictly dominated by any other, sorted by cost ascending.

    Points equal in both coordinates do not dominate each other, so exact
    ties are all kept. Sweep in cost order, tracking the best score seen at
    strictly lower cost.
    """
    labels = [p.label for p in points]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate labels")
    ordered = sorted(points, key=lambda p: (p.cost, -p.score, p.label))
    front = []
    best_below = float("-inf")  # best score among strictly cheaper points
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].cost == ordered[i].cost:
            j += 1
        group = ordered[i:j]
        top = group[0].score  # group sorted by score descending
        for p in group:
            if p.score == top and p.score > best_below:
                front.append(p)
        best_below = max(best_below, top)
        i = j
    return front
