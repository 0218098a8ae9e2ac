"""Robustness-efficiency analysis: Pareto frontiers, radar selection, tables and figures."""
from .pareto import ParetoPoint, pareto_frontier
from .radar import RadarTable, minmax_normalize, radar_select

__all__ = ["ParetoPoint", "pareto_frontier", "RadarTable", "minmax_normalize", "radar_select"]
