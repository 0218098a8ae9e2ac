"""FastAT method registry and per-method crafting procedures."""
from .registry import REGISTRY, MethodInfo, implemented_methods, lookup, resolve_params

__all__ = ["REGISTRY", "MethodInfo", "implemented_methods", "lookup", "resolve_params"]
