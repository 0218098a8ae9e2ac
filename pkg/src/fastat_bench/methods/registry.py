"""Catalog of FastAT methods: names, declared hyperparameters, implemented flag.

This module is metadata only (no torch import) so the config layer can
validate method specs without pulling in the training stack.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

EPS_UNITS = "multiple of threat.epsilon"


@dataclass(frozen=True)
class MethodInfo:
    name: str
    category: str
    defaults: Dict[str, Any] = field(default_factory=dict)
    state: Optional[str] = None
    implemented: bool = True
    aux_terms: tuple = ()


def _info(name, category, state=None, aux=(), **defaults):
    defaults.setdefault("use_wa_model", True)
    return MethodInfo(name, category, defaults, state, True, tuple(aux))


def _stub(name, category):
    return MethodInfo(name, category, {}, None, False)


# alpha is a step size in units of epsilon; `step` (pgd) is absolute pixel scale
REGISTRY: Dict[str, MethodInfo] = {
    m.name: m
    for m in [
        _info("fgsm-at", "baseline", alpha=1.0),
        _info("pgd-at", "baseline", steps=10, step=2 / 255, use_wa_model=False),
        _info("pgd-at-wa", "baseline", steps=10, step=2 / 255),
        _info("fgsm-rs", "random-init", alpha=1.25),
        _info("n-fgsm", "random-init", alpha=1.0, noise_factor=2.0),
        _info("zero-grad", "random-init", alpha=1.25, zero_quantile=0.35),
        _info("fgsm-pgi", "informed-init", state="prior_buffer", alpha=1.0, prior_momentum=0.3),
        _info("free-at", "multi-step-approx", state="carried_delta", replays=4),
        _info("grad-align", "gradient-reg", aux=("grad_align",), alpha=1.25, reg_weight=0.2),
        _info("elle", "gradient-reg", aux=("linearity",), alpha=1.25, reg_weight=2000.0),
        _info("nuat", "output-consistency", aux=("nuclear",), alpha=1.0, reg_weight=4.0),
        _stub("gat", "gradient-reg"),
        _stub("aaer", "output-consistency"),
        _stub("n-aaer", "output-consistency"),
        _stub("ssat", "informed-init"),
        _stub("fgsm-uap", "informed-init"),
        _stub("fgsm-cuap", "informed-init"),
        _stub("fgsm-fuap", "informed-init"),
        _stub("fgsm-mep-cs", "hybrid"),
        _stub("fgsm-rs-cs", "hybrid"),
        _stub("fgsm-pco", "hybrid"),
        _stub("liet", "hybrid"),
    ]
}


def implemented_methods():
    return sorted(k for k, v in REGISTRY.items() if v.implemented)


def lookup(name: str) -> MethodInfo:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"method {name!r} not in registry") from None


def resolve_params(name: str, params: Dict[str, Any]) -> Dict[str, Any]:
    """Fill in registry defaults; raises on undeclared keys."""
    info = lookup(name)
    unknown = sorted(set(params) - set(info.defaults))
    if unknown:
        raise KeyError(f"unknown params for {name}: {', '.join(unknown)}")
    out = dict(info.defaults)
    out.update(params)
    return out
