"""Per-method adversarial batch construction behind one interface.

The trainer only ever calls ``build_method(spec)``, ``init_state``, ``craft``
and ``after_backward``; nothing method-specific leaks into the loop.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import torch

from .. import attacks
from ..attacks import input_gradient, project, uniform_delta
from . import registry
from .penalties import (
    grad_align_penalty,
    local_linearity_penalty,
    nuclear_consistency_penalty,
    zero_grad_mask,
)


@dataclass
class MethodState:
    prior_buffer: Optional[torch.Tensor] = None  # (N_train, C, H, W), FGSM-PGI
    carried_delta: Optional[torch.Tensor] = None  # (batch_size, C, H, W), FreeAT
    epoch: int = 0


@dataclass
class CraftResult:
    adversarial_batch: torch.Tensor
    aux_loss_terms: Dict[str, torch.Tensor] = field(default_factory=dict)
    # terms that need the trainer's forward pass on the adversarial batch
    logit_terms: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = field(default_factory=dict)
    replay_count: int = 1
    updated_state: Optional[MethodState] = None
    requires_input_grad: bool = False
    clean_batch: Optional[torch.Tensor] = None


def update_prior_buffer(state: MethodState, indices, delta, momentum, epsilon) -> MethodState:
    """buffer[i] <- clip_eps(momentum * buffer[i] + (1 - momentum) * delta_i)."""
    buf = state.prior_buffer
    idx = torch.as_tensor(indices, dtype=torch.long, device=buf.device)
    if idx.numel() and (idx.min() < 0 or idx.max() >= buf.shape[0]):
        raise IndexError(f"prior buffer index out of range [0, {buf.shape[0]})")
    new = momentum * buf[idx] + (1 - momentum) * delta.detach().to(buf.device)
    buf[idx] = new.clamp(-epsilon, epsilon)
    return state


class Method:
    name = ""
    replays = 1

    def __init__(self, params):
        self.params = params

    def init_state(self, n_train, image_shape, batch_size, device="cpu") -> MethodState:
        return MethodState()

    def craft(self, model, x, y, indices, threat, state, generator=None) -> CraftResult:
        raise NotImplementedError

    def after_backward(self, result: CraftResult, state: MethodState, input_grad, threat) -> None:
        pass


class _SingleStep(Method):
    """Random (or zero) init, one signed-gradient step, eps-ball projection."""

    init = "zero"  # zero | uniform | bernoulli_half

    def _init_delta(self, x, threat, generator):
        eps = threat.epsilon
        if self.init == "uniform":
            return uniform_delta(x, eps, generator)
        if self.init == "bernoulli_half":
            u = torch.rand(x.shape, generator=generator).to(x.device, x.dtype)
            return torch.where(u < 0.5, -0.5 * eps, 0.5 * eps)
        return torch.zeros_like(x)

    def transform_grad(self, g):
        return g

    def _delta(self, model, x, y, threat, generator, init=None):
        eps, lo, hi = threat.epsilon, threat.data_min, threat.data_max
        delta = self._init_delta(x, threat, generator) if init is None else init
        delta = project(x, delta, eps, lo, hi)
        _, g = input_gradient(model, x + delta, y)
        g = self.transform_grad(g)
        return project(x, delta + self.params["alpha"] * eps * g.sign(), eps, lo, hi)

    def craft(self, model, x, y, indices, threat, state, generator=None):
        delta = self._delta(model, x, y, threat, generator)
        return CraftResult((x + delta).detach(), updated_state=state)


class FGSMAT(_SingleStep):
    name = "fgsm-at"


class FGSMRS(_SingleStep):
    name = "fgsm-rs"
    init = "uniform"


class ZeroGrad(_SingleStep):
    name = "zero-grad"
    init = "uniform"

    def transform_grad(self, g):
        return zero_grad_mask(g, self.params["zero_quantile"])


class NFGSM(Method):
    """Wide noise init, one step, no eps-ball projection (data range only)."""

    name = "n-fgsm"

    def craft(self, model, x, y, indices, threat, state, generator=None):
        eps, lo, hi = threat.epsilon, threat.data_min, threat.data_max
        delta = uniform_delta(x, self.params["noise_factor"] * eps, generator)
        delta = (x + delta).clamp(lo, hi) - x
        _, g = input_gradient(model, x + delta, y)
        x_adv = (x + delta + self.params["alpha"] * eps * g.sign()).clamp(lo, hi)
        return CraftResult(x_adv.detach(), updated_state=state)


class GradAlign(_SingleStep):
    name = "grad-align"
    init = "uniform"

    def craft(self, model, x, y, indices, threat, state, generator=None):
        delta = self._delta(model, x, y, threat, generator)
        pen = grad_align_penalty(model, x, y, threat, self.params["reg_weight"], generator)
        return CraftResult((x + delta).detach(), {"grad_align": pen}, updated_state=state)


class ELLE(_SingleStep):
    name = "elle"
    init = "uniform"

    def craft(self, model, x, y, indices, threat, state, generator=None):
        delta = self._delta(model, x, y, threat, generator)
        pen = local_linearity_penalty(model, x, y, threat, self.params["reg_weight"], generator)
        return CraftResult((x + delta).detach(), {"linearity": pen}, updated_state=state)


class NuAT(_SingleStep):
    name = "nuat"
    init = "bernoulli_half"

    def craft(self, model, x, y, indices, threat, state, generator=None):
        delta = self._delta(model, x, y, threat, generator)
        weight = self.params["reg_weight"]
        logits_clean = model(x)
        term = lambda logits_adv: nuclear_consistency_penalty(logits_clean, logits_adv, weight)  # noqa: E731
        return CraftResult((x + delta).detach(), logit_terms={"nuclear": term}, updated_state=state)


class FGSMPGI(_SingleStep):
    """One step from a per-example prior perturbation carried across epochs."""

    name = "fgsm-pgi"

    def init_state(self, n_train, image_shape, batch_size, device="cpu"):
        return MethodState(prior_buffer=torch.zeros((n_train,) + tuple(image_shape), device=device))

    def craft(self, model, x, y, indices, threat, state, generator=None):
        if state.prior_buffer is None:
            raise ValueError("fgsm-pgi requires a prior buffer state")
        idx = torch.as_tensor(indices, dtype=torch.long)
        if idx.numel() != x.shape[0]:
            raise ValueError("indices do not match batch size")
        if idx.max() >= state.prior_buffer.shape[0] or idx.min() < 0:
            raise IndexError("batch index outside prior buffer")
        init = state.prior_buffer[idx.to(state.prior_buffer.device)].to(x.device)
        delta = self._delta(model, x, y, threat, generator, init=init)
        update_prior_buffer(state, idx, delta, self.params["prior_momentum"], threat.epsilon)
        return CraftResult((x + delta).detach(), updated_state=state)


class FreeAT(Method):
    """Replay each batch m times; the parameter backward also refreshes delta."""

    name = "free-at"

    def __init__(self, params):
        super().__init__(params)
        self.replays = int(params["replays"])

    def init_state(self, n_train, image_shape, batch_size, device="cpu"):
        return MethodState(carried_delta=torch.zeros((batch_size,) + tuple(image_shape), device=device))

    def craft(self, model, x, y, indices, threat, state, generator=None):
        if state.carried_delta is None:
            raise ValueError("free-at requires a carried perturbation state")
        b = x.shape[0]
        if b > state.carried_delta.shape[0]:
            raise ValueError("batch larger than carried perturbation")
        delta = project(x, state.carried_delta[:b], threat.epsilon, threat.data_min, threat.data_max)
        state.carried_delta[:b] = delta.detach()
        x_adv = (x + delta).detach().requires_grad_(True)
        return CraftResult(
            x_adv, replay_count=self.replays, updated_state=state, requires_input_grad=True, clean_batch=x.detach()
        )

    def after_backward(self, result, state, input_grad, threat):
        if input_grad is None:
            return
        x = result.clean_batch
        b = x.shape[0]
        old = state.carried_delta[:b]
        new = project(x, old + threat.epsilon * input_grad.sign(), threat.epsilon, threat.data_min, threat.data_max)
        state.carried_delta[:b] = new.detach()


class PGDAT(Method):
    name = "pgd-at"

    def craft(self, model, x, y, indices, threat, state, generator=None):
        delta = attacks.pgd_delta(model, x, y, threat, self.params["steps"], self.params["step"], True, generator)
        return CraftResult((x + delta).detach(), updated_state=state)


class PGDATWA(PGDAT):
    name = "pgd-at-wa"


IMPLEMENTATIONS = {
    cls.name: cls
    for cls in (FGSMAT, FGSMRS, ZeroGrad, NFGSM, GradAlign, ELLE, NuAT, FGSMPGI, FreeAT, PGDAT, PGDATWA)
}


def build_method(spec) -> Method:
    """Instantiate the method named by a config.MethodSpec."""
    info = registry.lookup(spec.name)
    if not info.implemented or spec.name not in IMPLEMENTATIONS:
        raise KeyError(f"method {spec.name!r} is not implemented")
    return IMPLEMENTATIONS[spec.name](spec.resolved())


def craft(spec, model, batch, indices, threat, state, generator=None, method=None) -> CraftResult:
    """Functional entry point: build (or reuse) the method and craft one batch."""
    method = method or build_method(spec)
    x, y = batch
    return method.craft(model, x, y, indices, threat, state, generator)
