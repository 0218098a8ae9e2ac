"""L-inf evaluation adversaries: FGSM, PGD-k, APGD (CE / DLR), and worst-case ensembles.

The ``*_delta`` kernels return raw perturbations and are shared with the
training-time methods. The ``*_attack`` wrappers add the bookkeeping used for
evaluation: an example counts as robust only if it is classified correctly
both on the clean input and on the adversarial one.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str  # fgsm | pgd | apgd-ce | apgd-dlr
    iterations: int = 1
    step: float = 0.0
    restarts: int = 1
    random_start: bool = False
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "apgd-ce", "apgd-dlr"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.iterations > 0 and self.kind == "pgd" and self.step <= 0:
            raise ValueError("step must be > 0 when iterations > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "pgd":
            return f"pgd{self.iterations}"
        return self.kind


@dataclass
class AttackOutcome:
    adversarial_inputs: torch.Tensor
    per_example_correct: torch.Tensor
    robust_accuracy: float


# ---------------------------------------------------------------------------
# losses and kernels


def ce_loss(logits, y):
    return F.cross_entropy(logits, y, reduction="none")


def dlr_loss(logits, y):
    """Negative normalized margin, maximized by the attacker.

    Falls back to the plain (negative) margin when there are fewer than three
    classes.
    """
    sorted_logits, _ = logits.sort(dim=1, descending=True)
    z_y = logits.gather(1, y[:, None]).squeeze(1)
    other = logits.clone()
    other.scatter_(1, y[:, None], -math.inf)
    z_other = other.max(dim=1).values
    margin = z_y - z_other
    if logits.shape[1] < 3:
        return -margin
    denom = (sorted_logits[:, 0] - sorted_logits[:, 2]).clamp_min(1e-12)
    return -margin / denom


LOSSES = {"ce": ce_loss, "dlr": dlr_loss}


def input_gradient(model, x, y, loss_fn=ce_loss, create_graph=False, return_logits=False):
    """Per-example loss and its gradient with respect to the input."""
    x = x.detach().requires_grad_(True)
    logits = model(x)
    losses = loss_fn(logits, y)
    (grad,) = torch.autograd.grad(losses.sum(), x, create_graph=create_graph)
    if not torch.isfinite(grad).all():
        bad = (~torch.isfinite(grad)).flatten(1).any(1).nonzero().flatten().tolist()
        raise AttackError(f"non-finite input gradient for batch examples {bad[:10]}")
    losses = losses if create_graph else losses.detach()
    if return_logits:
        return losses, grad, logits.detach()
    return losses, grad


def project(x, delta, eps, lo, hi):
    """Clip delta to the eps-ball, then keep x + delta inside [lo, hi]."""
    delta = delta.clamp(-eps, eps)
    return (x + delta).clamp(lo, hi) - x


def signed_step(x, delta, grad, step, eps, lo, hi):
    return project(x, delta + step * grad.sign(), eps, lo, hi)


def uniform_delta(x, radius, generator=None):
    u = torch.rand(x.shape, generator=generator, dtype=x.dtype, device="cpu").to(x.device)
    return (2 * u - 1) * radius


def fgsm_delta(model, x, y, threat, init_delta=None, step=None, loss_fn=ce_loss):
    eps = threat.epsilon
    delta = torch.zeros_like(x) if init_delta is None else init_delta.detach()
    _, g = input_gradient(model, x + delta, y, loss_fn)
    return signed_step(x, delta, g, eps if step is None else step, eps, threat.data_min, threat.data_max)


def pgd_delta(model, x, y, threat, k, step, random_start, generator=None, loss_fn=ce_loss, init_delta=None):
    eps, lo, hi = threat.epsilon, threat.data_min, threat.data_max
    if init_delta is not None:
        delta = init_delta.detach()
    elif random_start:
        delta = project(x, uniform_delta(x, eps, generator), eps, lo, hi)
    else:
        delta = torch.zeros_like(x)
    for _ in range(k):
        _, g = input_gradient(model, x + delta, y, loss_fn)
        delta = signed_step(x, delta, g, step, eps, lo, hi)
    return delta


@torch.no_grad()
def _correct(model, x, y):
    return model(x).argmax(1) == y


def _outcome(model, x, y, x_adv, clean_correct=None):
    if clean_correct is None:
        clean_correct = _correct(model, x, y)
    correct = clean_correct & _correct(model, x_adv, y)
    return AttackOutcome(x_adv.detach(), correct, 100.0 * correct.float().mean().item() if len(y) else 0.0)


# ---------------------------------------------------------------------------
# public attacks


def fgsm_attack(model, x, y, threat, init_delta=None) -> AttackOutcome:
    delta = fgsm_delta(model, x, y, threat, init_delta)
    return _outcome(model, x, y, x + delta)


def pgd_attack(model, x, y, threat, k, step, random_start, restarts=1, generator=None, loss="ce") -> AttackOutcome:
    """k projected signed-gradient steps; across restarts keep any fooling point."""
    loss_fn = LOSSES[loss]
    clean_correct = _correct(model, x, y)
    best = None
    robust = clean_correct.clone()
    for _ in range(restarts):
        x_adv = x + pgd_delta(model, x, y, threat, k, step, random_start, generator, loss_fn)
        ok = _correct(model, x_adv, y)
        if best is None:
            best = x_adv
        else:
            # replace only examples that were still robust and are now fooled
            swap = (robust & ~ok).view(-1, *([1] * (x.dim() - 1)))
            best = torch.where(swap, x_adv, best)
        robust &= ok
    return _outcome(model, x, y, best, clean_correct)


def apgd_checkpoints(k: int) -> List[int]:
    """Iterations at which APGD reconsiders its step size."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    its = {int(math.ceil(q * k - 1e-9)) for q in p[1:]}
    return sorted(i for i in its if 1 <= i <= k)


def apgd_attack(
    model, x, y, threat, k, loss_kind="ce", random_start=True, generator=None,
    rho=0.75, momentum=0.75, return_trace=False,
):
    """APGD with momentum and checkpoint step halving.

    Each example keeps its own step size. At a checkpoint the step is halved
    if the objective increased in fewer than ``rho`` of the steps since the
    previous checkpoint, or if neither the step nor the best objective changed;
    after halving the iterate restarts from that example's best point.
    Returns the first misclassifying iterate per example, otherwise the
    highest-loss one.
    """
    if k < 1:
        raise ValueError("APGD needs k >= 1")
    if loss_kind not in LOSSES:
        raise ValueError(f"unknown loss {loss_kind!r}")
    loss_fn = LOSSES[loss_kind]
    eps, lo, hi = threat.epsilon, threat.data_min, threat.data_max
    n = x.shape[0]
    shape = (-1,) + (1,) * (x.dim() - 1)

    clean_correct = _correct(model, x, y)
    if random_start:
        x_cur = x + project(x, uniform_delta(x, eps, generator), eps, lo, hi)
    else:
        x_cur = x.clone()

    loss, grad, logits = input_gradient(model, x_cur, y, loss_fn, return_logits=True)
    fooled = logits.argmax(1) != y
    x_best, loss_best, grad_best = x_cur.clone(), loss.clone(), grad
    x_fool = torch.where(fooled.view(shape), x_cur, x)
    ever_fooled = fooled.clone()

    eta = torch.full((n,), 2 * eps, dtype=x.dtype, device=x.device)
    checkpoints = set(apgd_checkpoints(k))
    last_ckpt = 0
    improved = torch.zeros(n, device=x.device)
    eta_at_last = eta.clone()
    best_at_last = loss_best.clone()
    x_prev = x_cur.clone()
    loss_prev = loss.clone()
    trace = [loss_best.clone()]

    for i in range(k):
        with torch.no_grad():
            z = x + project(x, x_cur - x + eta.view(shape) * grad.sign(), eps, lo, hi)
            if i == 0:
                x_new = z
            else:
                mix = x_cur + momentum * (z - x_cur) + (1 - momentum) * (x_cur - x_prev)
                x_new = x + project(x, mix - x, eps, lo, hi)
        x_prev = x_cur
        x_cur = x_new
        loss, grad, logits = input_gradient(model, x_cur, y, loss_fn, return_logits=True)
        with torch.no_grad():
            now_fooled = logits.argmax(1) != y
            first = now_fooled & ~ever_fooled
            x_fool = torch.where(first.view(shape), x_cur, x_fool)
            ever_fooled |= now_fooled

            improved += (loss > loss_prev).float()
            loss_prev = loss
            better = loss > loss_best
            x_best = torch.where(better.view(shape), x_cur, x_best)
            grad_best = torch.where(better.view(shape), grad, grad_best)
            loss_best = torch.where(better, loss, loss_best)
            trace.append(loss_best.clone())

            it = i + 1
            if it in checkpoints and it < k:
                span = it - last_ckpt
                cond1 = improved < rho * span
                cond2 = (eta_at_last == eta) & (best_at_last == loss_best)
                halve = cond1 | cond2
                eta_at_last = eta.clone()
                best_at_last = loss_best.clone()
                eta = torch.where(halve, eta / 2, eta)
                hv = halve.view(shape)
                x_cur = torch.where(hv, x_best, x_cur)
                grad = torch.where(hv, grad_best, grad)
                improved.zero_()
                last_ckpt = it

    x_adv = torch.where(ever_fooled.view(shape), x_fool, x_best)
    out = _outcome(model, x, y, x_adv, clean_correct)
    if return_trace:
        return out, torch.stack(trace)
    return out


def run_attack(model, x, y, threat, spec: AttackSpec, generator=None) -> AttackOutcome:
    if spec.kind == "fgsm":
        return fgsm_attack(model, x, y, threat)
    if spec.kind == "pgd":
        return pgd_attack(model, x, y, threat, spec.iterations, spec.step, spec.random_start, spec.restarts, generator)
    loss_kind = spec.kind.split("-")[1]
    outs = []
    for _ in range(spec.restarts):
        outs.append(apgd_attack(model, x, y, threat, spec.iterations, loss_kind, spec.random_start, generator))
    if len(outs) == 1:
        return outs[0]
    correct = outs[0].per_example_correct.clone()
    x_adv = outs[0].adversarial_inputs
    shape = (-1,) + (1,) * (x.dim() - 1)
    for o in outs[1:]:
        swap = correct & ~o.per_example_correct
        x_adv = torch.where(swap.view(shape), o.adversarial_inputs, x_adv)
        correct &= o.per_example_correct
    return AttackOutcome(x_adv, correct, 100.0 * correct.float().mean().item())


# ---------------------------------------------------------------------------
# worst-case aggregation


@dataclass
class EnsembleResult:
    clean_correct: np.ndarray
    member_correct: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def robust_correct(self) -> np.ndarray:
        out = self.clean_correct.copy()
        for c in self.member_correct.values():
            out &= c
        return out

    @staticmethod
    def _pct(v):
        return 100.0 * float(v.mean()) if len(v) else 0.0

    @property
    def clean_pct(self) -> float:
        return self._pct(self.clean_correct)

    @property
    def robust_pct(self) -> float:
        return self._pct(self.robust_correct)

    def member_pct(self) -> Dict[str, float]:
        return {k: self._pct(v) for k, v in self.member_correct.items()}


def combine(clean_correct, member_correct: Dict[str, Sequence[bool]]) -> EnsembleResult:
    return EnsembleResult(
        np.asarray(clean_correct, dtype=bool),
        {k: np.asarray(v, dtype=bool) for k, v in member_correct.items()},
    )


def ensemble_accuracy(model, data, attacks: Sequence[AttackSpec], threat, batch_size=256, generator=None, device=None):
    """Clean + every attack, per example; robust only if correct under all of them.

    ``data`` is either an ``(x, y)`` tensor pair or an object with ``len`` and
    ``batch(idx)`` (dataio.ImageSet).
    """
    if not attacks:
        raise ValueError("attack list must be nonempty")
    if isinstance(data, tuple):
        x_all, y_all = data
        n = len(y_all)
        get = lambda idx: (x_all[idx], y_all[idx])  # noqa: E731
    else:
        n = len(data)
        get = lambda idx: data.batch(idx)  # noqa: E731
    device = device or next(model.parameters()).device
    clean, members = [], {a.label: [] for a in attacks}
    for start in range(0, n, batch_size):
        idx = torch.arange(start, min(n, start + batch_size))
        x, y = get(idx)
        x, y = x.to(device), y.to(device)
        clean.append(_correct(model, x, y).cpu())
        for a in attacks:
            members[a.label].append(run_attack(model, x, y, threat, a, generator).per_example_correct.cpu())
    cat = lambda parts: torch.cat(parts).numpy() if parts else np.zeros(0, bool)  # noqa: E731
    return combine(cat(clean), {k: cat(v) for k, v in members.items()})
