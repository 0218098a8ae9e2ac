"""Auxiliary regularizers and gradient transforms used by the FastAT methods."""
import logging
import math

import torch

from ..attacks import ce_loss, input_gradient, project, uniform_delta

log = logging.getLogger(__name__)


def zero_grad_mask(grad: torch.Tensor, q: float) -> torch.Tensor:
    """Zero the floor(q * d) smallest-magnitude coordinates of each example's gradient."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    flat = grad.reshape(grad.shape[0], -1)
    k = int(math.floor(q * flat.shape[1] + 1e-9))
    if k == 0:
        return grad.clone()
    order = flat.abs().argsort(dim=1, stable=True)
    mask = torch.ones_like(flat)
    mask.scatter_(1, order[:, :k], 0.0)
    return (flat * mask).view_as(grad)


def grad_align_penalty(model, x, y, threat, weight, generator=None, eta=None):
    """weight * mean(1 - cos(grad at x, grad at x + eta)), eta ~ U[-eps, eps].

    Built with create_graph so the penalty can be backpropagated into the
    parameters.
    """
    if weight == 0:
        return x.new_zeros(())
    eps = threat.epsilon
    if eta is None:
        eta = uniform_delta(x, eps, generator)
    x_near = x + project(x, eta, eps, threat.data_min, threat.data_max)
    _, g1 = input_gradient(model, x, y, create_graph=True)
    _, g2 = input_gradient(model, x_near, y, create_graph=True)
    g1, g2 = g1.flatten(1), g2.flatten(1)
    n1, n2 = g1.norm(dim=1), g2.norm(dim=1)
    degenerate = (n1 == 0) | (n2 == 0)
    if degenerate.any():
        log.warning("grad-align: %d examples with zero input gradient; cosine set to 1", int(degenerate.sum()))
    safe = torch.where(degenerate, torch.ones_like(n1), n1 * n2)
    cos = torch.where(degenerate, torch.ones_like(n1), (g1 * g2).sum(1) / safe)
    return weight * (1.0 - cos).mean()


def nuclear_consistency_penalty(logits_clean, logits_adv, weight):
    """weight * ||logits_adv - logits_clean||_* / B over the (B, K) difference."""
    if logits_clean.shape != logits_adv.shape:
        raise ValueError("logit shapes differ")
    diff = logits_adv - logits_clean
    return weight * torch.linalg.matrix_norm(diff, ord="nuc") / diff.shape[0]


def _model_loss(model, x, y):
    return ce_loss(model(x), y)


def local_linearity_penalty(
    model, x, y, threat, weight, generator=None, loss_fn=None, x_a=None, x_b=None, alpha=None,
):
    """weight * mean_i (l(a x_a + (1-a) x_b) - a l(x_a) - (1-a) l(x_b))^2.

    x_a and x_b default to uniform draws from the eps-ball around x; alpha
    defaults to U[0, 1] per example. ``loss_fn(model, x, y)`` must return
    per-example losses.
    """
    if weight == 0:
        return x.new_zeros(())
    loss_fn = loss_fn or _model_loss
    eps, lo, hi = threat.epsilon, threat.data_min, threat.data_max
    if x_a is None:
        x_a = x + project(x, uniform_delta(x, eps, generator), eps, lo, hi)
    if x_b is None:
        x_b = x + project(x, uniform_delta(x, eps, generator), eps, lo, hi)
    n = x.shape[0]
    if alpha is None:
        alpha = torch.rand(n, generator=generator).to(x.device, x.dtype)
    alpha = torch.as_tensor(alpha, dtype=x.dtype, device=x.device).reshape(-1)
    if alpha.numel() == 1:
        alpha = alpha.expand(n)
    a = alpha.view((-1,) + (1,) * (x.dim() - 1))
    x_mid = a * x_a + (1 - a) * x_b
    la, lb, lm = loss_fn(model, x_a, y), loss_fn(model, x_b, y), loss_fn(model, x_mid, y)
    err = lm - alpha * la - (1 - alpha) * lb
    return weight * (err ** 2).mean()
