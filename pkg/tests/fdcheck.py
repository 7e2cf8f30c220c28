"""Central finite-difference gradient checking at float64."""

from __future__ import annotations

import torch
from torch.func import functional_call

STEP = 1e-5
TOL = 1e-4
# gradients that vanish analytically (e.g. a key bias under softmax) would
# otherwise compare finite-difference noise against itself
SCALE_FLOOR = 1e-3


def numeric_grad(fn, tensors, i, step=STEP):
    t = tensors[i]
    grad = torch.zeros_like(t)
    flat = t.data.view(-1)
    g = grad.view(-1)
    for j in range(flat.numel()):
        orig = flat[j].item()
        flat[j] = orig + step
        plus = fn(*tensors).item()
        flat[j] = orig - step
        minus = fn(*tensors).item()
        flat[j] = orig
        g[j] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max absolute deviation scaled by the larger gradient's max magnitude."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), SCALE_FLOOR)
    return (analytic - numeric).abs().max().item() / scale


def max_relative_error(fn, tensors, step=STEP) -> float:
    """``fn`` maps the float64 tensors to a scalar; returns the worst error over all tensors."""
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(*tensors)
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for i, t in enumerate(tensors):
            a = analytic[i] if analytic[i] is not None else torch.zeros_like(t)
            worst = max(worst, relative_error(a, numeric_grad(fn, tensors, i, step)))
    return worst


def module_check(module, fn, inputs, step=STEP) -> float:
    """Gradient check over ``inputs`` and every parameter of ``module``.

    ``fn(*inputs)`` must evaluate ``module``; its parameters are swapped in
    functionally so they can be perturbed like inputs.
    """
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().clone() for _, p in module.named_parameters()]
    runner = _Runner(module, fn)
    n_in = len(inputs)

    def wrapped(*tensors):
        state = {f"inner.{k}": v for k, v in zip(names, tensors[n_in:])}
        return functional_call(runner, state, tuple(tensors[:n_in]))

    return max_relative_error(wrapped, list(inputs) + params, step)


class _Runner(torch.nn.Module):
    def __init__(self, inner, fn):
        super().__init__()
        self.inner = inner
        self.fn = fn

    def forward(self, *xs):
        return self.fn(*xs)
