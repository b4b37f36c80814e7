"""Central finite-difference gradient checks shared by the test modules.

Piecewise-linear units (ReLU, abs, hinge) make a loss non-differentiable on a
measure-zero set. A coordinate whose +h / -h probes land on different pieces
is not a valid finite-difference sample, so callers may pass ``signature``,
a function returning the on/off pattern of those units; such coordinates are
skipped and reported.

Float32 gradients are compared against a float64 central difference of the
same function (``reference``): a float32 difference quotient at h = 1e-3 is
dominated by rounding of the loss value itself.
"""

from contextlib import contextmanager

import torch
import torch.nn as nn


def fd_relative_error(fn, inputs, h=1e-3, coords=None, seed=0, signature=None, reference=None):
    """Relative error of autograd vs central differences for scalar ``fn``.

    Returns ``(error, n_checked)`` with ``error = |g_auto - g_fd| /
    max(|g_auto|, |g_fd|)`` in the 2-norm over checked coordinates.
    ``reference`` (defaults to ``fn``) is evaluated in float64 to form the
    difference quotient; ``signature`` is evaluated on the same probes.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    auto = torch.autograd.grad(fn(*inputs), inputs, allow_unused=True)
    ref = reference or fn
    base = [x.detach().double() if reference is not None else x.detach() for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    a_all, n_all = [], []
    for k, x in enumerate(base):
        flat = x.view(-1)
        idx = torch.arange(flat.numel())
        if coords is not None and coords < flat.numel():
            idx = torch.randperm(flat.numel(), generator=gen)[:coords]
        g = auto[k].reshape(-1) if auto[k] is not None else torch.zeros(flat.numel())
        for i in idx.tolist():
            vals, sigs = [], []
            for step in (h, -h):
                args = [y.clone() for y in base]
                args[k].view(-1)[i] = flat[i] + step
                with torch.no_grad():
                    vals.append(ref(*args).item())
                    if signature is not None:
                        sigs.append(signature(*args))
            if sigs and not torch.equal(sigs[0], sigs[1]):
                continue
            n_all.append((vals[0] - vals[1]) / (2 * h))
            a_all.append(g[i].item())
    if not a_all:
        raise AssertionError("no differentiable coordinate was sampled")
    a = torch.tensor(a_all, dtype=torch.float64)
    n = torch.tensor(n_all, dtype=torch.float64)
    scale = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / scale, len(a_all)


@contextmanager
def relu_recorder(model: nn.Module):
    """Collect the on/off pattern of every ``nn.ReLU`` in ``model`` per forward."""
    record = []

    def hook(mod, inp, out):
        record.append((inp[0] > 0).flatten())

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.ReLU)]
    try:
        yield record
    finally:
        for handle in handles:
            handle.remove()


def pattern_of(record, run):
    """Signature helper: clear ``record``, call ``run()``, return the pattern."""
    record.clear()
    run()
    return torch.cat(record) if record else torch.zeros(0, dtype=torch.bool)
