"""Parameter and multiply-accumulate counting.

Conventions:

* ``params`` counts trainable scalars only (frozen context models excluded).
* ``flops`` counts multiply-accumulates of the layers executed by one forward
  pass on a single image: conv ``k*k*C_in/groups*C_out*H_out*W_out``,
  transposed conv ``k*k*C_in*C_out/groups*H_in*W_in``, linear ``in*out``.
  BatchNorm, activations, pooling and elementwise tensor arithmetic count as
  zero. Any other leaf layer raises :class:`UnsupportedLayerError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ..classifiers import ReLUTap

ZERO_COST = (nn.BatchNorm1d, nn.BatchNorm2d, nn.ReLU, nn.Sigmoid, nn.Tanh, nn.Identity,
             nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.Flatten, nn.Dropout,
             ReLUTap)


class UnsupportedLayerError(TypeError):
    pass


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    params: int
    flops: int
    layers: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"{'layer':<48} {'kind':<16} {'params':>12} {'MACs':>14}"]
        for l in self.layers:
            lines.append(f"{l.name:<48} {l.kind:<16} {l.params:>12} {l.macs:>14}")
        lines.append(f"{'total':<48} {'':<16} {self.params:>12} {self.flops:>14}")
        return "\n".join(lines)


def _own_params(mod: nn.Module) -> int:
    """Trainable scalars of a single layer from its hyperparameters."""
    if isinstance(mod, nn.Conv2d):
        n = mod.out_channels * (mod.in_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
        bias = mod.bias
        w = mod.weight
    elif isinstance(mod, nn.ConvTranspose2d):
        n = mod.in_channels * (mod.out_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
        bias, w = mod.bias, mod.weight
    elif isinstance(mod, nn.Linear):
        n = mod.in_features * mod.out_features
        bias, w = mod.bias, mod.weight
    elif isinstance(mod, nn.modules.batchnorm._BatchNorm):
        if not mod.affine:
            return 0
        return 2 * mod.num_features if mod.weight.requires_grad else 0
    else:
        if any(True for _ in mod.parameters(recurse=False)):
            raise UnsupportedLayerError(f"cannot count parameters of {type(mod).__name__}")
        return 0
    total = n if w.requires_grad else 0
    if bias is not None and bias.requires_grad:
        total += bias.numel()
    return total


def _macs(mod: nn.Module, inp: torch.Tensor, out: torch.Tensor) -> int:
    if isinstance(mod, nn.Conv2d):
        kh, kw = mod.kernel_size
        h, w = out.shape[-2:]
        return kh * kw * (mod.in_channels // mod.groups) * mod.out_channels * h * w
    if isinstance(mod, nn.ConvTranspose2d):
        kh, kw = mod.kernel_size
        h, w = inp.shape[-2:]
        return kh * kw * mod.in_channels * (mod.out_channels // mod.groups) * h * w
    if isinstance(mod, nn.Linear):
        rows = inp.numel() // (inp.shape[0] * mod.in_features)
        return rows * mod.in_features * mod.out_features
    if isinstance(mod, ZERO_COST):
        return 0
    raise UnsupportedLayerError(f"no MAC rule for {type(mod).__name__}")


def _is_leaf(mod: nn.Module) -> bool:
    return next(mod.children(), None) is None


def count_complexity(model: nn.Module, input_hw, in_channels: int = 3) -> ComplexityReport:
    """Count trainable parameters and MACs for one ``in_channels x H x W`` image."""
    h, w = (input_hw, input_hw) if isinstance(input_hw, int) else input_hw
    names = {id(m): n for n, m in model.named_modules()}
    macs: dict[int, int] = {}
    errors = []

    def hook(mod, inputs, output):
        try:
            macs[id(mod)] = macs.get(id(mod), 0) + _macs(mod, inputs[0], output)
        except UnsupportedLayerError as exc:
            errors.append(exc)

    handles = [m.register_forward_hook(hook) for m in model.modules() if _is_leaf(m)]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, in_channels, h, w))
    finally:
        for hd in handles:
            hd.remove()
        model.train(was_training)
    if errors:
        raise errors[0]

    layers = []
    for mod in model.modules():
        if not _is_leaf(mod):
            if any(True for _ in mod.parameters(recurse=False)):
                raise UnsupportedLayerError(
                    f"container {type(mod).__name__} holds its own parameters")
            continue
        p, m = _own_params(mod), macs.get(id(mod), 0)
        if p or m:
            layers.append(LayerCost(names[id(mod)], type(mod).__name__, p, m))
    return ComplexityReport(sum(l.params for l in layers), sum(l.macs for l in layers), layers)
