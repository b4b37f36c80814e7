"""Activation-based attention maps and heatmap export."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from ..classifiers import AugmentedClassifier


def activation_map(feature: torch.Tensor) -> torch.Tensor:
    """Per-pixel sum of squared activations, min-max normalized per sample.

    ``feature`` is (B, C, H, W); returns (B, 1, H, W) in [0, 1]. A sample with
    zero range maps to 0.5 everywhere.
    """
    a = feature.pow(2).sum(dim=1, keepdim=True)
    flat = a.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    flat_range = span == 0
    out = (a - lo) / torch.where(flat_range, torch.ones_like(span), span)
    return torch.where(flat_range, torch.full_like(out, 0.5), out)


def activation_attention(model, x: torch.Tensor, tap: str = "stage3") -> torch.Tensor:
    """Attention map of the activated features at ``tap`` (eval mode)."""
    backbone = model.backbone if isinstance(model, AugmentedClassifier) else model
    if tap not in backbone.points:
        raise ValueError(f"unknown tap {tap!r}; available: {sorted(backbone.points)}")
    captured = {}
    handle = backbone.tap_module(tap).register_forward_hook(
        lambda mod, inp, out: captured.__setitem__("feat", out))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(x)
    finally:
        handle.remove()
        model.train(was_training)
    return activation_map(captured["feat"])


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_heatmap(attention: torch.Tensor, path, image: Optional[torch.Tensor] = None):
    """Write ``attention`` (H x W or 1 x H x W, values in [0, 1]) as 8-bit grayscale PNG.

    With ``image`` (3 x H' x W' in [-1, 1]) an RGB overlay is also written
    next to it as ``<stem>_overlay.png``. Returns the written paths.
    """
    m = attention.detach().cpu().double().squeeze()
    if m.ndim != 2:
        raise ValueError(f"expected a single 2-D map, got shape {tuple(attention.shape)}")
    if m.min() < 0 or m.max() > 1:
        raise ValueError("attention values must lie in [0, 1]")
    path = Path(path)
    gray = quantize(m.numpy())
    Image.fromarray(gray).save(path, format="PNG")
    written = [path]
    if image is not None:
        written.append(_write_overlay(m, image, path.with_name(path.stem + "_overlay.png")))
    return written


def _write_overlay(m: torch.Tensor, image: torch.Tensor, path: Path) -> Path:
    img = image.detach().cpu().double()
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("overlay image must be (3, H, W)")
    h, w = img.shape[1:]
    heat = Image.fromarray(quantize(m.numpy())).resize((w, h), Image.NEAREST)
    heat = np.asarray(heat, dtype=np.float64) / 255.0
    base = ((img.numpy().transpose(1, 2, 0) + 1.0) / 2.0).clip(0, 1)
    # red for attended regions, blue elsewhere
    color = np.stack([heat, np.zeros_like(heat), 1.0 - heat], axis=-1)
    blend = 0.5 * base + 0.5 * color
    Image.fromarray(quantize(blend)).save(path, format="PNG")
    return path
