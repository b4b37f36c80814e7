"""Baseline backbones with insertion points, SE comparator and block injection.

Every backbone routes the ReLU following each insertion point through a
swappable tap module called as ``tap(feature, ctx)``. A plain backbone uses
:class:`ReLUTap`; :func:`insert_attend_blocks` swaps selected taps for
:class:`AttendTap` on a copy of the backbone.

Insertion points for 32 px inputs:

* ``stage2`` (16x16): pre-activation ResNet/WRN -- the BN output at the head of
  the first stage-3 block, i.e. the normalized stage-2 output; VGG -- the conv
  output preceding the 16x16 -> 8x8 max pooling.
* ``stage3`` (8x8): ResNet/WRN -- the final BN before global pooling; VGG -- the
  conv output preceding the 8x8 -> 4x4 max pooling.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .attend import AttendBlock, AttendBlockConfig, AttendContext, ContextHead, resample_context
from .context import ContextModelConfig, ContextNet

FAMILIES = ("vgg", "preact_resnet", "wrn")
VGG_LAYOUTS = {
    8: [32, "M", 64, "M", 128, 128, "M", 256, 256, "M", 256, "M"],
    13: [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    16: [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M",
         512, 512, 512, "M"],
}
TAP_NAMES = ("stage2", "stage3")


@dataclass(frozen=True)
class InsertionPoint:
    name: str
    channels: int
    size: int  # spatial H == W


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "preact_resnet"
    depth: int = 20
    width: int = 1
    n_classes: int = 10
    se: bool = False
    se_reduction: int = 16
    resolution: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "vgg" and self.depth not in VGG_LAYOUTS:
            raise ValueError(f"VGG depth must be one of {sorted(VGG_LAYOUTS)}")
        if self.family == "preact_resnet" and (self.depth - 2) % 6:
            raise ValueError("pre-activation ResNet depth must be 6m+2")
        if self.family == "wrn" and (self.depth - 4) % 6:
            raise ValueError("WRN depth must be 6m+4")
        if self.family in ("preact_resnet", "wrn") and self.depth < 8:
            raise ValueError("residual depth too small")
        if self.family == "vgg" and self.se:
            raise ValueError("SE blocks are only wired into residual families")
        if self.width < 1 or self.n_classes < 2:
            raise ValueError("width must be >= 1 and n_classes >= 2")
        if self.resolution != 32:
            raise ValueError("backbones are defined for 32 px inputs")

    @property
    def name(self) -> str:
        if self.family == "vgg":
            return f"vgg{self.depth}"
        if self.family == "wrn":
            return f"wrn-{self.depth}-{self.width}"
        return f"resnet{self.depth}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def parse_backbone(name: str, n_classes: int = 10, se: bool = False) -> BackboneConfig:
    """``resnet20``, ``vgg13``, ``wrn-16-10`` style names to a config."""
    name = name.lower()
    if name.startswith("wrn-"):
        _, depth, width = name.split("-")
        return BackboneConfig("wrn", int(depth), int(width), n_classes, se)
    if name.startswith("resnet"):
        return BackboneConfig("preact_resnet", int(name[6:]), 1, n_classes, se)
    if name.startswith("vgg"):
        return BackboneConfig("vgg", int(name[3:]), 1, n_classes, se)
    raise ValueError(f"unknown backbone name {name!r}")


class ReLUTap(nn.Module):
    def forward(self, x, ctx=None):
        return F.relu(x)


class AttendTap(nn.Module):
    def __init__(self, block: AttendBlock):
        super().__init__()
        self.block = block

    def forward(self, x, ctx: Optional[AttendContext] = None):
        if ctx is None:
            raise RuntimeError("attend tap needs a context; call through the augmented model")
        return self.block(x, ctx)


class SEBlock(nn.Module):
    """Squeeze-and-excitation: pool -> FC bottleneck -> sigmoid channel scale."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"{channels} channels not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def scale(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.scale(x)[:, :, None, None]


def se_block(feature: torch.Tensor, block: SEBlock) -> torch.Tensor:
    return block(feature)


class PreActBlock(nn.Module):
    """BN-ReLU-conv3x3-BN-ReLU-conv3x3 with identity or 1x1 projection shortcut."""

    def __init__(self, cin, cout, stride=1, se=False, se_reduction=16):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.act1 = ReLUTap()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = (nn.Conv2d(cin, cout, 1, stride, bias=False)
                         if stride != 1 or cin != cout else None)
        self.se = SEBlock(cout, se_reduction) if se else None

    def forward(self, x, ctx=None):
        out = self.act1(self.bn1(x), ctx)
        short = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        if self.se is not None:
            out = self.se(out)
        return out + short


class Backbone(nn.Module):
    kind = "backbone"

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.points: dict[str, InsertionPoint] = {}

    def tap_module(self, name: str) -> nn.Module:
        raise NotImplementedError

    def set_tap(self, name: str, module: nn.Module) -> None:
        raise NotImplementedError


class PreActResNet(Backbone):
    """Pre-activation ResNet (depth 6m+2) and Wide ResNet (depth 6m+4, widen k)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        if cfg.family == "wrn":
            m, k = (cfg.depth - 4) // 6, cfg.width
        else:
            m, k = (cfg.depth - 2) // 6, 1
        widths = (16 * k, 32 * k, 64 * k)
        self.conv1 = nn.Conv2d(3, 16, 3, 1, 1, bias=False)
        stages, cin = [], 16
        for s, w in enumerate(widths):
            blocks = []
            for b in range(m):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(PreActBlock(cin, w, stride, cfg.se, cfg.se_reduction))
                cin = w
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)
        self.bn = nn.BatchNorm2d(widths[-1])
        self.act = ReLUTap()
        self.fc = nn.Linear(widths[-1], cfg.n_classes)
        size = cfg.resolution
        self.points = {"stage2": InsertionPoint("stage2", widths[1], size // 2),
                       "stage3": InsertionPoint("stage3", widths[2], size // 4)}

    def tap_module(self, name):
        return {"stage2": self.stages[2][0].act1, "stage3": self.act}[name]

    def set_tap(self, name, module):
        if name == "stage2":
            self.stages[2][0].act1 = module
        elif name == "stage3":
            self.act = module
        else:
            raise KeyError(name)

    def forward(self, x, ctx=None):
        out = self.conv1(x)
        for stage in self.stages:
            for block in stage:
                out = block(out, ctx)
        out = self.act(self.bn(out), ctx)
        out = out.mean(dim=(2, 3))
        return self.fc(out)


class VGG(Backbone):
    """VGG with BatchNorm, no dropout and one fully connected layer."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        layout = VGG_LAYOUTS[cfg.depth]
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        self.acts = nn.ModuleList()
        self.pool_after: list[bool] = []
        tap_index = {}
        cin, size = 3, cfg.resolution
        for i, item in enumerate(layout):
            if item == "M":
                continue
            self.convs.append(nn.Conv2d(cin, item, 3, 1, 1, bias=False))
            self.bns.append(nn.BatchNorm2d(item))
            self.acts.append(ReLUTap())
            pooled = i + 1 < len(layout) and layout[i + 1] == "M"
            self.pool_after.append(pooled)
            if pooled and size in (cfg.resolution // 2, cfg.resolution // 4):
                name = "stage2" if size == cfg.resolution // 2 else "stage3"
                tap_index[name] = len(self.convs) - 1
                self.points[name] = InsertionPoint(name, item, size)
            if pooled:
                size //= 2
            cin = item
        self._tap_index = tap_index
        self.fc = nn.Linear(cin * size * size, cfg.n_classes)

    def tap_module(self, name):
        return self.acts[self._tap_index[name]]

    def set_tap(self, name, module):
        self.acts[self._tap_index[name]] = module

    def forward(self, x, ctx=None):
        out = x
        for conv, bn, act, pool in zip(self.convs, self.bns, self.acts, self.pool_after):
            out = act(bn(conv(out)), ctx)
            if pool:
                out = F.max_pool2d(out, 2)
        return self.fc(out.flatten(1))


def build_backbone(cfg: BackboneConfig) -> Backbone:
    if cfg.family == "vgg":
        return VGG(cfg)
    return PreActResNet(cfg)


checkpoint.register_kind("backbone", lambda d: build_backbone(BackboneConfig.from_dict(d)))


def export_feature_context(model: Backbone, x: torch.Tensor, tap: str = "stage3") -> torch.Tensor:
    """Activated feature map at ``tap`` of a trained classifier, detached.

    Used as a discriminative-model context in place of the context network.
    """
    if tap not in model.points:
        raise ValueError(f"unknown tap {tap!r}; available: {sorted(model.points)}")
    if model.points[tap].size != 8:
        raise ValueError(f"tap {tap!r} is {model.points[tap].size}x{model.points[tap].size}, "
                         "a context must be 8x8")
    captured = {}
    handle = model.tap_module(tap).register_forward_hook(
        lambda mod, inp, out: captured.__setitem__("feat", out))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(x)
    finally:
        handle.remove()
        model.train(was_training)
    return captured["feat"].detach().clone()


class FeatureContext(nn.Module):
    """Adapter giving a trained classifier the ``encode`` interface of a context model."""

    kind = "feature_context"

    def __init__(self, model: Backbone, tap: str = "stage3"):
        super().__init__()
        self.model = model
        self.tap = tap

    def encode(self, x):
        return export_feature_context(self.model, x, self.tap)


@dataclass(frozen=True)
class AugmentedConfig:
    backbone: BackboneConfig
    context: dict  # {"kind": "context", "config": {...}} or {"kind": "feature_context", ...}
    points: tuple = TAP_NAMES
    attend: AttendBlockConfig = field(default_factory=AttendBlockConfig)

    def to_dict(self):
        return {"backbone": self.backbone.to_dict(), "context": self.context,
                "points": list(self.points), "attend": self.attend.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(BackboneConfig.from_dict(d["backbone"]), d["context"], tuple(d["points"]),
                   AttendBlockConfig(**d["attend"]))


def _context_descriptor(context_model) -> dict:
    if isinstance(context_model, ContextNet):
        return {"kind": "context", "config": context_model.config.to_dict()}
    if isinstance(context_model, FeatureContext):
        return {"kind": "feature_context", "tap": context_model.tap,
                "backbone": context_model.model.config.to_dict()}
    raise TypeError(f"unsupported context model {type(context_model).__name__}")


def _context_from_descriptor(d: dict):
    if d["kind"] == "context":
        return ContextNet(ContextModelConfig.from_dict(d["config"]))
    if d["kind"] == "feature_context":
        return FeatureContext(build_backbone(BackboneConfig.from_dict(d["backbone"])), d["tap"])
    raise ValueError(f"unknown context kind {d['kind']!r}")


class AugmentedClassifier(nn.Module):
    """A backbone whose selected taps are attend blocks fed by a frozen context model."""

    kind = "augmented"

    def __init__(self, backbone: Backbone, context_model, points, cfg: AttendBlockConfig):
        super().__init__()
        self.backbone = backbone
        self.context = context_model
        self.head = ContextHead(cfg)
        self.points = tuple(points)
        self.blocks = nn.ModuleDict()
        for name in self.points:
            if name not in backbone.points:
                raise ValueError(f"backbone has no insertion point {name!r}")
            block = AttendBlock(backbone.points[name].channels, cfg)
            self.blocks[name] = block
            backbone.set_tap(name, AttendTap(block))
        self.config = AugmentedConfig(backbone.config, _context_descriptor(context_model),
                                      self.points, cfg)
        self.context.requires_grad_(False)
        self.context.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.context.eval()
        return self

    def trainable_parameters(self):
        return (p for p in self.parameters() if p.requires_grad)

    def attend_context(self, x) -> AttendContext:
        with torch.no_grad():
            t = self.context.encode(x)
        return self.head(t)

    def forward(self, x):
        return self.backbone(x, self.attend_context(x))


def _build_augmented(d):
    cfg = AugmentedConfig.from_dict(d)
    return AugmentedClassifier(build_backbone(cfg.backbone), _context_from_descriptor(cfg.context),
                               cfg.points, cfg.attend)


checkpoint.register_kind("augmented", _build_augmented)


def insert_attend_blocks(model: Backbone, context_model, points=TAP_NAMES,
                         cfg: AttendBlockConfig = AttendBlockConfig(),
                         context_size: int = 8) -> AugmentedClassifier:
    """Copy ``model`` and replace the ReLU at each named point by an attend block.

    The context model is frozen. Every point must be reachable from the
    ``context_size`` grid by an integer resampling ratio.
    """
    probe = torch.zeros(1, 1, context_size, context_size)
    for name in points:
        if name not in model.points:
            raise ValueError(f"backbone has no insertion point {name!r}")
        size = model.points[name].size
        resample_context(probe, (size, size))  # raises when unreachable
    return AugmentedClassifier(copy.deepcopy(model), context_model, points, cfg)
