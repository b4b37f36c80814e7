"""Context-guided attention block.

Given a context tensor ``T`` and a pre-activation feature map ``F``::

    pooled = (mean_c T, max_c T)                  # 2 x H x W
    M  = L1(pooled)      in (0, 1)^{1 x H x W}    # attention map
    Me = L2(pooled)                               # embedded context
    Fe = L3(F)                                    # embedded feature
    A  = sigmoid(sum_hw Me * Fe)  in (0, 1)^C     # channel relevance
    F' = A * M * F                                # channel-aware amplification
    out = ReLU(F + F' + R1(F'))                   # re-bias + identity

L1 and L2 run once per input at the context resolution; their outputs are
resampled for every insertion point (:class:`AttendContext`). L3 and R1 are
owned by each insertion point.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class PooledContext(NamedTuple):
    mean_map: torch.Tensor  # (B, 1, H, W)
    max_map: torch.Tensor   # (B, 1, H, W)

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.mean_map, self.max_map], dim=1)


@dataclass(frozen=True)
class AttendBlockConfig:
    hidden: int = 16
    reduction: float = 0.5
    resample: str = "nearest"
    use_channel_attention: bool = True
    use_rebias: bool = True

    def __post_init__(self):
        if self.reduction not in (0.5, 0.25):
            raise ValueError("reduction must be 1/2 (32 px) or 1/4 (224 px)")
        if self.resample != "nearest":
            raise ValueError(f"unsupported resample mode {self.resample!r}")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")

    def to_dict(self):
        return asdict(self)


def pool_context(t: torch.Tensor) -> PooledContext:
    """Per-pixel mean and max over the channel axis."""
    if t.ndim != 4 or t.shape[1] < 1:
        raise ValueError(f"context must be (B, C>=1, H, W), got {tuple(t.shape)}")
    return PooledContext(t.mean(dim=1, keepdim=True), t.amax(dim=1, keepdim=True))


def make_attention_net(hidden: int = 16) -> nn.Sequential:
    """L1: c(3,1,1)-BN-ReLU-c(3,1,1)-BN-Sigmoid on the two pooled maps."""
    return nn.Sequential(
        nn.Conv2d(2, hidden, 3, 1, 1), nn.BatchNorm2d(hidden), nn.ReLU(inplace=True),
        nn.Conv2d(hidden, 1, 3, 1, 1), nn.BatchNorm2d(1), nn.Sigmoid())


def make_context_embedding(hidden: int = 16) -> nn.Sequential:
    """L2: c(3,1,1)-BN-ReLU-c(3,1,1), no output squashing."""
    return nn.Sequential(
        nn.Conv2d(2, hidden, 3, 1, 1), nn.BatchNorm2d(hidden), nn.ReLU(inplace=True),
        nn.Conv2d(hidden, 1, 3, 1, 1))


def make_bottleneck(channels: int, reduction: float = 0.5) -> nn.Sequential:
    """BN-ReLU-c(1,1,0)-BN-ReLU-c(3,1,1)-BN-ReLU-c(1,1,0), channel preserving.

    Shared recipe of L3 and R1. Only the last conv carries a bias.
    """
    inner = max(1, int(channels * reduction))
    return nn.Sequential(
        nn.BatchNorm2d(channels), nn.ReLU(),
        nn.Conv2d(channels, inner, 1, 1, 0, bias=False),
        nn.BatchNorm2d(inner), nn.ReLU(),
        nn.Conv2d(inner, inner, 3, 1, 1, bias=False),
        nn.BatchNorm2d(inner), nn.ReLU(),
        nn.Conv2d(inner, channels, 1, 1, 0))


def attention_map(pooled: PooledContext, l1: nn.Module) -> torch.Tensor:
    return l1(pooled.stacked())


def embed_context(pooled: PooledContext, l2: nn.Module) -> torch.Tensor:
    return l2(pooled.stacked())


def embed_feature(feature: torch.Tensor, l3: nn.Module) -> torch.Tensor:
    return l3(feature)


def channel_relevance(me: torch.Tensor, fe: torch.Tensor) -> torch.Tensor:
    """A[c] = sigmoid(sum_{h,w} Me[0,h,w] * Fe[c,h,w]), shape (B, C, 1, 1)."""
    if me.shape[-2:] != fe.shape[-2:]:
        raise ValueError(f"spatial mismatch: {tuple(me.shape)} vs {tuple(fe.shape)}")
    return torch.sigmoid((me * fe).sum(dim=(2, 3), keepdim=True))


def amplify(feature: torch.Tensor, m: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    return a * m * feature


def rebias(amplified: torch.Tensor, r1: nn.Module) -> torch.Tensor:
    return r1(amplified)


def resample_context(x: torch.Tensor, target_hw) -> torch.Tensor:
    """Nearest-neighbor upsampling or r x r average pooling by an integer ratio."""
    th, tw = target_hw
    h, w = x.shape[-2:]
    if (th, tw) == (h, w):
        return x
    if th >= h and tw >= w:
        if th % h or tw % w or th // h != tw // w:
            raise ValueError(f"cannot upsample {h}x{w} to {th}x{tw} by an integer ratio")
        return F.interpolate(x, scale_factor=th // h, mode="nearest")
    if th <= h and tw <= w:
        if h % th or w % tw or h // th != w // tw:
            raise ValueError(f"cannot downsample {h}x{w} to {th}x{tw} by an integer ratio")
        return F.avg_pool2d(x, kernel_size=h // th)
    raise ValueError(f"mixed resampling {h}x{w} -> {th}x{tw}")


class AttendContext:
    """Attention map and embedded context of one batch, resampled on demand.

    Each target size is computed once and cached, so every insertion point at
    a given resolution consumes the very same tensors.
    """

    def __init__(self, m: torch.Tensor, me: torch.Tensor):
        self.m = m
        self.me = me
        self._cache = {tuple(m.shape[-2:]): (m, me)}

    def at(self, hw):
        hw = tuple(hw)
        if hw not in self._cache:
            self._cache[hw] = (resample_context(self.m, hw), resample_context(self.me, hw))
        return self._cache[hw]


class ContextHead(nn.Module):
    """The shared part of the block: pooling, L1 and L2."""

    def __init__(self, cfg: AttendBlockConfig = AttendBlockConfig()):
        super().__init__()
        self.l1 = make_attention_net(cfg.hidden)
        self.l2 = make_context_embedding(cfg.hidden)

    def forward(self, t: torch.Tensor) -> AttendContext:
        pooled = pool_context(t)
        return AttendContext(attention_map(pooled, self.l1), embed_context(pooled, self.l2))


class AttendBlock(nn.Module):
    """Per-insertion-point part of the block, replacing one ReLU.

    With ``use_channel_attention=False`` the relevance-weighted map ``A * M``
    is replaced by a two-conv projection of ``M`` to ``C`` sigmoid channels.
    ``zero_branch`` forces ``F'`` to zero (used for equivalence checks).
    """

    def __init__(self, channels: int, cfg: AttendBlockConfig = AttendBlockConfig()):
        super().__init__()
        self.channels = channels
        self.cfg = cfg
        self.zero_branch = False
        if cfg.use_channel_attention:
            self.l3 = make_bottleneck(channels, cfg.reduction)
        else:
            inner = max(1, int(channels * cfg.reduction))
            self.project = nn.Sequential(
                nn.Conv2d(1, inner, 3, 1, 1), nn.BatchNorm2d(inner), nn.ReLU(inplace=True),
                nn.Conv2d(inner, channels, 3, 1, 1), nn.Sigmoid())
        self.r1 = make_bottleneck(channels, cfg.reduction) if cfg.use_rebias else None

    def amplified(self, feature: torch.Tensor, ctx: AttendContext) -> torch.Tensor:
        m, me = ctx.at(feature.shape[-2:])
        if self.cfg.use_channel_attention:
            a = channel_relevance(me, embed_feature(feature, self.l3))
            return amplify(feature, m, a)
        return self.project(m) * feature

    def forward(self, feature: torch.Tensor, ctx: AttendContext) -> torch.Tensor:
        if feature.shape[1] != self.channels:
            raise ValueError(f"block built for {self.channels} channels, got {feature.shape[1]}")
        if self.zero_branch:
            fp = torch.zeros_like(feature)
        else:
            fp = self.amplified(feature, ctx)
        out = feature + fp
        if self.r1 is not None:
            out = out + rebias(fp, self.r1)
        return F.relu(out)


def attend_block(feature: torch.Tensor, t: torch.Tensor, head: ContextHead,
                 block: AttendBlock) -> torch.Tensor:
    """Single-point convenience wrapper: ``ReLU(F + F' + R1(F'))``."""
    return block(feature, head(t))
