"""Category-disentangled context network.

A conditional autoencoder whose encoder is split into E1 (first four groups)
and E2 (last two), with a mirrored decoder G1 (mirrors E2) and G2 (mirrors
E1). The context tensor is ``T = E1(x) + G1(E2(E1(x)))``. G2 reconstructs the
image from ``T`` and a conditional vector fed as constant channels into every
G2 layer. A discriminator D predicts the category from ``T``; the
autoencoder is trained to defeat it, and a margin loss keeps decodes under
different conditions apart.

Variants: ``GM`` (no condition, no discriminator), ``CGM`` (condition, no
discriminator), ``CDCGM`` (condition and discriminator).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .datapipe import ConditionEmbedder, ImageDataset, condition_dim, encode_condition

log = logging.getLogger(__name__)

VARIANTS = ("GM", "CGM", "CDCGM")
DISC_ARCHS = ("conv", "flat", "flat_mlp")
FOOL_EPS = 1e-6

# (kernel, stride, padding) per encoder group
_GROUPS_32 = ((4, 2, 1), (3, 1, 1), (4, 2, 1), (3, 1, 1), (4, 2, 1), (4, 2, 1))
_GROUPS_224 = ((4, 2, 1), (3, 1, 1), (4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 2, 1))
E1_GROUPS = 4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContextModelConfig:
    variant: str = "CDCGM"
    n_classes: int = 4
    resolution: int = 32
    widths: tuple = (32, 64, 64, 128, 256, 256)
    repulsion: bool = True
    margin: float = 0.01
    repulsion_weight: float = 0.001
    lambda_max: float = 0.01
    disc_width: int = 128
    disc_arch: str = "conv"
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.resolution not in (32, 224):
            raise ValueError(f"unsupported resolution {self.resolution}")
        if len(self.widths) != 6:
            raise ValueError("widths must list six encoder group widths")
        if self.margin <= 0:
            raise ValueError("repulsion margin must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.disc_arch not in DISC_ARCHS:
            raise ValueError(f"disc_arch must be one of {DISC_ARCHS}")

    @property
    def conditional(self) -> bool:
        return self.variant != "GM"

    @property
    def dispel(self) -> bool:
        return self.variant == "CDCGM"

    @property
    def uses_repulsion(self) -> bool:
        return self.conditional and self.repulsion

    @property
    def cond_dim(self) -> int:
        return condition_dim(self.n_classes) if self.conditional else 0

    @property
    def context_channels(self) -> int:
        return self.widths[E1_GROUPS - 1]

    @property
    def context_size(self) -> int:
        return self.resolution // 4 if self.resolution == 32 else self.resolution // 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContextModelConfig":
        return cls(**d)


@dataclass
class ContextTrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    ramp_steps: Optional[int] = None  # default: first half of training
    disc_steps: int = 1
    seed: int = 0


def _group(cin, cout, k, s, p):
    return nn.Sequential(nn.Conv2d(cin, cout, k, s, p, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def _up_group(cin, cout, k, s, p, last=False):
    conv = nn.ConvTranspose2d if s > 1 else nn.Conv2d
    if last:
        return nn.Sequential(conv(cin, cout, k, s, p), nn.Tanh())
    return nn.Sequential(conv(cin, cout, k, s, p, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ConditionalDecoder(nn.Module):
    """G2: every layer sees the conditional vector as extra constant channels."""

    def __init__(self, layers, cond_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.cond_dim = cond_dim

    def forward(self, t, c=None):
        h = t
        for layer in self.layers:
            if self.cond_dim:
                planes = c[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
                h = torch.cat([h, planes], dim=1)
            h = layer(h)
        return h


class Discriminator(nn.Module):
    """Category classifier on the context tensor.

    ``conv``: two C(4,2,1) groups, global average pool, linear head.
    ``flat``: per-feature standardization of the flattened context, linear head.
    ``flat_mlp``: as ``flat`` with one hidden ReLU layer of ``width`` units.
    """

    def __init__(self, in_channels: int, size: int, width: int, n_classes: int,
                 arch: str = "conv"):
        super().__init__()
        self.arch = arch
        if arch == "conv":
            self.features = nn.Sequential(_group(in_channels, width, 4, 2, 1),
                                          _group(width, width, 4, 2, 1),
                                          nn.AdaptiveAvgPool2d(1), nn.Flatten())
            self.head = nn.Linear(width, n_classes)
            return
        dim = in_channels * size * size
        layers = [nn.Flatten(), nn.BatchNorm1d(dim, affine=False)]
        if arch == "flat_mlp":
            layers += [nn.Linear(dim, width), nn.ReLU(inplace=True)]
            dim = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(dim, n_classes)

    def forward(self, t):
        return self.head(self.features(t))


class ContextNet(nn.Module):
    kind = "context"

    def __init__(self, cfg: ContextModelConfig):
        super().__init__()
        self.config = cfg
        groups = _GROUPS_32 if cfg.resolution == 32 else _GROUPS_224
        chans = (cfg.in_channels,) + cfg.widths
        enc = [_group(chans[i], chans[i + 1], *groups[i]) for i in range(6)]
        self.e1 = nn.Sequential(*enc[:E1_GROUPS])
        self.e2 = nn.Sequential(*enc[E1_GROUPS:])
        self.g1 = nn.Sequential(*[_up_group(chans[i + 1], chans[i], *groups[i])
                                  for i in reversed(range(E1_GROUPS, 6))])
        cd = cfg.cond_dim
        self.g2 = ConditionalDecoder(
            [_up_group(chans[i + 1] + cd, chans[i], *groups[i], last=(i == 0))
             for i in reversed(range(E1_GROUPS))], cd)
        self.embedder = ConditionEmbedder(cfg.n_classes) if cfg.conditional and cfg.n_classes > 10 else None
        self.disc = (Discriminator(cfg.context_channels, cfg.context_size, cfg.disc_width,
                                   cfg.n_classes, cfg.disc_arch) if cfg.dispel else None)

    def autoencoder_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("disc."):
                yield p

    def condition(self, labels: torch.Tensor) -> Optional[torch.Tensor]:
        if not self.config.conditional:
            return None
        return encode_condition(labels, self.config.n_classes, self.embedder)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.resolution,) * 2:
            raise ValueError(
                f"expected (B, {cfg.in_channels}, {cfg.resolution}, {cfg.resolution}) input, "
                f"got {tuple(x.shape)}")
        h = self.e1(x)
        return h + self.g1(self.e2(h))

    def decode(self, t: torch.Tensor, c: Optional[torch.Tensor]) -> torch.Tensor:
        cfg = self.config
        expected = (cfg.context_channels, cfg.context_size, cfg.context_size)
        if tuple(t.shape[1:]) != expected:
            raise ValueError(f"context must be (B, {expected}), got {tuple(t.shape)}")
        if cfg.cond_dim:
            if c is None or c.ndim != 2 or c.shape != (t.shape[0], cfg.cond_dim):
                got = None if c is None else tuple(c.shape)
                raise ValueError(f"condition must be (B, {cfg.cond_dim}), got {got}")
            c = c.to(t.dtype)
        return self.g2(t, c)

    def discriminate_logits(self, t: torch.Tensor) -> torch.Tensor:
        if self.disc is None:
            raise RuntimeError(f"variant {self.config.variant} has no discriminator")
        return self.disc(t)

    def forward(self, x, labels=None):
        t = self.encode(x)
        return self.decode(t, self.condition(labels) if labels is not None else None)


def build_cdgc(cfg: ContextModelConfig) -> ContextNet:
    return ContextNet(cfg)


checkpoint.register_kind("context", lambda d: ContextNet(ContextModelConfig.from_dict(d)))


def encode_context(model: ContextNet, x: torch.Tensor) -> torch.Tensor:
    """Context tensor ``T = E1(x) + G1(E2(E1(x)))``; uses no label information."""
    return model.encode(x)


def decode(model: ContextNet, t: torch.Tensor, c: Optional[torch.Tensor]) -> torch.Tensor:
    return model.decode(t, c)


def discriminate(model: ContextNet, t: torch.Tensor) -> torch.Tensor:
    """Class probabilities predicted by the dispelling discriminator."""
    return F.softmax(model.discriminate_logits(t), dim=1)


def repulsive_loss(x1: torch.Tensor, x2: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinge ``max(margin - d, 0)`` with d the mean absolute pixel difference.

    For 4-D inputs d is computed per sample and the hinge averaged over the
    batch; otherwise the whole tensor is treated as one sample.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    diff = (x1 - x2).abs()
    d = diff.flatten(1).mean(dim=1) if diff.ndim == 4 else diff.mean()
    return torch.clamp(margin - d, min=0).mean()


def dispel_losses(probs: torch.Tensor, y: torch.Tensor, eps: float = FOOL_EPS):
    """(discriminator loss, fooling loss) from predicted class probabilities.

    The discriminator minimizes ``-log p_y``; the autoencoder minimizes
    ``-log(1 - p_y + eps)``, i.e. the confidence of the correct class.
    """
    p_y = probs.gather(1, y.view(-1, 1)).squeeze(1)
    d_loss = -torch.log(p_y).mean()
    fool = -torch.log(1 - p_y + eps).mean()
    return d_loss, fool


def wrong_labels(y: torch.Tensor, n: int, generator: torch.Generator) -> torch.Tensor:
    """Labels drawn uniformly from the classes other than ``y``."""
    shift = torch.randint(1, n, y.shape, generator=generator)
    return (y + shift) % n


def autoencoder_loss(model: ContextNet, x, y, lam: float, y_wrong=None):
    """Composite autoencoder objective; returns (total, parts dict, context).

    ``y_wrong`` supplies the alternate labels for the repulsion decode.
    """
    cfg = model.config
    t = model.encode(x)
    c = model.condition(y)
    recon = model.decode(t, c)
    rec_loss = F.mse_loss(recon, x)
    zero = rec_loss.new_zeros(())
    fool = zero
    if cfg.dispel:
        _, fool = dispel_losses(discriminate(model, t), y)
    rep = zero
    if cfg.uses_repulsion:
        alt = model.decode(t, model.condition(y_wrong))
        rep = repulsive_loss(recon, alt, cfg.margin)
    total = rec_loss + lam * fool + cfg.repulsion_weight * rep
    return total, {"recon": rec_loss, "fool": fool, "repulsion": rep}, t


@torch.no_grad()
def reconstruction_mse(model: ContextNet, dataset: ImageDataset, batch_size: int = 256) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        recon = model.decode(model.encode(x), model.condition(y))
        total += F.mse_loss(recon, x, reduction="sum").item()
        count += x.numel()
    model.train(was_training)
    return total / count


@dataclass
class CdgcCheckpoint:
    model: ContextNet
    step: int
    best_epoch: int
    history: list = field(default_factory=list)

    @property
    def metadata(self) -> dict:
        return {"step": self.step, "best_epoch": self.best_epoch, "history": self.history}

    def save(self, path):
        return checkpoint.save_checkpoint(self.model, path, self.metadata)


def train_cdgc(dataset: ImageDataset, cfg: ContextModelConfig,
               train_cfg: Optional[ContextTrainConfig] = None,
               val_dataset: Optional[ImageDataset] = None) -> CdgcCheckpoint:
    """Alternating discriminator / autoencoder training.

    Per batch: one discriminator step on the detached context, then one
    autoencoder step on reconstruction MSE + ramped fooling loss + weighted
    repulsion. Returns the model state with the lowest validation
    reconstruction MSE (epoch 0 = untrained model).
    """
    train_cfg = train_cfg or ContextTrainConfig()
    if int(dataset.labels.max()) >= cfg.n_classes:
        raise ValueError("dataset labels exceed the configured class count")
    val_dataset = val_dataset if val_dataset is not None else dataset

    torch.manual_seed(train_cfg.seed)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    model = build_cdgc(cfg)
    opt_ae = torch.optim.Adam(model.autoencoder_parameters(), lr=train_cfg.lr,
                              betas=train_cfg.betas)
    opt_d = (torch.optim.Adam(model.disc.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
             if cfg.dispel else None)

    n = len(dataset)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    ramp = train_cfg.ramp_steps if train_cfg.ramp_steps is not None else max(1, total_steps // 2)

    best_mse = reconstruction_mse(model, val_dataset)
    history = [{"epoch": 0, "val_mse": best_mse}]
    best_state, best_epoch, step = copy.deepcopy(model.state_dict()), 0, 0
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        sums = {"recon": 0.0, "fool": 0.0, "repulsion": 0.0, "disc": 0.0}
        for b in range(steps_per_epoch):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            y_wrong = wrong_labels(y, cfg.n_classes, gen)
            lam = cfg.lambda_max * min(1.0, step / ramp)

            if opt_d is not None:
                with torch.no_grad():
                    t_detached = model.encode(x)
                for _ in range(train_cfg.disc_steps):
                    opt_d.zero_grad(set_to_none=True)
                    d_loss = F.cross_entropy(model.discriminate_logits(t_detached), y)
                    d_loss.backward()
                    opt_d.step()
                sums["disc"] += d_loss.item()

            opt_ae.zero_grad(set_to_none=True)
            total, parts, _ = autoencoder_loss(model, x, y, lam, y_wrong)
            if not torch.isfinite(parts["recon"]):
                raise TrainingDivergedError(f"non-finite reconstruction loss at step {step}")
            total.backward()
            opt_ae.step()
            for k, v in parts.items():
                sums[k] += v.item()
            step += 1

        val = reconstruction_mse(model, val_dataset)
        row = {"epoch": epoch, "val_mse": val, "lambda": lam}
        row.update({k: v / steps_per_epoch for k, v in sums.items()})
        history.append(row)
        log.info("context epoch %d: %s", epoch, row)
        if val < best_mse:
            best_mse, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return CdgcCheckpoint(model, step, best_epoch, history)


def with_variant(cfg: ContextModelConfig, variant: str, **changes) -> ContextModelConfig:
    return replace(cfg, variant=variant, **changes)


@torch.no_grad()
def extract_contexts(model, dataset: ImageDataset, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    return torch.cat([model.encode(dataset.images[i:i + batch_size])
                      for i in range(0, len(dataset), batch_size)])


def probe_accuracy(train_feats: torch.Tensor, train_y: torch.Tensor,
                   test_feats: torch.Tensor, test_y: torch.Tensor, n_classes: int,
                   epochs: int = 100, lr: float = 1e-2, weight_decay: float = 1e-3,
                   seed: int = 0) -> float:
    """Held-out accuracy of a fresh linear (softmax regression) probe.

    Features are flattened and standardized with training statistics.
    """
    g = torch.Generator().manual_seed(seed)
    xtr = train_feats.flatten(1).double()
    xte = test_feats.flatten(1).double()
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-6
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    probe = nn.Linear(xtr.shape[1], n_classes).double()
    with torch.no_grad():
        probe.weight.normal_(0, 0.01, generator=g)
        probe.bias.zero_()
    opt = torch.optim.Adam(probe.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        perm = torch.randperm(xtr.shape[0], generator=g)
        for i in range(0, xtr.shape[0], 128):
            idx = perm[i:i + 128]
            opt.zero_grad()
            F.cross_entropy(probe(xtr[idx]), train_y[idx]).backward()
            opt.step()
    with torch.no_grad():
        pred = probe(xte).argmax(1)
    return float((pred == test_y).double().mean())


def chance_level(labels: torch.Tensor, n_classes: int) -> float:
    """Accuracy of always predicting the majority class."""
    counts = np.bincount(labels.numpy(), minlength=n_classes)
    return float(counts.max() / counts.sum())
