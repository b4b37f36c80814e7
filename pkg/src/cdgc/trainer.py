"""Classifier training and evaluation.

SGD with a warm-up epoch range followed by a step schedule, He-normal
initialization, cross-entropy on augmented training batches and single-crop
evaluation every epoch. The report keeps the whole trace; the best
checkpoint is the epoch with the highest test top-1.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attend import AttendBlock, ContextHead
from .datapipe import AugmentationConfig, ImageDataset, augment_images

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128

    def __post_init__(self):
        if self.method != "sgd":
            raise ValueError("only SGD is supported")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class ScheduleConfig:
    total_epochs: int = 200
    base_lr: float = 0.1
    milestones: tuple = (60, 120, 160)
    decay: float = 0.2
    warmup_lr: float = 0.001
    warmup_epochs: int = 2

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        ms = self.milestones
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and ms[-1] >= self.total_epochs:
            raise ValueError("milestones must precede total_epochs")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    @classmethod
    def scaled(cls, total_epochs: int, **kw) -> "ScheduleConfig":
        """The 200-epoch CIFAR schedule with milestones rescaled to ``total_epochs``.

        Milestones that round to 0 or past the end of a very short run are dropped.
        """
        ms = {round(m * total_epochs / 200) for m in (60, 120, 160)}
        ms = tuple(sorted(m for m in ms if 0 < m < total_epochs))
        return cls(total_epochs=total_epochs, milestones=ms, **kw)


def lr_at(schedule: ScheduleConfig, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.warmup_lr
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.base_lr * schedule.decay ** passed


def he_init(model: nn.Module, seed: Optional[int] = None) -> nn.Module:
    """He-normal weights (std sqrt(2 / fan_in)) for conv/linear, BN to (1, 0), biases 0.

    Frozen parameters are left alone. Attend-block modules are initialized
    after all other modules, so a backbone receives the same weights for a
    given seed whether or not blocks were inserted into it.
    """
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    extra = set()
    for mod in model.modules():
        if isinstance(mod, (AttendBlock, ContextHead)):
            extra.update(id(m) for m in mod.modules())
    mods = list(model.modules())
    ordered = [m for m in mods if id(m) not in extra] + [m for m in mods if id(m) in extra]
    with torch.no_grad():
        for mod in ordered:
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                if not mod.weight.requires_grad:
                    continue
                nn.init.kaiming_normal_(mod.weight, mode="fan_in", nonlinearity="relu",
                                        generator=gen)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.modules.batchnorm._BatchNorm) and mod.affine:
                if not mod.weight.requires_grad:
                    continue
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return model


@torch.no_grad()
def predict_logits(model: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor):
    """(top1, top5); top5 is None below five classes. Ties resolve to the lower index."""
    n_classes = logits.shape[1]
    order = torch.sort(logits, dim=1, descending=True, stable=True).indices
    hits = order == labels[:, None]
    top1 = hits[:, :1].any(1).double().mean().item()
    top5 = hits[:, :5].any(1).double().mean().item() if n_classes >= 5 else None
    return top1, top5


def evaluate(model: nn.Module, dataset: ImageDataset, batch_size: int = 256):
    """Single-crop (top1, top5) in eval mode; restores the previous mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    try:
        logits = predict_logits(model, dataset.images, batch_size)
    finally:
        model.train(was_training)
    return topk_accuracy(logits, dataset.labels)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, lr, train_loss, top1, top5

    @property
    def best(self) -> dict:
        return max(self.epochs, key=lambda r: r["top1"])

    @property
    def best_epoch(self) -> int:
        return self.best["epoch"]

    @property
    def best_top1(self) -> float:
        return self.best["top1"]

    @property
    def best_top5(self):
        return self.best["top5"]

    def write_csv(self, path) -> Path:
        """``epoch,lr,train_loss,top1,top5`` rows plus a ``# best ...`` summary line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "top1", "top5"])
            for r in self.epochs:
                w.writerow([r["epoch"], repr(r["lr"]), f"{r['train_loss']:.6f}",
                            f"{r['top1']:.6f}", "" if r["top5"] is None else f"{r['top5']:.6f}"])
            b = self.best
            top5 = "" if b["top5"] is None else f"{b['top5']:.6f}"
            fh.write(f"# best epoch={b['epoch']} top1={b['top1']:.6f} top5={top5}\n")
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        rows = []
        with Path(path).open(encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        for r in csv.DictReader(lines):
            rows.append({"epoch": int(r["epoch"]), "lr": float(r["lr"]),
                         "train_loss": float(r["train_loss"]), "top1": float(r["top1"]),
                         "top5": float(r["top5"]) if r["top5"] else None})
        return cls(rows)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train_classifier(model: nn.Module, train_set: ImageDataset, test_set: ImageDataset,
                     opt: OptimizerConfig = OptimizerConfig(),
                     schedule: ScheduleConfig = ScheduleConfig(),
                     seed: int = 0,
                     augmentation: AugmentationConfig = AugmentationConfig(),
                     init: bool = True,
                     out_dir=None):
    """Train with cross-entropy; returns ``(TrainReport, best_state_dict)``.

    All randomness (init, batch order, augmentation) derives from ``seed``.
    When ``out_dir`` is given the report CSV is written there.
    """
    set_determinism(seed)
    if init:
        he_init(model, seed=seed)
    params = [p for p in model.parameters() if p.requires_grad]
    sgd = torch.optim.SGD(params, lr=lr_at(schedule, 0), momentum=opt.momentum,
                          weight_decay=opt.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    report = TrainReport()
    best_state, best_top1 = None, -1.0
    n = len(train_set)
    for epoch in range(schedule.total_epochs):
        lr = lr_at(schedule, epoch)
        for group in sgd.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([seed, epoch])
        order = torch.randperm(n, generator=gen)
        model.train()
        loss_sum, seen = 0.0, 0
        for i in range(0, n, opt.batch_size):
            idx = order[i:i + opt.batch_size]
            x = augment_images(train_set.images[idx], augmentation, rng)
            y = train_set.labels[idx]
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // opt.batch_size}, "
                    f"lr {lr}")
            sgd.zero_grad(set_to_none=True)
            loss.backward()
            sgd.step()
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
        top1, top5 = evaluate(model, test_set)
        report.epochs.append({"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen,
                              "top1": top1, "top5": top5})
        log.info("epoch %d lr %.4g loss %.4f top1 %.4f", epoch, lr, loss_sum / seen, top1)
        if top1 > best_top1:
            best_top1 = top1
            best_state = copy.deepcopy(model.state_dict())
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "report.csv")
    return report, best_state
