"""Ablation runner: train a matrix of classifier arms over shared seeds.

Each arm names a context source (none, a trained classifier's features, or a
context network variant) plus the attend-block switches. Context models are
trained once per (variant, repulsion) pair and reused across arms and seeds.
Every training run reseeds from its own seed, so results do not depend on
arm order.
"""

from __future__ import annotations

import csv
import logging
import math
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from ..attend import AttendBlockConfig
from ..classifiers import (TAP_NAMES, FeatureContext, build_backbone, insert_attend_blocks,
                           parse_backbone)
from ..context import ContextModelConfig, ContextTrainConfig, train_cdgc
from ..datapipe import ImageDataset
from ..trainer import OptimizerConfig, ScheduleConfig, train_classifier

log = logging.getLogger(__name__)

CONTEXT_SOURCES = (None, "DM", "GM", "CGM", "CDCGM")


@dataclass(frozen=True)
class ArmSpec:
    name: str
    context: Optional[str] = "CDCGM"
    points: tuple = TAP_NAMES
    use_channel_attention: bool = True
    use_rebias: bool = True
    repulsion: bool = True

    def __post_init__(self):
        if self.context not in CONTEXT_SOURCES:
            raise ValueError(f"arm {self.name!r}: unknown context source {self.context!r}")
        if self.context is None and (not self.use_rebias or not self.use_channel_attention):
            raise ValueError(f"arm {self.name!r}: block switches need a context source")
        if not self.repulsion and self.context != "CDCGM":
            raise ValueError(f"arm {self.name!r}: disabling repulsion applies to CDCGM only")


STANDARD_ARMS = {
    "baseline": ArmSpec("baseline", None),
    "dm": ArmSpec("+DM", "DM"),
    "gm": ArmSpec("+GM", "GM"),
    "cgm": ArmSpec("+CGM", "CGM"),
    "cdcgm": ArmSpec("+CDCGM", "CDCGM"),
    "no_rebias": ArmSpec("w/o Re-bias", use_rebias=False),
    "no_ca": ArmSpec("w/o CA", use_channel_attention=False),
    "no_rl": ArmSpec("w/o RL", repulsion=False),
    "one_layer": ArmSpec("one layer", points=("stage3",)),
}


@dataclass
class AblationSettings:
    backbone: str = "resnet20"
    seeds: tuple = (0, 1, 2)
    epochs: int = 40
    batch_size: int = 128
    context: ContextModelConfig = field(default_factory=ContextModelConfig)
    context_train: ContextTrainConfig = field(default_factory=ContextTrainConfig)
    dm_backbone: str = "resnet20"
    dm_seed: int = 0
    attend: AttendBlockConfig = field(default_factory=AttendBlockConfig)
    out_dir: Optional[str] = None

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig.scaled(self.epochs)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(batch_size=self.batch_size)


@dataclass
class ArmResult:
    arm: str
    top1: dict = field(default_factory=dict)  # seed -> best top-1
    status: str = "ok"
    error: str = ""

    @property
    def mean(self) -> float:
        vals = list(self.top1.values())
        return sum(vals) / len(vals) if vals else math.nan

    @property
    def spread(self) -> float:
        vals = list(self.top1.values())
        if len(vals) < 2:
            return 0.0 if vals else math.nan
        m = self.mean
        return math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1))


@dataclass
class AblationTable:
    seeds: tuple
    rows: list

    def row(self, arm: str) -> ArmResult:
        return next(r for r in self.rows if r.arm == arm)

    def write_csv(self, path) -> Path:
        """Columns: arm, seed_<s> per seed, mean, std, status, error."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", *[f"seed_{s}" for s in self.seeds], "mean", "std", "status", "error"])
            for r in self.rows:
                w.writerow([r.arm, *[_fmt(r.top1.get(s)) for s in self.seeds],
                            _fmt(r.mean), _fmt(r.spread), r.status, r.error])
        return path

    def text(self) -> str:
        header = ["arm", *[f"seed {s}" for s in self.seeds], "mean +- std"]
        body = []
        for r in self.rows:
            cells = [r.arm, *[_pct(r.top1.get(s)) for s in self.seeds]]
            cells.append("FAILED" if r.status != "ok" else f"{_pct(r.mean)} +- {_pct(r.spread)}")
            body.append(cells)
        widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
        fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))  # noqa: E731
        return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body])


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def _pct(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


class ContextCache:
    """Trains context sources lazily, keyed by everything that affects them."""

    def __init__(self, settings: AblationSettings, train_set: ImageDataset,
                 val_set: Optional[ImageDataset]):
        self.settings = settings
        self.train_set = train_set
        self.val_set = val_set
        self._models = {}

    def get(self, arm: ArmSpec):
        key = (arm.context, arm.repulsion)
        if key not in self._models:
            self._models[key] = self._train(arm)
        return self._models[key]

    def _train(self, arm: ArmSpec):
        s = self.settings
        if arm.context == "DM":
            log.info("training DM context classifier %s", s.dm_backbone)
            model = build_backbone(parse_backbone(s.dm_backbone, self.train_set.n_classes))
            _, best = train_classifier(model, self.train_set, self.val_set or self.train_set,
                                       s.optimizer(), s.schedule(), seed=s.dm_seed)
            model.load_state_dict(best)
            return FeatureContext(model.eval(), "stage3")
        cfg = replace(s.context, variant=arm.context, repulsion=arm.repulsion,
                      n_classes=self.train_set.n_classes)
        log.info("training %s context network (repulsion=%s)", arm.context, arm.repulsion)
        return train_cdgc(self.train_set, cfg, s.context_train, self.val_set).model


def build_arm_model(arm: ArmSpec, settings: AblationSettings, n_classes: int, contexts):
    backbone = build_backbone(parse_backbone(settings.backbone, n_classes))
    if arm.context is None:
        return backbone
    cfg = replace(settings.attend, use_channel_attention=arm.use_channel_attention,
                  use_rebias=arm.use_rebias)
    return insert_attend_blocks(backbone, contexts.get(arm), arm.points, cfg)


def run_ablation(arms: Sequence[ArmSpec], settings: AblationSettings,
                 train_set: ImageDataset, test_set: ImageDataset,
                 contexts: Optional[ContextCache] = None) -> AblationTable:
    """Run every arm for every seed; a failing arm is recorded and skipped."""
    contexts = contexts or ContextCache(settings, train_set, test_set)
    rows = []
    for arm in arms:
        result = ArmResult(arm.name)
        try:
            for seed in settings.seeds:
                model = build_arm_model(arm, settings, train_set.n_classes, contexts)
                out = None
                if settings.out_dir is not None:
                    out = Path(settings.out_dir) / _slug(arm.name) / f"seed{seed}"
                report, _ = train_classifier(model, train_set, test_set, settings.optimizer(),
                                             settings.schedule(), seed=seed, out_dir=out)
                result.top1[seed] = report.best_top1
                log.info("arm %s seed %d: best top-1 %.4f", arm.name, seed, report.best_top1)
        except Exception as exc:  # one broken arm must not sink the matrix
            result.status = "failed"
            result.error = f"{type(exc).__name__}: {exc}"
            log.error("arm %s failed:\n%s", arm.name, traceback.format_exc())
        rows.append(result)
    table = AblationTable(tuple(settings.seeds), rows)
    if settings.out_dir is not None:
        table.write_csv(Path(settings.out_dir) / "ablation.csv")
        (Path(settings.out_dir) / "ablation.txt").write_text(table.text() + "\n", encoding="utf-8")
    return table


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower() or "arm"
