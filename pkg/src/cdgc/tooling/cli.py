"""Command line entry point (``cdgc``).

Every subcommand accepts ``--config FILE`` and repeated ``--set key=value``
overrides. Failures print one JSON object ``{"error": ..., "message": ...}``
on stderr and exit nonzero (2: usage/config, 1: runtime).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import checkpoint
from ..classifiers import TAP_NAMES, build_backbone, insert_attend_blocks, parse_backbone
from ..context import build_cdgc, train_cdgc
from ..datapipe import save_toyset
from ..trainer import OptimizerConfig, ScheduleConfig, evaluate, train_classifier
from . import config as config_mod
from .ablation import STANDARD_ARMS, AblationSettings, run_ablation
from .analysis import activation_attention, export_heatmap
from .complexity import count_complexity


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, code=2)


def _load_cfg(args) -> dict:
    overrides = list(args.set or [])
    for key, flag in getattr(args, "_flag_overrides", {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value) if not isinstance(value, str) else value}")
    return config_mod.load_config(args.config, overrides)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {p}")
    return p


def cmd_gen_toyset(args, cfg):
    train, test = config_mod.load_data(dict(cfg, data=dict(cfg["data"], source="toyset", dir=None)))
    root = config_mod.out_dir(cfg, args.out)
    save_toyset(train, root / "train")
    save_toyset(test, root / "test")
    print(json.dumps({"out": str(root), "train": len(train), "test": len(test)}))


def cmd_train_context(args, cfg):
    train, test = config_mod.load_data(cfg)
    model_cfg = config_mod.context_model_config(cfg, train.n_classes)
    result = train_cdgc(train, model_cfg, config_mod.context_train_config(cfg), test)
    root = config_mod.out_dir(cfg, args.out)
    path = result.save(root / f"context_{model_cfg.variant.lower()}.ckpt")
    print(json.dumps({"checkpoint": str(path), "variant": model_cfg.variant,
                      "best_epoch": result.best_epoch,
                      "best_val_mse": result.history[result.best_epoch]["val_mse"]}))


def cmd_train_classifier(args, cfg):
    c = cfg["classifier"]
    ctx_path = c["context_checkpoint"]
    if ctx_path:
        _require_file(ctx_path, "context checkpoint")
    train, test = config_mod.load_data(cfg)
    model = build_backbone(parse_backbone(c["backbone"], train.n_classes))
    if ctx_path:
        context = checkpoint.load_checkpoint(ctx_path, expected_kind="context")
        model = insert_attend_blocks(model, context, tuple(c["points"]),
                                     config_mod.attend_config(cfg))
    root = config_mod.out_dir(cfg, args.out)
    report, best = train_classifier(model, train, test, OptimizerConfig(batch_size=c["batch_size"]),
                                    ScheduleConfig.scaled(c["epochs"]), seed=c["seed"],
                                    out_dir=root)
    model.load_state_dict(best)
    path = checkpoint.save_checkpoint(model, root / "classifier.ckpt",
                                      {"best_epoch": report.best_epoch, "top1": report.best_top1})
    print(json.dumps({"checkpoint": str(path), "best_epoch": report.best_epoch,
                      "top1": report.best_top1, "top5": report.best_top5}))


def _load_classifier(path):
    model = checkpoint.load_checkpoint(_require_file(path, "checkpoint"))
    if model.kind not in ("backbone", "augmented"):
        raise CliError("checkpoint_kind", f"{path} holds a {model.kind!r}, not a classifier")
    return model.eval()


def cmd_evaluate(args, cfg):
    model = _load_classifier(args.checkpoint)
    _, test = config_mod.load_data(cfg)
    top1, top5 = evaluate(model, test)
    print(json.dumps({"top1": top1, "top5": top5, "count": len(test)}))


def cmd_export_attention(args, cfg):
    model = _load_classifier(args.checkpoint)
    _, test = config_mod.load_data(cfg)
    if not 0 <= args.index < len(test):
        raise CliError("index", f"index {args.index} outside test split of {len(test)}")
    x = test.images[args.index:args.index + 1]
    amap = activation_attention(model, x, args.tap)[0]
    paths = export_heatmap(amap, args.out, image=x[0] if args.overlay else None)
    print(json.dumps({"written": [str(p) for p in paths]}))


def cmd_complexity(args, cfg):
    backbone = build_backbone(parse_backbone(args.backbone or cfg["classifier"]["backbone"]))
    if args.input != 32:
        raise CliError("input", "backbones are defined for 32 px inputs", code=2)
    before = count_complexity(backbone, args.input)
    out = {"backbone": backbone.config.name, "input": args.input,
           "params": before.params, "flops": before.flops}
    if args.attend:
        context = build_cdgc(config_mod.context_model_config(cfg, backbone.config.n_classes))
        after = count_complexity(
            insert_attend_blocks(backbone, context, tuple(cfg["classifier"]["points"]),
                                 config_mod.attend_config(cfg)), args.input)
        out.update(params_after=after.params, flops_after=after.flops)
    if args.verbose:
        print(before.summary())
    print(json.dumps(out))


def cmd_ablate(args, cfg):
    a = cfg["ablation"]
    unknown = [name for name in a["arms"] if name not in STANDARD_ARMS]
    if unknown:
        raise CliError("config", f"unknown arms {unknown}; known: {sorted(STANDARD_ARMS)}", code=2)
    train, test = config_mod.load_data(cfg)
    settings = AblationSettings(
        backbone=cfg["classifier"]["backbone"], seeds=tuple(a["seeds"]),
        epochs=cfg["classifier"]["epochs"], batch_size=cfg["classifier"]["batch_size"],
        context=config_mod.context_model_config(cfg, train.n_classes),
        context_train=config_mod.context_train_config(cfg), dm_backbone=a["dm_backbone"],
        attend=config_mod.attend_config(cfg), out_dir=str(config_mod.out_dir(cfg, args.out)))
    table = run_ablation([STANDARD_ARMS[n] for n in a["arms"]], settings, train, test)
    print(table.text())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. classifier.epochs=5")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cdgc", description="Category-disentangled context tooling")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-toyset", parents=[common], help="render and save the toy set")
    p.set_defaults(func=cmd_gen_toyset)

    p = sub.add_parser("train-context", parents=[common], help="train a context network")
    p.add_argument("--variant", type=str.upper, choices=["GM", "CGM", "CDCGM"])
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_context,
                   _flag_overrides={"context.variant": "variant", "context.epochs": "epochs"})

    p = sub.add_parser("train-classifier", parents=[common], help="train a classifier")
    p.add_argument("--backbone")
    p.add_argument("--context", dest="context_checkpoint", help="context checkpoint to attend to")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_classifier,
                   _flag_overrides={"classifier.backbone": "backbone",
                                    "classifier.context_checkpoint": "context_checkpoint",
                                    "classifier.epochs": "epochs"})

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a classifier checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention", parents=[common], help="write an attention heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--tap", default="stage3", choices=list(TAP_NAMES))
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("complexity", parents=[common], help="count parameters and MACs")
    p.add_argument("--backbone")
    p.add_argument("--input", type=int, default=32)
    p.add_argument("--attend", action="store_true", help="also count with attend blocks")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation matrix")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CliError("usage", "a subcommand is required", code=2)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        if args.command == "export-attention" and not args.out:
            raise CliError("usage", "export-attention needs --out PATH.png", code=2)
        cfg = _load_cfg(args)
        args.func(args, cfg)
        return 0
    except CliError as exc:
        _report(exc.kind, str(exc))
        return exc.code
    except config_mod.ConfigError as exc:
        _report("config", str(exc))
        return 2
    except checkpoint.CheckpointError as exc:
        _report("checkpoint", str(exc))
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        _report(type(exc).__name__, str(exc))
        return 1


def _report(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
