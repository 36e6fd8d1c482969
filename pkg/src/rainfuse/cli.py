"""Command-line entry point: ``rainfuse <command> [options]``.

Every training hyperparameter has a flag named after its config key, e.g.
``--stage1-iterations`` or ``--cleannet-base-channels``; flags win over the
config file.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfg
from .rain import RainParams, build_dataset

log = logging.getLogger("rainfuse")


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--profile", choices=sorted(cfg.PROFILES), help="default profile (desk unless the file says otherwise)")
    group = p.add_argument_group("hyperparameters")
    for key, typ in cfg.field_types().items():
        group.add_argument(_flag(key), dest="cfg:" + key, type=_bool if typ is bool else typ, default=None, metavar=typ.__name__.upper())


def _load_config(args) -> cfg.TrainingConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    return cfg.load_config(args.config, args.profile, overrides)


def cmd_demo_data(args) -> int:
    from .scenes import write_desk_dataset

    manifest = write_desk_dataset(args.out, args.pairs, args.size, args.test, args.seed)
    print(manifest)
    return 0


def cmd_synth(args) -> int:
    fields = {f.name for f in dataclasses.fields(RainParams)}
    params = RainParams(**{k: v for k, v in vars(args).items() if k in fields and v is not None})
    n = build_dataset(args.manifest_in, params, args.manifest_out)
    print(f"wrote {n} pairs to {args.manifest_out}")
    return 0


def cmd_train_clean(args) -> int:
    from .training import train_stage1

    path = train_stage1(_load_config(args), resume=args.resume)
    print(path)
    return 0


def cmd_train_fusion(args) -> int:
    from .training import STAGE1_FINAL, train_stage2

    config = _load_config(args)
    stage1 = args.stage1 or Path(config.checkpoint_dir) / STAGE1_FINAL
    print(train_stage2(config, stage1))
    return 0


def cmd_infer(args) -> int:
    from .imaging import load_manifest
    from .inference import Models, infer

    models = Models.load(args.stage1, args.stage2)
    pairs = load_manifest(args.manifest)
    if args.split != "all":
        pairs = [p for p in pairs if p.split == args.split]
    for pair in pairs:
        infer(pair, models, args.out)
    print(f"wrote {len(pairs)} results to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .inference import Models, evaluate
    from .metrics import mean_report

    models = Models.load(args.stage1, args.stage2)
    reports = evaluate(args.manifest, models, args.out, args.images, args.scd)
    for k, v in mean_report(reports).metrics().items():
        print(f"{k:>10s} {v:.6g}")
    return 0


def cmd_report(args) -> int:
    from .report import report

    for path in report(args.log, args.out, args.metrics):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rainfuse", description="Nighttime de-raining and infrared fusion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo-data", help="write procedural visible/infrared scenes and a manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=6)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--test", type=int, default=2, help="pairs reserved for the test split")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo_data)

    p = sub.add_parser("synth", help="add synthetic rain to a manifest of clean pairs")
    p.add_argument("manifest_in", type=Path)
    p.add_argument("manifest_out", type=Path)
    for f in dataclasses.fields(RainParams):
        p.add_argument(_flag(f.name), dest=f.name, type=type(f.default), default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-clean", help="stage 1: train the rain-removal network")
    _add_config_flags(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train_clean)

    p = sub.add_parser("train-fusion", help="stage 2: train fusion and refinement")
    _add_config_flags(p)
    p.add_argument("--stage1", type=Path, help="stage-1 checkpoint (default: <checkpoint_dir>/cleannet.pt)")
    p.set_defaults(func=cmd_train_fusion)

    for name, func, helptext in (
        ("infer", cmd_infer, "write cleaned and fused images"),
        ("eval", cmd_eval, "score the test split and write a metric table"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("manifest", type=Path)
        p.add_argument("--stage1", type=Path, required=True)
        p.add_argument("--stage2", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)
    sub.choices["infer"].add_argument("--split", choices=("train", "test", "all"), default="test")
    sub.choices["eval"].add_argument("--images", type=Path, help="also write result images here")
    sub.choices["eval"].add_argument("--scd", action="store_true", help="add the SCD column")

    p = sub.add_parser("report", help="plot loss curves and summarise a training log")
    p.add_argument("log", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--metrics", type=Path, help="metric table from eval")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
