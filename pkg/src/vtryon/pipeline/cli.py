"""Command-line entry point: ``vtryon <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..adversarial import AdvMode
from ..dataset import DatasetError, GarmentCategory, load_dataset, load_record
from ..geometry import TpsError
from ..metrics import SeededConvBackend, InceptionBackend
from ..synthesis import save_grid_sheet, save_image
from ..synthetic import generate_synthetic
from .checkpoint import CheckpointError
from .config import ConfigError, default_home, load_config
from .inference import UntrainedBundleError, load_bundle, multi_garment, tryon_once
from .train import ABLATION_MODES, NumericalError, ablate, train_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("vtryon")


def _config(args):
    overrides = {}
    if getattr(args, "iters", None) is not None:
        overrides["schedule"] = {f"{s}_iters": args.iters for s in ("warp", "parse", "tryon")}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("schedule", {})["seed"] = args.seed
    return load_config(args.config or args.profile, overrides)


def _ckpt_dir(args, cfg) -> Path:
    return Path(args.ckpt_dir) if args.ckpt_dir else default_home() / cfg.name


def _records(root, cfg, split):
    if not Path(root).is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    records = list(load_dataset(root, cfg.resolution, split=split))
    if not records:
        raise DatasetError(f"no {split or 'any'} records under {root}")
    return records


def _backend(args):
    return InceptionBackend(args.inception_weights) if args.inception_weights else SeededConvBackend()


def cmd_gen_data(args) -> int:
    h, w = args.resolution
    root = generate_synthetic(args.n, (h, w), args.seed, args.out, args.test_fraction)
    print(f"wrote {3 * args.n} synthetic records to {root}")
    return EXIT_OK


def _train(stage):
    def run(args) -> int:
        cfg = _config(args)
        records = _records(args.data, cfg, "train")
        disc = getattr(args, "disc", AdvMode.PSAD.value)
        result = train_stage(stage, cfg, records, _ckpt_dir(args, cfg), disc,
                             prereq_dir=args.prereq_dir, resume=args.resume)
        print(json.dumps({"checkpoint": str(result.checkpoint), "final": result.final_losses}))
        return EXIT_OK
    return run


def cmd_eval(args) -> int:
    cfg = _config(args)
    records = _records(args.data, cfg, args.split)
    ckpt_dir = _ckpt_dir(args, cfg)
    bundle = load_bundle(ckpt_dir, args.tryon_ckpt)
    from ..metrics import evaluate

    report = evaluate(bundle, records, args.mode, _backend(args))
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def cmd_tryon(args) -> int:
    cfg = _config(args)
    bundle = load_bundle(_ckpt_dir(args, cfg), args.tryon_ckpt)
    model = load_record(args.data, args.model_category, args.model_id, resolution=cfg.resolution)
    garment = load_record(args.data, args.category, args.garment_id, resolution=cfg.resolution)
    image = tryon_once(bundle, model, garment, args.category)
    save_image(args.out, image)
    if args.sheet:
        save_grid_sheet(args.sheet, [[garment.garment_image, model.model_image, image]])
    print(args.out)
    return EXIT_OK


def cmd_tryon_multi(args) -> int:
    cfg = _config(args)
    bundle = load_bundle(_ckpt_dir(args, cfg), args.tryon_ckpt)
    model = load_record(args.data, args.model_category, args.model_id, resolution=cfg.resolution)
    upper = load_record(args.data, GarmentCategory.UPPER_BODY, args.upper_id, resolution=cfg.resolution)
    lower = load_record(args.data, GarmentCategory.LOWER_BODY, args.lower_id, resolution=cfg.resolution)
    trace: dict = {}
    image = multi_garment(bundle, model, upper, lower, trace)
    save_image(args.out, image)
    if args.sheet:
        save_grid_sheet(args.sheet, [[upper.garment_image, lower.garment_image, model.model_image,
                                      trace["passes"][0]["image"], image]])
    print(args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    records = _records(args.data, cfg, "train")
    eval_records = _records(args.data, cfg, "test") if args.eval_split == "test" else records
    result = ablate(records, cfg, args.out, args.modes, eval_records, _backend(args))
    print(result.table())
    return EXIT_OK


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--profile", default="base", help="named profile (base, hd512, hd1024, desk)")
    p.add_argument("--config", help="YAML config; may inherit from a profile or another file")
    p.add_argument("--ckpt-dir", help="checkpoint directory (default $VTRYON_HOME/<config name>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="override every stage's iteration count")
    if data:
        p.add_argument("--data", required=True, help="dataset root in Dress Code layout")


def _inference_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tryon-ckpt", help="generator checkpoint (default <ckpt-dir>/tryon.pt)")
    p.add_argument("--model-id", required=True)
    p.add_argument("--model-category", type=GarmentCategory, required=True,
                   choices=list(GarmentCategory), metavar="{upper_body,lower_body,dresses}")
    p.add_argument("--out", required=True)
    p.add_argument("--sheet", help="also write an inputs|result contact sheet")


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from err
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtryon", description="Image-based virtual try-on pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus in Dress Code layout")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8, help="items per category")
    p.add_argument("--resolution", type=_resolution, default=(64, 48))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    for stage in ("warp", "parse", "tryon"):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        _common(p)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--prereq-dir", help="directory holding the frozen earlier stages")
        if stage == "tryon":
            p.add_argument("--disc", choices=[m.value for m in AdvMode], default=AdvMode.PSAD.value)
        p.set_defaults(func=_train(stage))

    p = sub.add_parser("eval", help="score a trained bundle on a split")
    _common(p)
    p.add_argument("--mode", choices=("paired", "unpaired"), default="paired")
    p.add_argument("--split", default="test")
    p.add_argument("--tryon-ckpt")
    p.add_argument("--inception-weights", help="local Inception-v3 weights; default is the seeded conv backend")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tryon", help="dress one model in one garment")
    _common(p)
    _inference_args(p)
    p.add_argument("--garment-id", required=True)
    p.add_argument("--category", type=GarmentCategory, required=True,
                   choices=list(GarmentCategory), metavar="{upper_body,lower_body,dresses}")
    p.set_defaults(func=cmd_tryon)

    p = sub.add_parser("tryon-multi", help="upper-body then lower-body try-on")
    _common(p)
    _inference_args(p)
    p.add_argument("--upper-id", required=True)
    p.add_argument("--lower-id", required=True)
    p.set_defaults(func=cmd_tryon_multi)

    p = sub.add_parser("ablate", help="train one generator per adversarial mode and compare")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", nargs="+", choices=[m.value for m in AdvMode],
                   default=[m.value for m in ABLATION_MODES])
    p.add_argument("--eval-split", choices=("train", "test"), default="test")
    p.add_argument("--inception-weights")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, UntrainedBundleError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TpsError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
