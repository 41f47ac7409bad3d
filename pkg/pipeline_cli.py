#!/usr/bin/env python3
"""
dynfusion command line interface

Subcommands: fuse, build-dataset, train, infer, eval.
Every subcommand accepts --config FILE, a flat JSON object whose keys are
flag names; flags given on the command line win over the file.
"""
import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from dataset_builder import (
    DEFAULT_DIMS,
    DEFAULT_RATIO_MIN,
    ManifestError,
    build_dataset,
    load_dataset,
    read_manifest,
    save_dataset,
    synthetic_collection,
)
from fusion_net import (
    CheckpointFormatError,
    FusionPipeline,
    IncompatibleCheckpointError,
    PipelineMode,
    PipelineSpec,
    load_params,
)
from image_core import (
    ContractViolation,
    Image,
    ImageFormatError,
    load_image,
    save_image,
)
from pyramid_fusion import FusionParams, exposure_fuse, ghost_fuse
from settings import say, settings
from trainer import TrainConfig, TrainingDivergedError, evaluate, train

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_EMPTY = 3
EXIT_INCOMPATIBLE = 4

DATASET_PIPELINES = {"2ldr": PipelineMode.PIPELINE2, "3ldr": PipelineMode.PIPELINE3}

# (flag dest, is a directory) per subcommand
OUTPUTS = {
    "fuse": [("out", False)],
    "build-dataset": [("out", True)],
    "train": [("out", True)],
    "infer": [("out", False)],
    "eval": [("report", False)],
}


class UsageError(ValueError):
    """Bad flag combination or missing flag"""


def parse_dims(text: str) -> tuple:
    """'128x96' -> (128, 96)"""
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"dims must look like 128x96, got {text!r}"
        ) from e
    if width < 1 or height < 1:
        raise argparse.ArgumentTypeError(f"dims must be positive, got {text!r}")
    return width, height


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--w-contrast", type=float, help="Contrast exponent (default: 1)")
    p.add_argument(
        "--w-saturation", type=float, help="Saturation exponent (default: 1)"
    )
    p.add_argument(
        "--w-exposedness", type=float, help="Well-exposedness exponent (default: 1)"
    )
    p.add_argument("--sigma", type=float, help="Well-exposedness spread (default: 0.2)")
    p.add_argument("--depth", type=int, help="Pyramid depth (default: from image size)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr0", type=float, help="Initial learning rate (default: 1e-2)")
    p.add_argument(
        "--decay-power", type=float, help="Polynomial decay power (default: 0.9)"
    )
    p.add_argument("--momentum", type=float, help="SGD momentum (default: 0.9)")
    p.add_argument("--max-iters", type=int, help="Iterations (default: 2000)")
    p.add_argument("--batch-size", type=int, help="Minibatch size (default: 4)")
    p.add_argument(
        "--loss-weights", type=float, nargs=3, metavar=("CM", "MERGE", "FINAL"),
        help="Stage loss weights (default: 0.5 0.5 1.0)",
    )
    p.add_argument("--seed", type=int, help="Seed for init and shuffling (default: 0)")
    p.add_argument(
        "--checkpoint-every", type=int, help="Checkpoint interval (default: 500)"
    )
    p.add_argument("--grad-clip", type=float,
                   help="Global gradient norm clip, 0 disables (default: 10)")
    p.add_argument("--schedule", choices=["joint", "staged"],
                   help="Stage schedule (default: joint)")
    p.add_argument("--log-every", type=int, help="Log interval (default: 10)")


def create_parser():
    """Create command line argument parser"""
    parser = argparse.ArgumentParser(
        prog="dynfusion",
        description="Exposure fusion for dynamic scenes: classical and learned",
    )
    parser.add_argument(
        "--version", action="version", version=f"dynfusion {__version__}"
    )
    parser.add_argument(
        "-q", "--quiet", action="store_true", help="Suppress progress output"
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    fuse_p = subparsers.add_parser(
        "fuse", help="Classical exposure fusion of 2+ images"
    )
    fuse_p.add_argument("inputs", nargs="*", help="Input images (PNG/PPM/PGM)")
    fuse_p.add_argument("-o", "--out", help="Output image")
    fuse_p.add_argument(
        "--bitdepth", type=int, choices=[8, 16], default=8, help="Output bit depth"
    )
    _add_fusion_flags(fuse_p)

    build_p = subparsers.add_parser("build-dataset", help="Build a training dataset")
    source = build_p.add_mutually_exclusive_group()
    source.add_argument("--manifest", help="JSON-lines scene manifest")
    source.add_argument(
        "--synthetic", type=int, metavar="N", help="Generate N synthetic scenes"
    )
    build_p.add_argument("--mode", choices=["2ldr", "3ldr"], default="2ldr")
    build_p.add_argument("--ratio-min", type=float, default=DEFAULT_RATIO_MIN,
                         help="Minimum exposure ratio for 2-LDR pairs (default: 8)")
    build_p.add_argument("--dims", type=parse_dims, default=DEFAULT_DIMS,
                         help="WxH (default: 128x96)")
    build_p.add_argument(
        "--split", type=float, default=0.9, help="Training fraction of scenes"
    )
    build_p.add_argument("--seed", type=int, default=0)
    build_p.add_argument("--gt-stack", choices=["full", "pair"], default="full",
                         help="Fuse the whole reference-view stack or just the pair")
    build_p.add_argument(
        "--with-pair-gt", action="store_true", help="Also store gt_pair.png"
    )
    build_p.add_argument(
        "--no-augment-val", action="store_true", help="Leave validation unflipped"
    )
    build_p.add_argument("--layout", choices=["stereo", "free"], default="stereo",
                         help="Synthetic scene layout")
    build_p.add_argument(
        "--disparity", type=int, default=8, help="Synthetic disparity in pixels"
    )
    build_p.add_argument(
        "--object-shift", type=int, default=4, help="Synthetic object motion"
    )
    build_p.add_argument("--exposure-ratio", type=float, default=16.0,
                         help="Synthetic darkest-to-brightest exposure ratio")
    build_p.add_argument(
        "--exposures", type=int, default=5, help="Synthetic exposures per view"
    )
    build_p.add_argument("--bitdepth", type=int, choices=[8, 16], help="PNG bit depth")
    build_p.add_argument("-o", "--out", help="Output directory")

    train_p = subparsers.add_parser("train", help="Train a fusion pipeline")
    train_p.add_argument("--dataset", help="Dataset directory from build-dataset")
    train_p.add_argument(
        "--mode",
        choices=[m.value for m in PipelineMode],
        help="Pipeline (default: pipeline2 for 2ldr, pipeline3 for 3ldr)",
    )
    train_p.add_argument("--init", help="Checkpoint to resume from")
    train_p.add_argument("-o", "--out", help="Output directory for log and checkpoints")
    _add_train_flags(train_p)

    infer_p = subparsers.add_parser("infer", help="Run a trained pipeline")
    infer_p.add_argument("--checkpoint", help="Checkpoint file (.lefn)")
    infer_p.add_argument("--mode", choices=[m.value for m in PipelineMode],
                         help="Require the checkpoint to be of this mode")
    infer_p.add_argument("--ref", help="Reference image")
    infer_p.add_argument("--nonref", help="Non-reference image (2-LDR)")
    infer_p.add_argument("--under", help="Under-exposed image (3-LDR)")
    infer_p.add_argument("--over", help="Over-exposed image (3-LDR)")
    infer_p.add_argument("--ghost", help="Ghost-fused prior (computed when omitted)")
    infer_p.add_argument("-o", "--out", help="Output image")
    infer_p.add_argument("--dump-intermediates", action="store_true",
                         help="Also write color-mapped, merged and ghost-fused images")
    infer_p.add_argument("--bitdepth", type=int, choices=[8, 16], default=8)

    eval_p = subparsers.add_parser("eval", help="Score a checkpoint on a dataset")
    eval_p.add_argument("--checkpoint", help="Checkpoint file (.lefn)")
    eval_p.add_argument("--dataset", help="Dataset directory")
    eval_p.add_argument("--split", choices=["train", "val", "all"], default="all")
    eval_p.add_argument("--report", help="Metrics JSON output")
    eval_p.add_argument("--no-timing", action="store_true",
                        help="Leave wall-clock times out of the report")

    for p in subparsers.choices.values():
        p.add_argument("--config", help="Flat JSON file with flag values")
    parser.commands = subparsers.choices
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags, folding in --config values as defaults"""
    parser = create_parser()
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if config_path:
        args = _apply_config(parser, args, config_path, argv)
    for dest, directory in OUTPUTS.get(args.command, []):
        if getattr(args, dest, None):
            _check_output(getattr(args, dest), "--" + dest, directory)
    return args


def _apply_config(parser, args, config_path, argv) -> argparse.Namespace:
    try:
        config = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(
            f"config file {config_path}: {e.msg} at line {e.lineno}"
        ) from e
    if not isinstance(config, dict):
        raise UsageError(f"config file {config_path} must hold a JSON object")

    sub = parser.commands[args.command]
    known = {action.dest for action in sub._actions}
    defaults = {}
    for key, value in config.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest == "config":
            raise UsageError(f"config file {config_path}: unknown key '{key}'")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _check_output(value: str, flag: str, directory: bool) -> None:
    """The output location must be creatable before any work starts"""
    path = Path(value)
    if path.exists() and path.is_dir() != directory:
        kind = "a directory" if directory else "a file"
        raise UsageError(f"{flag} {value} exists and is not {kind}")
    anchor = path if directory else path.parent
    if directory:
        while not anchor.exists() and anchor != anchor.parent:
            anchor = anchor.parent
    if not anchor.is_dir():
        raise UsageError(f"{flag} {value}: directory {anchor} does not exist")
    if not os.access(anchor, os.W_OK):
        raise UsageError(f"{flag} {value}: directory {anchor} is not writable")


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [
        "--" + name.replace("_", "-")
        for name in names
        if getattr(args, name) in (None, "")
    ]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _fusion_params(args: argparse.Namespace) -> FusionParams:
    values = {
        name: getattr(args, name)
        for name in ("w_contrast", "w_saturation", "w_exposedness", "sigma", "depth")
        if getattr(args, name, None) is not None
    }
    return FusionParams(**values)


def _format_timings(timings: Dict[str, float]) -> str:
    return ", ".join(
        f"{stage} {seconds * 1000:.1f} ms" for stage, seconds in timings.items()
    )


# Commands

def cmd_fuse(args: argparse.Namespace) -> int:
    if len(args.inputs) < 2:
        raise UsageError("fuse needs at least 2 input images")
    _require(args, "out")
    params = _fusion_params(args)
    stack = [load_image(path) for path in args.inputs]
    timings: Dict[str, float] = {}
    started = time.perf_counter()
    fused = exposure_fuse(stack, params, timings=timings)
    timings["total"] = time.perf_counter() - started
    save_image(fused, args.out, args.bitdepth)
    say(f"✅ Fused {len(stack)} images into {args.out}")
    say(f"📊 {_format_timings(timings)}")
    return EXIT_OK


def cmd_build_dataset(args: argparse.Namespace) -> int:
    _require(args, "out")
    if args.manifest is None and args.synthetic is None:
        raise UsageError("build-dataset needs --manifest or --synthetic N")
    if args.manifest is not None:
        say(f"🔄 Reading manifest {args.manifest}")
        src = read_manifest(args.manifest)
    else:
        say(f"🔄 Generating {args.synthetic} synthetic scenes")
        src = synthetic_collection(
            args.synthetic,
            args.dims,
            seed=args.seed,
            disparity=args.disparity,
            object_shift=args.object_shift,
            layout=args.layout,
            ratio=args.exposure_ratio,
            exposures=args.exposures,
        )

    dataset = build_dataset(
        src,
        mode=args.mode,
        ratio_min=args.ratio_min,
        target_dims=args.dims,
        split=args.split,
        seed=args.seed,
        gt_stack=args.gt_stack,
        with_pair_gt=args.with_pair_gt,
        augment_val=not args.no_augment_val,
    )
    if dataset.size == 0:
        say(f"❌ 0 samples from {len(src.scenes)} scenes")
        return EXIT_EMPTY

    save_dataset(dataset, args.out, args.bitdepth)
    say(
        f"✅ {dataset.size} samples"
        f" ({len(dataset.train)} train / {len(dataset.val)} val)"
        f" from {len(src.scenes)} scenes written to {args.out}"
    )
    if dataset.warnings:
        say(f"⚠️ {len(dataset.warnings)} scenes or pairs skipped")
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    values = {
        name: getattr(args, name)
        for name in TrainConfig.model_fields
        if getattr(args, name, None) is not None
    }
    if values.get("grad_clip") == 0:
        values["grad_clip"] = None
    return TrainConfig(**values)


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "dataset", "out")
    cfg = _train_config(args)
    dataset = load_dataset(args.dataset)
    mode = PipelineMode(args.mode) if args.mode else DATASET_PIPELINES[dataset.mode]
    if (dataset.mode == "3ldr") != (mode == PipelineMode.PIPELINE3):
        raise UsageError(f"{mode.value} cannot train on a {dataset.mode} dataset")
    if not dataset.train:
        say("❌ dataset has no training samples")
        return EXIT_EMPTY

    spec = PipelineSpec.for_mode(mode)
    init = load_params(args.init, expected_spec=spec) if args.init else None
    result = train(dataset, spec, cfg, out_dir=args.out, init=init)
    last = result.log[-1]
    say(f"📊 final loss {last['loss']:.5f}")
    if result.best_val_psnr is not None:
        say(f"📊 best validation PSNR {result.best_val_psnr:.2f} dB")
    say(f"✅ Checkpoints written to {args.out}")
    return EXIT_OK


def _infer_inputs(
    args: argparse.Namespace, pipeline: FusionPipeline
) -> Dict[str, Image]:
    needed = [name for name in pipeline.input_names if name != "ghost"]
    flags = {"ref": "ref", "nonref": "nonref", "under": "under", "over": "over"}
    _require(args, *[flags[name] for name in needed])
    images = {name: load_image(getattr(args, flags[name])) for name in needed}
    if "ghost" in pipeline.input_names:
        if args.ghost:
            images["ghost"] = load_image(args.ghost)
        else:
            others = [img for name, img in images.items() if name != "ref"]
            images["ghost"] = ghost_fuse(images["ref"], others)
    return images


def cmd_infer(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "out")
    expected = PipelineSpec.for_mode(args.mode) if args.mode else None
    pipeline = load_params(args.checkpoint, expected_spec=expected)
    images = _infer_inputs(args, pipeline)
    output = pipeline.infer(images)

    out = Path(args.out)
    save_image(output.final, out, args.bitdepth)
    written: List[Path] = [out]
    if args.dump_intermediates:
        cm_names = [s.output for s in pipeline.stages if s.name.startswith("cm_")]
        extras = dict(zip(cm_names, output.cm_estimates))
        extras["merged"] = output.merged_estimate
        if "ghost" in images:
            extras["ghost"] = images["ghost"]
        for name, img in extras.items():
            path = out.with_name(f"{out.stem}_{name}{out.suffix}")
            save_image(img, path, args.bitdepth)
            written.append(path)
    say(f"✅ Wrote {', '.join(str(p) for p in written)}")
    say(f"📊 {_format_timings(output.timings)}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "dataset")
    pipeline = load_params(args.checkpoint)
    dataset = load_dataset(args.dataset)
    splits = {
        "train": dataset.train,
        "val": dataset.val,
        "all": dataset.train + dataset.val,
    }
    samples = splits[args.split]
    if not samples:
        say(f"❌ no {args.split} samples in {args.dataset}")
        return EXIT_EMPTY
    if (dataset.mode == "3ldr") != (pipeline.spec.mode == PipelineMode.PIPELINE3):
        raise IncompatibleCheckpointError(
            "mode", f"{pipeline.spec.mode.value} checkpoint on a {dataset.mode} dataset"
        )

    report = evaluate(pipeline, samples, timing=not args.no_timing)
    if args.report:
        text = report.model_dump_json(indent=2) + "\n"
        Path(args.report).write_text(text, encoding="utf-8")
    say(
        f"📊 {len(samples)} samples: PSNR {report.mean_psnr:.2f} dB,"
        f" SSIM {report.mean_ssim:.4f}"
    )
    say(
        f"📊 merged PSNR {report.mean_psnr_merged:.2f} dB, "
        f"ghost-fused baseline {report.mean_psnr_ghost:.2f} dB"
    )
    if report.mean_psnr_gt_pair is not None:
        say(f"📊 pair vs full-stack ground truth {report.mean_psnr_gt_pair:.2f} dB")
    if report.mean_seconds is not None:
        say(f"📊 mean inference time {report.mean_seconds * 1000:.1f} ms")
    return EXIT_OK


COMMANDS = {
    "fuse": cmd_fuse,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    if not args.command:
        create_parser().print_help()
        return EXIT_USAGE
    verbose = settings.verbose
    if args.quiet:
        settings.verbose = False

    try:
        return COMMANDS[args.command](args)
    except (IncompatibleCheckpointError, CheckpointFormatError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (
        UsageError,
        ContractViolation,
        ImageFormatError,
        ManifestError,
        ValidationError,
        OSError,
    ) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        settings.verbose = verbose


if __name__ == "__main__":
    sys.exit(main())
