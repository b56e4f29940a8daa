"""Command-line entry points.

Subcommands: synth-data, train, refine-cam, gen-pgt, eval, infer, plot-metrics.
Every flag has a config-file equivalent; `--set a.b.c=value` overrides win over
the config file. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .cam import load_cam, save_cam
from .checkpoint import save_array_archive
from .config import ConfigError, RunConfig, apply_overrides, run_config_from_dict
from .data import SynthSpec, generate, load_dataset
from .metrics import plot_stage_trends
from .model import Model
from .pipeline import (
    _aggregation_normalize_np,
    _cam_stack,
    _images_tensor,
    _model_from_checkpoint,
    _upsample,
    evaluate,
    infer,
    run_experiment,
)
from .pseudo_labels import pgt_dir, save_mask_png, save_saliency_pgt, update_saliency_pgt


class EventLog:
    """Prints one line per event: key=value pairs, or JSON objects with --json-logs."""

    def __init__(self, json_mode: bool):
        self.json_mode = json_mode

    def __call__(self, event: dict) -> None:
        if self.json_mode:
            print(json.dumps(event, sort_keys=True), flush=True)
        else:
            parts = []
            for key, value in event.items():
                if isinstance(value, float):
                    parts.append(f"{key}={value:.4f}")
                else:
                    parts.append(f"{key}={value}")
            print(" ".join(parts), flush=True)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. --set optim.base_lr=0.01")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxseg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"auxseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--spec", help="JSON file of generator fields")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="generator field override, e.g. --set num_images=50")
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run the full stage-wise training pipeline")
    _add_config_flags(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--train-dir", help="overrides config train_dir")
    p.add_argument("--eval-dir", help="overrides config eval_dir")
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine-cam", help="export affinity-refined CAMs for a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="CAM archive output directory")
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_refine_cam)

    p = sub.add_parser("gen-pgt", help="generate pseudo labels from exported CAMs")
    _add_config_flags(p)
    p.add_argument("--cam-dir", required=True, help="directory written by refine-cam")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run directory to hold pgt/stage_<s>/")
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--checkpoint", help="needed for stage > 0 saliency updates")
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_gen_pgt)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--crf", action="store_true", help="dense-CRF post-processing")
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--crf", action="store_true")
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot-metrics", help="render per-stage metric trends for a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--json-logs", action="store_true")
    p.set_defaults(func=cmd_plot_metrics)

    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError([f"config file {path} is not valid JSON: {e}"])
    data = apply_overrides(data, list(getattr(args, "set", []) or []))
    for field in ("train_dir", "eval_dir"):
        value = getattr(args, field, None)
        if value:
            data[field] = value
    return run_config_from_dict(data)


def cmd_synth_data(args: argparse.Namespace, log: EventLog) -> int:
    data: dict = {}
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise ConfigError([f"spec file not found: {path}"])
        data = json.loads(path.read_text())
    data = apply_overrides(data, args.set)
    names = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = [f"{k}: unknown generator field" for k in data if k not in names]
    if unknown:
        raise ConfigError(unknown)
    if "classes" in data:
        data["classes"] = tuple(data["classes"])
    spec = SynthSpec(**data)
    try:
        out = generate(spec, args.out)
    except ValueError as e:
        raise ConfigError([str(e)])
    log({"event": "synth_data", "out": str(out), "num_images": spec.num_images})
    return 0


def cmd_train(args: argparse.Namespace, log: EventLog) -> int:
    config = _load_config(args)
    problems = [f"{f} must be set (flag or config)" for f in ("train_dir", "eval_dir") if not getattr(config, f)]
    if problems:
        raise ConfigError(problems)
    summary = run_experiment(config, args.run_dir, log)
    log({"event": "train_done", "run_dir": summary["run_dir"], "final_miou": summary["stage_mious"][-1]})
    return 0


def _refined_affinity(model: Model, out, config: RunConfig) -> np.ndarray | None:
    if out.a_ct is None:
        return None
    a_ct = out.a_ct[0].numpy().astype(np.float64)
    return _aggregation_normalize_np(a_ct, transpose=config.cam_refine_transpose)


def cmd_refine_cam(args: argparse.Namespace, log: EventLog) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset, "train", config.model.num_classes)
    model = _model_from_checkpoint(config, _existing(args.checkpoint, "checkpoint"))
    out_dir = Path(args.out)
    for sample in dataset:
        x = _images_tensor([sample.image])
        with torch.no_grad():
            outputs = model(x)
        affinity = _refined_affinity(model, outputs, config)
        cams = _cam_stack(model, sample, affinity, config.cam_refine_iterations)
        save_cam(out_dir, sample.image_id, cams.astype(np.float32), sample.present_classes)
        if affinity is not None:
            save_array_archive(out_dir / f"{sample.image_id}_affinity.arrz",
                               {"a_ct": affinity.astype(np.float32)})
    log({"event": "refine_cam", "out": str(out_dir), "images": len(dataset)})
    return 0


def cmd_gen_pgt(args: argparse.Namespace, log: EventLog) -> int:
    config = _load_config(args)
    cam_dir = Path(args.cam_dir)
    if not cam_dir.is_dir():
        raise ConfigError([f"CAM directory not found: {cam_dir}"])
    if args.stage > 0 and not args.checkpoint:
        raise ConfigError([f"stage {args.stage} saliency updates need --checkpoint"])
    dataset = load_dataset(args.dataset, "train", config.model.num_classes)
    model = None
    if args.stage > 0:
        model = _model_from_checkpoint(config, _existing(args.checkpoint, "checkpoint"))
    sal_dir = pgt_dir(args.out, args.stage, "sal")
    seg_dir = pgt_dir(args.out, args.stage, "seg")
    from .pseudo_labels import generate_seg_pgt

    thresholds = config.thresholds.for_stage(args.stage)
    for sample in dataset:
        cams, present = load_cam(cam_dir, sample.image_id)
        seg = generate_seg_pgt(cams.astype(np.float64), sample.offline_saliency, present, thresholds)
        save_mask_png(seg_dir / f"{sample.image_id}.png", seg)
        if args.stage == 0:
            sal = update_saliency_pgt(0, sample.offline_saliency, None, sample.image, config.crf)
        else:
            x = _images_tensor([sample.image])
            with torch.no_grad():
                outputs = model(x)
            h, w = sample.image.shape[:2]
            ref = outputs.sal_refined if outputs.sal_refined is not None else outputs.sal_prob
            ref = _upsample(ref.unsqueeze(1), (h, w))[0, 0].numpy().astype(np.float64)
            sal = update_saliency_pgt(args.stage, sample.offline_saliency, np.clip(ref, 0.0, 1.0),
                                      sample.image, config.crf)
        save_saliency_pgt(sal_dir / f"{sample.image_id}.png", sal)
    log({"event": "gen_pgt", "stage": args.stage, "seg_dir": str(seg_dir), "sal_dir": str(sal_dir)})
    return 0


def _existing(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise ConfigError([f"{what} not found: {path}"])
    return path


def cmd_eval(args: argparse.Namespace, log: EventLog) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset, "eval", config.model.num_classes)
    model = _model_from_checkpoint(config, _existing(args.checkpoint, "checkpoint"))
    score = evaluate(model, config, dataset, crf_post=args.crf)
    log({"event": "eval", "dataset": args.dataset, "miou": score})
    print(f"miou={score:.4f}")
    return 0


def cmd_infer(args: argparse.Namespace, log: EventLog) -> int:
    config = _load_config(args)
    if args.crf:
        config.infer_crf = True
    model = _model_from_checkpoint(config, _existing(args.checkpoint, "checkpoint"))
    image_path = _existing(args.image, "image")
    image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
    mask = infer(model, image, config)
    save_mask_png(args.out, mask)
    log({"event": "infer", "image": str(image_path), "out": args.out})
    return 0


def cmd_plot_metrics(args: argparse.Namespace, log: EventLog) -> int:
    written = plot_stage_trends(args.run_dir)
    log({"event": "plot_metrics", "files": [str(p) for p in written]})
    return 0


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:    # argparse handles --help / bad flags itself
        return 0 if e.code in (0, None) else 1
    torch.set_num_threads(1)
    log = EventLog(getattr(args, "json_logs", False))
    try:
        return int(args.func(args, log) or 0)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:    # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
