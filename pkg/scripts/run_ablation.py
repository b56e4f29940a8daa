#!/usr/bin/env python3
"""Ablation matrix on a synthetic fixture: seg-only vs multi-task vs affinity.

Per seed, three arms share one warm-up and one set of stage-0 pseudo labels:

  seg_only    fresh init, segmentation loss only, no affinity module
  multitask   warm-up init, all three task losses, no affinity module
  full        warm-up init, all losses, cross-task affinity + refreshes
              (the complete stage-wise protocol; reports every stage)

Writes ablation.csv plus per-arm run directories under --out and prints a
median summary table.

Usage:
  python3 scripts/run_ablation.py --out runs/ablation [--seeds 0 1 2]
  python3 scripts/run_ablation.py --out runs/abl --train-dir data/train \
      --eval-dir data/eval --stage-epochs 10
"""

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path
from statistics import median

import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from auxseg.config import run_config_from_dict
from auxseg.data import SynthSpec, generate, load_dataset
from auxseg.pipeline import _model_from_checkpoint, evaluate, run_experiment, run_stage

FIXTURE_CONFIG = {
    "stages": 3,
    "warmup_epochs": 100,
    "stage_epochs": 40,
    "batch_size": 4,
    "crop": 64,
    "model": {
        "backbone_blocks": 4,
        "backbone_width": 32,
        "head_channels": 32,
        "num_classes": 3,
        "sa_hidden": 16,
        "stride": 8,
        "use_affinity": True,
    },
    "optim": {"base_lr": 0.05, "momentum": 0.9, "power": 0.9, "weight_decay": 5e-4},
    "thresholds": {"fg": 0.3, "bg": 0.06, "fg_refresh": 0.35},
    "crf": {
        "iterations": 10,
        "spatial_sigma": 3.0,
        "bilateral_sigma_xy": 30.0,
        "bilateral_sigma_rgb": 0.1,
        "spatial_weight": 3.0,
        "bilateral_weight": 5.0,
        "potts_compat": 1.0,
    },
}


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="output directory for runs and ablation.csv")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--train-dir", help="existing train split (default: generate the fixture)")
    ap.add_argument("--eval-dir", help="existing eval split")
    ap.add_argument("--num-images", type=int, default=200, help="generated train-split size")
    ap.add_argument("--stage-epochs", type=int, help="override per-stage epoch count")
    ap.add_argument("--warmup-epochs", type=int, help="override warm-up epoch count")
    return ap.parse_args()


def build_config(args, data_root, seed):
    d = json.loads(json.dumps(FIXTURE_CONFIG))
    d["train_dir"] = args.train_dir or str(data_root / "train")
    d["eval_dir"] = args.eval_dir or str(data_root / "eval")
    d["seed"] = seed
    d["model"]["seed"] = seed
    if args.stage_epochs is not None:
        d["stage_epochs"] = args.stage_epochs
    if args.warmup_epochs is not None:
        d["warmup_epochs"] = args.warmup_epochs
    return run_config_from_dict(d)


def no_affinity_variant(config, lambda_cls, lambda_sal):
    return dataclasses.replace(
        config,
        model=dataclasses.replace(config.model, use_affinity=False),
        loss=dataclasses.replace(config.loss, lambda_cls=lambda_cls, lambda_sal=lambda_sal),
    )


def stage0_arm(config, train_ds, eval_ds, pgt_dirs, init_ckpt, run_dir):
    state = run_stage(0, config, train_ds, pgt_dirs[0], pgt_dirs[1], init_ckpt, run_dir)
    return evaluate(_model_from_checkpoint(config, state.checkpoint), config, eval_ds)


def main():
    args = parse_args()
    torch.set_num_threads(1)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    data_root = out_root / "data"
    if not args.train_dir:
        if not (data_root / "train" / "spec.json").exists():
            generate(SynthSpec(num_images=args.num_images, seed=100, shapes_max=2), data_root / "train")
            generate(SynthSpec(num_images=args.num_images // 4, seed=200, shapes_max=2), data_root / "eval")

    rows = []
    t0 = time.time()
    for seed in args.seeds:
        config = build_config(args, data_root, seed)
        run_dir = out_root / f"full_s{seed}"
        summary = run_experiment(config, run_dir)
        for stage, score in enumerate(summary["stage_mious"]):
            rows.append({"arm": "full", "seed": seed, "stage": stage, "miou": round(score, 4)})

        train_ds = load_dataset(config.train_dir, "train", config.model.num_classes)
        eval_ds = load_dataset(config.eval_dir, "eval", config.model.num_classes)
        pgt_dirs = (run_dir / "pgt" / "stage_0" / "sal", run_dir / "pgt" / "stage_0" / "seg")
        warmup = run_dir / "checkpoints" / "warmup.ckpt"

        mt = stage0_arm(no_affinity_variant(config, 1.0, 1.0), train_ds, eval_ds,
                        pgt_dirs, warmup, out_root / f"multitask_s{seed}")
        rows.append({"arm": "multitask", "seed": seed, "stage": 0, "miou": round(mt, 4)})

        so = stage0_arm(no_affinity_variant(config, 0.0, 0.0), train_ds, eval_ds,
                        pgt_dirs, None, out_root / f"seg_only_s{seed}")
        rows.append({"arm": "seg_only", "seed": seed, "stage": 0, "miou": round(so, 4)})
        print(f"seed {seed}: seg_only={so:.2f} multitask={mt:.2f} "
              f"full={['%.2f' % m for m in summary['stage_mious']]}", flush=True)

    csv_path = out_root / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["arm", "seed", "stage", "miou"])
        writer.writeheader()
        writer.writerows(rows)

    def med(arm, stage):
        vals = [r["miou"] for r in rows if r["arm"] == arm and r["stage"] == stage]
        return median(vals) if vals else float("nan")

    last = max(r["stage"] for r in rows if r["arm"] == "full")
    print(f"\n{'arm':<22}{'median mIoU':>12}")
    print(f"{'seg_only':<22}{med('seg_only', 0):>12.2f}")
    print(f"{'multitask':<22}{med('multitask', 0):>12.2f}")
    print(f"{'full (stage 0)':<22}{med('full', 0):>12.2f}")
    print(f"{'full (stage ' + str(last) + ')':<22}{med('full', last):>12.2f}")
    print(f"\nwrote {csv_path} ({time.time() - t0:.0f}s total)")


if __name__ == "__main__":
    main()
