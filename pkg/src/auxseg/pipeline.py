"""Stage-wise training orchestration.

Protocol: train the classification branch alone on image-level labels, dump
CAMs, bootstrap stage-0 pseudo labels, then alternate full multi-task training
stages with label refreshes. Every stochastic choice derives from
(seed, phase, epoch) so interrupted runs resume bitwise and two runs with one
seed produce identical checkpoints, masks, and metrics. Phase 0 is the warm-up,
phase 1 + s is training stage s.

Run directory layout:
`<run>/{config.json, manifest.json, checkpoints/*.ckpt, pgt/stage_<s>/{seg,sal}/,
metrics/{train_log.csv, eval.csv, pgt.csv}, preds/*.png, plots/*}`.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .cam import compute_cam, normalize_cam, refine_cam, save_cam
from .checkpoint import load_checkpoint, save_array_archive, save_checkpoint
from .config import ConfigError, RunConfig, save_run_config
from .crf import dense_crf
from .data import Sample, augment_sample, load_dataset
from .losses import (
    LossReport,
    PolySchedule,
    SgdOptimizer,
    multilabel_soft_margin,
    poly_lr,
    total_loss,
)
from .metrics import (
    PgtAccumulator,
    PgtQuality,
    accumulate,
    append_csv_row,
    miou,
    new_confusion,
)
from .model import Model, build_model
from .pseudo_labels import (
    bootstrap_initial_seg_pgt,
    generate_seg_pgt,
    load_mask_png,
    load_saliency_pgt,
    pgt_dir,
    save_mask_png,
    save_saliency_pgt,
    update_saliency_pgt,
)

TRAIN_LOG_HEADER = ["stage", "epoch", "iter", "lr", "l_cls", "l_sal1", "l_sal2", "l_seg1", "l_seg2", "total"]
EVAL_CSV_HEADER = ["stage", "split", "miou"]
PGT_CSV_HEADER = ["stage", "precision", "recall", "miou"]

LogFn = Callable[[dict], None]


@dataclass
class StageState:
    stage: int
    checkpoint: Path
    pgt_sal_dir: Path
    pgt_seg_dir: Path
    miou: float | None = None
    pgt: PgtQuality | None = None


def _rng_for(seed: int, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, epoch])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _images_tensor(images: list[np.ndarray]) -> torch.Tensor:
    stack = np.stack(images).astype(np.float32)
    return torch.from_numpy(stack).permute(0, 3, 1, 2)


def _upsample(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)


def _emit(log: LogFn | None, **event) -> None:
    if log is not None:
        log(event)


def _log_iteration(path: Path, stage: int, epoch: int, iteration: int, lr: float, report: LossReport) -> None:
    vals = report.floats()
    row = [stage, epoch, iteration, f"{lr:.8f}"] + [
        f"{vals[k]:.6f}" for k in ("l_cls", "l_sal1", "l_sal2", "l_seg1", "l_seg2", "total")
    ]
    append_csv_row(path, TRAIN_LOG_HEADER, row)


def warmup_classifier(
    config: RunConfig, dataset: list[Sample], run_dir: str | Path, log: LogFn | None = None
) -> Path:
    """Train backbone + classifier only; both dense heads stay at initialization."""
    if not dataset:
        raise ConfigError(["train dataset is empty"])
    run_dir = Path(run_dir)
    model = build_model(config.model)
    model.train()
    params = [(n, p) for n, p in model.named_parameters() if n.split(".")[0] in ("backbone", "classifier")]
    opt = SgdOptimizer(params, config.optim.momentum, config.optim.weight_decay)
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    sched = PolySchedule(config.optim.base_lr, config.optim.power, config.warmup_epochs * per_epoch)
    log_path = run_dir / "metrics" / "train_log.csv"

    iteration = 0
    for epoch in range(1, config.warmup_epochs + 1):
        rng = _rng_for(config.seed, 0, epoch)
        epoch_losses = []
        for idx in _batches(len(dataset), config.batch_size, rng):
            images, targets = [], []
            for i in idx:
                img, _, _ = augment_sample(dataset[i].image, None, None, config.crop, config.aug, rng)
                images.append(img)
                targets.append(dataset[i].image_labels)
            x = _images_tensor(images)
            y = torch.from_numpy(np.stack(targets)).float()
            logits, _ = model.classify(model.forward_backbone(x))
            loss = multilabel_soft_margin(logits, y)
            opt.zero_grad()
            loss.backward()
            lr = poly_lr(sched, iteration)
            opt.step(lr)
            detached = loss.detach()
            zero = detached * 0.0
            _log_iteration(log_path, -1, epoch, iteration, lr, LossReport(detached, zero, zero, zero, zero, detached))
            epoch_losses.append(float(detached))
            iteration += 1
        _emit(log, event="warmup_epoch", epoch=epoch, mean_loss=float(np.mean(epoch_losses)))

    ckpt = run_dir / "checkpoints" / "warmup.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    return ckpt


def _model_from_checkpoint(config: RunConfig, checkpoint: str | Path) -> Model:
    model = build_model(config.model)
    load_checkpoint(model, checkpoint)
    model.eval()
    return model


def _classifier_weights(model: Model) -> np.ndarray:
    return model.classifier.weight.detach().numpy().astype(np.float64).T     # K x C


def _cam_stack(
    model: Model,
    sample: Sample,
    affinity: np.ndarray | None,
    refine_iterations: int,
) -> np.ndarray:
    """Normalized CAMs at input resolution, optionally propagated by an affinity."""
    x = _images_tensor([sample.image])
    with torch.no_grad():
        features = model.forward_backbone(x)
    feats = features[0].permute(1, 2, 0).numpy().astype(np.float64)
    stack = normalize_cam(compute_cam(feats, _classifier_weights(model), sample.present_classes))
    if affinity is not None:
        stack = refine_cam(stack, affinity, refine_iterations)
    h, w = sample.image.shape[:2]
    up = _upsample(torch.from_numpy(stack[None]).float(), (h, w))[0].numpy().astype(np.float64)
    return normalize_cam(up)


def _write_pgt_pair(
    sal_dir: Path, seg_dir: Path, image_id: str, sal_mask, seg_mask: np.ndarray
) -> None:
    save_saliency_pgt(sal_dir / f"{image_id}.png", sal_mask)
    save_mask_png(seg_dir / f"{image_id}.png", seg_mask)


def bootstrap_pgt(
    config: RunConfig,
    dataset: list[Sample],
    checkpoint: str | Path,
    run_dir: str | Path,
    log: LogFn | None = None,
) -> tuple[Path, Path]:
    """Stage-0 labels: unrefined warm-up CAMs + binarized offline saliency."""
    model = _model_from_checkpoint(config, checkpoint)
    sal_dir = pgt_dir(run_dir, 0, "sal")
    seg_dir = pgt_dir(run_dir, 0, "seg")
    try:
        for sample in dataset:
            cams = _cam_stack(model, sample, None, config.cam_refine_iterations)
            seg = bootstrap_initial_seg_pgt(cams, sample.offline_saliency, sample.present_classes, config.thresholds)
            sal = update_saliency_pgt(0, sample.offline_saliency, None, sample.image, config.crf)
            _write_pgt_pair(sal_dir, seg_dir, sample.image_id, sal, seg)
    except BaseException:
        shutil.rmtree(sal_dir, ignore_errors=True)
        shutil.rmtree(seg_dir, ignore_errors=True)
        raise
    _emit(log, event="bootstrap_pgt", stage=0, images=len(dataset))
    return sal_dir, seg_dir


def run_stage(
    stage: int,
    config: RunConfig,
    dataset: list[Sample],
    pgt_sal_dir: str | Path,
    pgt_seg_dir: str | Path,
    init_checkpoint: str | Path | None,
    run_dir: str | Path,
    log: LogFn | None = None,
) -> StageState:
    """One joint training stage over frozen pseudo labels; saves a checkpoint."""
    run_dir = Path(run_dir)
    pgt_sal_dir, pgt_seg_dir = Path(pgt_sal_dir), Path(pgt_seg_dir)
    if not dataset:
        raise ConfigError(["train dataset is empty"])
    missing = [
        s.image_id
        for s in dataset
        if not (pgt_sal_dir / f"{s.image_id}.png").exists() or not (pgt_seg_dir / f"{s.image_id}.png").exists()
    ]
    if missing:
        raise ValueError(f"missing pseudo labels for stage {stage}: {', '.join(missing)}")

    sal_masks = {s.image_id: load_saliency_pgt(pgt_sal_dir / f"{s.image_id}.png") for s in dataset}
    seg_masks = {s.image_id: load_mask_png(pgt_seg_dir / f"{s.image_id}.png") for s in dataset}

    model = build_model(config.model)
    if init_checkpoint is not None:
        load_checkpoint(model, init_checkpoint)
    model.train()
    opt = SgdOptimizer(model.named_parameters(), config.optim.momentum, config.optim.weight_decay)
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    sched = PolySchedule(config.optim.base_lr, config.optim.power, config.stage_epochs * per_epoch)
    log_path = run_dir / "metrics" / "train_log.csv"

    iteration = 0
    for epoch in range(1, config.stage_epochs + 1):
        rng = _rng_for(config.seed, 1 + stage, epoch)
        epoch_totals = []
        for idx in _batches(len(dataset), config.batch_size, rng):
            images, sals, segs, targets = [], [], [], []
            for i in idx:
                sample = dataset[i]
                img, sal, seg = augment_sample(
                    sample.image, sal_masks[sample.image_id], seg_masks[sample.image_id],
                    config.crop, config.aug, rng,
                )
                images.append(img)
                sals.append(sal)
                segs.append(seg)
                targets.append(sample.image_labels)
            x = _images_tensor(images)
            y = torch.from_numpy(np.stack(targets)).float()
            pgt_sal = torch.from_numpy(np.stack(sals)).float()
            pgt_seg = torch.from_numpy(np.stack(segs).astype(np.int64))

            out = model(x)
            size = (x.shape[2], x.shape[3])
            sal_prob = _upsample(out.sal_prob.unsqueeze(1), size).squeeze(1)
            seg_prob = _upsample(out.seg_prob, size)
            sal_ref = _upsample(out.sal_refined.unsqueeze(1), size).squeeze(1) if out.sal_refined is not None else None
            seg_ref = _upsample(out.seg_refined, size) if out.seg_refined is not None else None
            report = total_loss(out.logits, y, sal_prob, seg_prob, sal_ref, seg_ref, pgt_sal, pgt_seg, config.loss)

            opt.zero_grad()
            report.total.backward()
            lr = poly_lr(sched, iteration)
            opt.step(lr)
            _log_iteration(log_path, stage, epoch, iteration, lr, report)
            epoch_totals.append(float(report.total.detach()))
            iteration += 1
        _emit(log, event="stage_epoch", stage=stage, epoch=epoch, mean_total=float(np.mean(epoch_totals)))

    ckpt = run_dir / "checkpoints" / f"stage_{stage}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    return StageState(stage, ckpt, pgt_sal_dir, pgt_seg_dir)


def _aggregation_normalize_np(a: np.ndarray, transpose: bool, eps: float = 1e-12) -> np.ndarray:
    if transpose:
        a = a.T
    return a / np.maximum(a.sum(axis=1, keepdims=True), eps)


def refresh_labels(
    stage: int,
    checkpoint: str | Path,
    config: RunConfig,
    dataset: list[Sample],
    run_dir: str | Path,
    log: LogFn | None = None,
    affinity_override: np.ndarray | None = None,
) -> tuple[Path, Path]:
    """Produce stage (s+1) labels from the stage-s checkpoint.

    Per image: forward pass, CAMs propagated through the (transposed,
    re-normalized) cross-task affinity regenerate the segmentation labels, and
    the refined saliency prediction averaged with the offline map goes through
    the dense CRF for the new saliency labels. `affinity_override` replaces the
    learned affinity in the CAM propagation (diagnostic hook).
    """
    if not config.model.use_affinity and affinity_override is None:
        raise ValueError("label refresh needs the cross-task affinity; model has it disabled")
    model = _model_from_checkpoint(config, checkpoint)
    sal_dir = pgt_dir(run_dir, stage + 1, "sal")
    seg_dir = pgt_dir(run_dir, stage + 1, "seg")
    export_dir = Path(run_dir) / "arrays" / f"stage_{stage + 1}"
    try:
        for sample in dataset:
            x = _images_tensor([sample.image])
            with torch.no_grad():
                out = model(x)
            if affinity_override is not None:
                affinity = affinity_override
            else:
                a_ct = out.a_ct[0].numpy().astype(np.float64)
                affinity = _aggregation_normalize_np(a_ct, transpose=config.cam_refine_transpose)
            cams = _cam_stack(model, sample, affinity, config.cam_refine_iterations)
            thresholds = config.thresholds.for_stage(stage + 1)
            seg = generate_seg_pgt(cams, sample.offline_saliency, sample.present_classes, thresholds)

            h, w = sample.image.shape[:2]
            sal_ref = _upsample(out.sal_refined.unsqueeze(1), (h, w))[0, 0].numpy().astype(np.float64)
            sal = update_saliency_pgt(stage + 1, sample.offline_saliency, np.clip(sal_ref, 0.0, 1.0), sample.image, config.crf)
            _write_pgt_pair(sal_dir, seg_dir, sample.image_id, sal, seg)
            if config.export_arrays:
                save_cam(export_dir, sample.image_id, cams.astype(np.float32), sample.present_classes)
                save_array_archive(export_dir / f"{sample.image_id}_affinity.arrz", {"a_ct": affinity.astype(np.float32)})
    except BaseException:
        shutil.rmtree(sal_dir, ignore_errors=True)
        shutil.rmtree(seg_dir, ignore_errors=True)
        raise
    _emit(log, event="refresh_labels", from_stage=stage, to_stage=stage + 1, images=len(dataset))
    return sal_dir, seg_dir


def predict_probs(model: Model, image: np.ndarray, config: RunConfig) -> np.ndarray:
    """Per-pixel label distributions H x W x (C+1) at input resolution.

    Sizes not divisible by the stride get reflective padding, cropped away
    after upsampling. Uses the affinity-refined prediction when available.
    """
    h, w = image.shape[:2]
    stride = config.model.stride
    pad_h = (stride - h % stride) % stride
    pad_w = (stride - w % stride) % stride
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") if pad_h or pad_w else image
    x = _images_tensor([padded])
    with torch.no_grad():
        out = model(x)
        probs = out.seg_refined if out.seg_refined is not None else out.seg_prob
        up = _upsample(probs, (padded.shape[0], padded.shape[1]))[0]
    dist = up.permute(1, 2, 0).numpy().astype(np.float64)[:h, :w]
    dist = np.clip(dist, 0.0, None)
    return dist / np.maximum(dist.sum(axis=2, keepdims=True), 1e-12)


def infer(model: Model, image: np.ndarray, config: RunConfig) -> np.ndarray:
    """Label mask for one image; optional dense-CRF post-processing."""
    probs = predict_probs(model, image, config)
    if config.infer_crf:
        probs = dense_crf(probs, image, config.crf)
    return probs.argmax(axis=2).astype(np.uint8)


def evaluate(
    model: Model, config: RunConfig, dataset: list[Sample], crf_post: bool | None = None
) -> float:
    """Dataset mIoU against ground-truth masks (eval split required)."""
    if not dataset:
        raise ConfigError(["eval dataset is empty"])
    use_crf = config.infer_crf if crf_post is None else crf_post
    conf = new_confusion(config.model.num_classes + 1)
    for sample in dataset:
        if sample.gt_mask is None:
            raise ValueError(f"{sample.image_id}: evaluation needs ground-truth masks (eval split)")
        probs = predict_probs(model, sample.image, config)
        if use_crf:
            probs = dense_crf(probs, sample.image, config.crf)
        accumulate(conf, probs.argmax(axis=2).astype(np.uint8), sample.gt_mask)
    return miou(conf)


def _measure_pgt(
    seg_dir: Path, gt_samples: list[Sample], num_classes: int, stage: int
) -> PgtQuality:
    acc = PgtAccumulator(num_classes)
    for sample in gt_samples:
        acc.add(load_mask_png(seg_dir / f"{sample.image_id}.png"), sample.gt_mask)
    return acc.quality(stage)


def run_experiment(config: RunConfig, run_dir: str | Path, log: LogFn | None = None) -> dict:
    """Full protocol: warm-up, stage-0 labels, S alternating train/refresh rounds.

    Returns a summary dict; all artifacts land under `run_dir`. Ground-truth
    masks are read only for metrics (pseudo-label quality needs them), never
    for supervision.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(config, run_dir / "config.json")
    num_classes = config.model.num_classes
    train_ds = load_dataset(config.train_dir, "train", num_classes)
    eval_ds = load_dataset(config.eval_dir, "eval", num_classes)
    try:
        train_gt = load_dataset(config.train_dir, "eval", num_classes)
    except (FileNotFoundError, ValueError):
        train_gt = None     # real datasets may not ship train-set masks; skip PGT metrics

    events: list[dict] = []
    manifest_path = run_dir / "manifest.json"

    def record(kind: str, **fields) -> None:
        events.append({"kind": kind, **fields})
        manifest_path.write_text(json.dumps({"events": events}, indent=1, sort_keys=True) + "\n")

    warmup_ckpt = warmup_classifier(config, train_ds, run_dir, log)
    record("warmup", checkpoint=str(warmup_ckpt.relative_to(run_dir)))
    _emit(log, event="warmup_done", checkpoint=str(warmup_ckpt))

    sal_dir, seg_dir = bootstrap_pgt(config, train_ds, warmup_ckpt, run_dir, log)
    record("bootstrap_pgt", stage=0)

    def log_pgt_quality(stage: int, seg_path: Path) -> PgtQuality | None:
        if train_gt is None:
            return None
        q = _measure_pgt(seg_path, train_gt, num_classes, stage)
        append_csv_row(
            run_dir / "metrics" / "pgt.csv",
            PGT_CSV_HEADER,
            [stage, f"{q.precision:.4f}", f"{q.recall:.4f}", f"{q.miou:.4f}"],
        )
        _emit(log, event="pgt_quality", stage=stage, precision=q.precision, recall=q.recall, miou=q.miou)
        return q

    stage_mious: list[float] = []
    pgt_rows = [log_pgt_quality(0, seg_dir)]
    prev_ckpt: Path = warmup_ckpt
    state: StageState | None = None
    for s in range(config.stages):
        init = warmup_ckpt if config.reinit_each_stage else prev_ckpt
        state = run_stage(s, config, train_ds, sal_dir, seg_dir, init, run_dir, log)
        record("train_stage", stage=s, checkpoint=str(state.checkpoint.relative_to(run_dir)))

        model = _model_from_checkpoint(config, state.checkpoint)
        score = evaluate(model, config, eval_ds)
        stage_mious.append(score)
        state.miou = score
        append_csv_row(run_dir / "metrics" / "eval.csv", EVAL_CSV_HEADER, [s, "eval", f"{score:.4f}"])
        record("eval", stage=s, miou=round(score, 4))
        _emit(log, event="eval", stage=s, miou=score)

        if s < config.stages - 1:
            sal_dir, seg_dir = refresh_labels(s, state.checkpoint, config, train_ds, run_dir, log)
            record("refresh_labels", from_stage=s, to_stage=s + 1)
            pgt_rows.append(log_pgt_quality(s + 1, seg_dir))
        prev_ckpt = state.checkpoint

    final_model = _model_from_checkpoint(config, state.checkpoint)
    preds_dir = run_dir / "preds"
    for sample in eval_ds:
        save_mask_png(preds_dir / f"{sample.image_id}.png", infer(final_model, sample.image, config))
    record("predictions", stage=config.stages - 1, directory="preds")

    return {
        "final_checkpoint": str(state.checkpoint),
        "stage_mious": stage_mious,
        "pgt": [q.__dict__ for q in pgt_rows if q is not None],
        "run_dir": str(run_dir),
    }
