"""Evaluation metrics: confusion-matrix mIoU, pseudo-label quality, trend plots.

mIoU averages TP / (TP + FP + FN) over classes with nonzero union, as a
percentage; ground-truth IGNORE pixels never enter the matrix. Pseudo-label
quality uses macro precision / recall over foreground classes, counting
IGNORE pixels in the pseudo mask as missed recall (they are unlabeled, not
wrong), plus an mIoU under the same convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import IGNORE_LABEL


@dataclass
class ConfusionMatrix:
    counts: np.ndarray      # (L, L) int64; rows = ground truth, cols = prediction
    ignored_pixels: int = 0


def new_confusion(num_labels: int) -> ConfusionMatrix:
    if num_labels < 1:
        raise ValueError(f"num_labels must be >= 1, got {num_labels}")
    return ConfusionMatrix(np.zeros((num_labels, num_labels), dtype=np.int64))


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one image's pixels; pure accumulation, order-independent."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    num_labels = conf.counts.shape[0]
    valid = gt != IGNORE_LABEL
    conf.ignored_pixels += int((~valid).sum())
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size == 0:
        return conf
    if g.max() >= num_labels or p.max() >= num_labels or g.min() < 0 or p.min() < 0:
        raise ValueError(f"labels outside [0, {num_labels})")
    conf.counts += np.bincount(g * num_labels + p, minlength=num_labels**2).reshape(
        num_labels, num_labels
    )
    return conf


def miou(conf: ConfusionMatrix) -> float:
    """Percentage mIoU over classes observed in GT or prediction."""
    if conf.counts.sum() == 0:
        raise ValueError("mIoU undefined: empty confusion matrix")
    tp = np.diag(conf.counts).astype(np.float64)
    union = conf.counts.sum(axis=1) + conf.counts.sum(axis=0) - np.diag(conf.counts)
    observed = union > 0
    return float((tp[observed] / union[observed]).mean() * 100.0)


@dataclass
class PgtQuality:
    precision: float
    recall: float
    miou: float
    stage: int = 0
    degenerate: bool = False    # no labeled foreground pixels at all


@dataclass
class PgtAccumulator:
    """Set-level pseudo-label quality; add() per image, quality() to finish."""

    num_classes: int
    tp: np.ndarray = field(init=False)          # per mask value 0..C
    labeled: np.ndarray = field(init=False)     # pixels the PGT assigns to each value
    gt_total: np.ndarray = field(init=False)    # GT pixels of each value
    missed: np.ndarray = field(init=False)      # GT pixels of each value left IGNORE or wrong

    def __post_init__(self) -> None:
        n = self.num_classes + 1
        self.tp = np.zeros(n, dtype=np.int64)
        self.labeled = np.zeros(n, dtype=np.int64)
        self.gt_total = np.zeros(n, dtype=np.int64)
        self.missed = np.zeros(n, dtype=np.int64)

    def add(self, pgt: np.ndarray, gt: np.ndarray) -> None:
        if pgt.shape != gt.shape:
            raise ValueError(f"pseudo mask {pgt.shape} vs ground truth {gt.shape}")
        gt_valid = gt != IGNORE_LABEL
        for value in range(self.num_classes + 1):
            in_pgt = (pgt == value) & gt_valid
            in_gt = gt == value
            self.tp[value] += int((in_pgt & in_gt).sum())
            self.labeled[value] += int(in_pgt.sum())
            self.gt_total[value] += int(in_gt.sum())
            self.missed[value] += int((in_gt & (pgt != value)).sum())

    def quality(self, stage: int = 0) -> PgtQuality:
        fg = slice(1, self.num_classes + 1)
        has_label = self.labeled[fg] > 0
        has_gt = self.gt_total[fg] > 0
        precisions = self.tp[fg][has_label] / self.labeled[fg][has_label]
        recalls = self.tp[fg][has_gt] / self.gt_total[fg][has_gt]
        ious = []
        for value in range(self.num_classes + 1):
            union = self.labeled[value] + self.missed[value]    # tp + fp + fn
            if union > 0:
                ious.append(self.tp[value] / union)
        degenerate = not has_label.any()
        return PgtQuality(
            precision=float(precisions.mean() * 100.0) if precisions.size else 0.0,
            recall=float(recalls.mean() * 100.0) if recalls.size else 0.0,
            miou=float(np.mean(ious) * 100.0) if ious else 0.0,
            stage=stage,
            degenerate=degenerate,
        )


def pgt_quality(pgt: np.ndarray, gt: np.ndarray, num_classes: int, stage: int = 0) -> PgtQuality:
    """Single-mask convenience wrapper over PgtAccumulator."""
    acc = PgtAccumulator(num_classes)
    acc.add(pgt, gt)
    return acc.quality(stage)


def append_csv_row(path: str | Path, header: list[str], row: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(header)
        writer.writerow(row)


def read_csv_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_stage_trends(run_dir: str | Path) -> list[Path]:
    """Render per-stage pseudo-label quality and eval mIoU; returns written paths.

    Emits `plots/pgt_trends.png`, `plots/eval_miou.png` and the merged
    `plots/stage_trends.csv` (byte-deterministic for unchanged metrics).
    """
    run_dir = Path(run_dir)
    eval_csv = run_dir / "metrics" / "eval.csv"
    pgt_csv = run_dir / "metrics" / "pgt.csv"
    missing = [str(p) for p in (eval_csv, pgt_csv) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing metrics files: {', '.join(missing)}")

    pgt_rows = {int(r["stage"]): r for r in read_csv_rows(pgt_csv)}
    eval_rows = {int(r["stage"]): r for r in read_csv_rows(eval_csv) if r["split"] == "eval"}
    stages = sorted(set(pgt_rows) | set(eval_rows))
    if not stages:
        raise ValueError(f"no stage rows found in {pgt_csv} / {eval_csv}")

    plots = run_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    merged = plots / "stage_trends.csv"
    with open(merged, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "pgt_precision", "pgt_recall", "pgt_miou", "eval_miou"])
        for s in stages:
            p = pgt_rows.get(s)
            e = eval_rows.get(s)
            writer.writerow(
                [
                    s,
                    p["precision"] if p else "",
                    p["recall"] if p else "",
                    p["miou"] if p else "",
                    e["miou"] if e else "",
                ]
            )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pgt_stages = sorted(pgt_rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("precision", "recall", "miou"):
        ax.plot(pgt_stages, [float(pgt_rows[s][key]) for s in pgt_stages], marker="o", label=key)
    ax.set_xlabel("stage")
    ax.set_ylabel("%")
    ax.set_title("pseudo-label quality by stage")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plots / "pgt_trends.png")
    plt.close(fig)

    eval_stages = sorted(eval_rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(eval_stages, [float(eval_rows[s]["miou"]) for s in eval_stages], marker="o", color="tab:red")
    ax.set_xlabel("stage")
    ax.set_ylabel("mIoU (%)")
    ax.set_title("eval mIoU by stage")
    fig.tight_layout()
    fig.savefig(plots / "eval_miou.png")
    plt.close(fig)

    return [plots / "pgt_trends.png", plots / "eval_miou.png", merged]
