"""Pseudo ground truth for the saliency and segmentation tasks.

Segmentation labels come from hard-thresholded CAMs (foreground) and a coarse
saliency map (background); pixels where the two cues disagree are marked
IGNORE so they never contribute to a loss. Saliency labels start as the
binarized offline map and, from stage 1 on, are replaced by the dense-CRF
cleanup of the average between the offline map and the network's refined
saliency prediction.

Mask value convention: 0 background, class id c stored as c + 1, 255 IGNORE.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import IGNORE_LABEL
from .config import CrfConfig, ThresholdConfig
from .crf import dense_crf

SALIENCY_BIN_THRESHOLD = 0.5


@dataclass
class SaliencyPgt:
    map: np.ndarray     # H x W uint8 in {0, 1}
    stage: int
    source: str         # "offline" or "updated"


def update_saliency_pgt(
    stage: int,
    offline: np.ndarray,
    refined_pred: np.ndarray | None,
    image: np.ndarray,
    crf: CrfConfig,
) -> SaliencyPgt:
    """Stage 0: binarize the offline map. Later stages: CRF of the averaged maps.

    The average of `refined_pred` and `offline` forms 2-label unaries
    (background = 1 - avg, foreground = avg); the mean-field output is
    argmaxed back to a binary mask.
    """
    if stage < 0:
        raise ValueError(f"stage must be >= 0, got {stage}")
    if stage == 0:
        mask = (offline >= SALIENCY_BIN_THRESHOLD).astype(np.uint8)
        return SaliencyPgt(mask, 0, "offline")
    if refined_pred is None:
        raise ValueError(f"stage {stage} update requires the refined saliency prediction")
    if refined_pred.shape != offline.shape:
        raise ValueError(f"refined prediction {refined_pred.shape} vs offline map {offline.shape}")
    avg = (np.asarray(refined_pred, dtype=np.float64) + np.asarray(offline, dtype=np.float64)) / 2.0
    unary = np.stack([1.0 - avg, avg], axis=-1)
    out = dense_crf(unary, image, crf)
    return SaliencyPgt(np.argmax(out, axis=-1).astype(np.uint8), stage, "updated")


def generate_seg_pgt(
    cam: np.ndarray,
    saliency: np.ndarray,
    present_classes,
    thresholds: ThresholdConfig,
) -> np.ndarray:
    """Hard-threshold normalized CAMs against a saliency map into a label mask.

    cam: C x H x W normalized to [0, 1]; saliency: H x W in [0, 1]. Per pixel,
    with m the best present-class activation: confident and salient -> that
    class; unconfident and non-salient -> background; any disagreement ->
    IGNORE. Returns H x W uint8.
    """
    c, h, w = cam.shape
    if saliency.shape != (h, w):
        raise ValueError(f"saliency {saliency.shape} does not match CAM spatial dims {(h, w)}")
    present = sorted(set(int(x) for x in present_classes))
    for cls in present:
        if not 0 <= cls < c:
            raise ValueError(f"class id {cls} outside [0, {c})")

    out = np.full((h, w), IGNORE_LABEL, dtype=np.uint8)
    if present:
        sub = cam[present]
        m = sub.max(axis=0)
        best = np.take(present, sub.argmax(axis=0))
    else:
        m = np.zeros((h, w))
        best = np.zeros((h, w), dtype=np.int64)
    confident = m >= thresholds.fg
    salient = saliency > thresholds.bg
    fg = confident & salient
    out[fg] = (best[fg] + 1).astype(np.uint8)
    out[~confident & ~salient] = 0
    return out


def bootstrap_initial_seg_pgt(
    cam: np.ndarray,
    saliency: np.ndarray,
    present_classes,
    thresholds: ThresholdConfig,
) -> np.ndarray:
    """Stage-0 labels from warm-up CAMs; same rule as generate_seg_pgt."""
    return generate_seg_pgt(cam, saliency, present_classes, thresholds)


def pgt_dir(run_dir: str | Path, stage: int, kind: str) -> Path:
    if kind not in ("seg", "sal"):
        raise ValueError(f"kind must be 'seg' or 'sal', got {kind!r}")
    return Path(run_dir) / "pgt" / f"stage_{stage}" / kind


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Atomic single-channel 8-bit PNG write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_mask_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    return np.asarray(Image.open(path), dtype=np.uint8)


def save_saliency_pgt(path: str | Path, pgt: SaliencyPgt) -> None:
    """Binary saliency labels stored as {0, 255} grayscale PNG."""
    save_mask_png(path, pgt.map.astype(np.uint8) * 255)


def load_saliency_pgt(path: str | Path) -> np.ndarray:
    """Returns the {0, 1} mask."""
    return (load_mask_png(path) >= 128).astype(np.uint8)
