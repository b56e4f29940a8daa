"""Synthetic shapes dataset: generation, loading, and joint augmentation.

Images are colored geometric shapes (circle / square / triangle) over a noisy
gray background. Every class draws from the same saturated color palette, so
figure/ground is color-separable (the saliency task stays easy) while class
identity is carried by geometry alone; telling classes apart requires shape
context, which is what the image-level classification signal teaches.
Supervision mirrors the weakly-supervised setting: image-level class lists for
training, plus a simulated coarse "offline" saliency map obtained by
corrupting the true foreground (dilate, blur, random patch dropout). Full
masks are written to an eval-only subdirectory and are never exposed on the
train split.

Mask value convention: 0 background, class id c stored as c + 1, 255 IGNORE.
Layout: `<dataset>/{images/*.png, labels/labels.json, saliency/*.png,
gt_masks/*.png}`; labels.json maps image id -> sorted class-id list.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation, gaussian_filter

from . import IGNORE_LABEL
from .config import AugConfig

SHAPE_NAMES = ("circle", "square", "triangle")

# Counts gt_masks/ reads; lets tests assert the train path never touches them.
GT_MASK_READS = 0


@dataclass
class SynthSpec:
    num_images: int = 200
    image_size: int = 64
    classes: tuple[str, ...] = SHAPE_NAMES
    shapes_min: int = 1
    shapes_max: int = 3
    noise: float = 0.06             # background texture amplitude
    sal_dilate: int = 2             # dilation radius (pixels); 0 disables
    sal_blur: float = 1.2           # Gaussian sigma; 0 disables
    sal_dropout: float = 0.15       # per-patch dropout probability; 0 disables
    seed: int = 0


@dataclass
class Sample:
    image_id: str
    image: np.ndarray               # H x W x 3 float32 in [0, 1]
    image_labels: np.ndarray        # length-C uint8 presence vector
    offline_saliency: np.ndarray    # H x W float32 in [0, 1]
    gt_mask: np.ndarray | None = field(default=None)    # eval split only

    @property
    def present_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.image_labels)]


def _shape_region(shape: tuple[int, int], kind: str, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r
    if kind == "triangle":
        rows = (yy >= cy - r) & (yy <= cy + r)
        return rows & (np.abs(xx - cx) <= (yy - cy + r) / 2.0)
    raise ValueError(f"unknown shape class {kind!r}")


def _render_image(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One sample: (image float64, gt mask uint8, corrupted saliency float64)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    base = rng.uniform(0.28, 0.48, size=3)
    image = np.tile(base, (size, size, 1))
    image += rng.normal(0.0, spec.noise, size=(size, size, 1))

    mask = np.zeros((size, size), dtype=np.uint8)
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(count):
        cls = int(rng.integers(0, len(spec.classes)))
        kind = spec.classes[cls]
        r = rng.uniform(0.16, 0.27) * size
        cy = rng.uniform(r + 1, size - r - 1)
        cx = rng.uniform(r + 1, size - r - 1)
        region = _shape_region(mask.shape, kind, cy, cx, r)
        mask[region] = cls + 1
        # Shared palette across classes: saturated against the dull background,
        # deliberately uninformative of the class.
        color = colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.55, 0.9), rng.uniform(0.65, 0.95))
        image[region] = color
    image = np.clip(image, 0.0, 1.0)

    fg = (mask > 0).astype(np.float64)
    sal = fg
    if spec.sal_dilate > 0:
        sal = binary_dilation(sal > 0.5, iterations=spec.sal_dilate).astype(np.float64)
    if spec.sal_blur > 0:
        sal = gaussian_filter(sal, sigma=spec.sal_blur)
    for _ in range(3):
        if spec.sal_dropout > 0 and rng.random() < spec.sal_dropout:
            ps = int(rng.uniform(0.15, 0.3) * size)
            top = int(rng.integers(0, size - ps + 1))
            left = int(rng.integers(0, size - ps + 1))
            sal[top : top + ps, left : left + ps] = 0.0
    return image, mask, np.clip(sal, 0.0, 1.0)


def _save_png(path: Path, arr: np.ndarray, mode: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def generate(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write a full dataset; byte-deterministic for a given SynthSpec.

    With default corruption, asserts that the binarized offline saliency
    overlaps the true foreground with set-level IoU in [0.5, 0.95] (coarse but
    usable, the regime the training pipeline is meant to survive).
    """
    if spec.num_images < 1:
        raise ValueError(f"num_images must be >= 1, got {spec.num_images}")
    if not spec.classes:
        raise ValueError("classes must be non-empty")
    if not 1 <= spec.shapes_min <= spec.shapes_max:
        raise ValueError(f"bad shapes range [{spec.shapes_min}, {spec.shapes_max}]")
    out = Path(out_dir)
    labels: dict[str, list[int]] = {}
    inter = union = 0
    for i in range(spec.num_images):
        image, mask, sal = _render_image(spec, i)
        image_id = f"img_{i:04d}"
        _save_png(out / "images" / f"{image_id}.png", np.round(image * 255).astype(np.uint8), "RGB")
        _save_png(out / "gt_masks" / f"{image_id}.png", mask, "L")
        sal8 = np.round(sal * 255).astype(np.uint8)
        _save_png(out / "saliency" / f"{image_id}.png", sal8, "L")
        labels[image_id] = sorted(int(v) - 1 for v in np.unique(mask) if v > 0)
        sal_bin = sal8 >= 128
        fg = mask > 0
        inter += int((sal_bin & fg).sum())
        union += int((sal_bin | fg).sum())
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "labels" / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n")
    (out / "spec.json").write_text(json.dumps(spec.__dict__, indent=1, sort_keys=True, default=list) + "\n")

    defaults = SynthSpec()
    default_corruption = (
        spec.sal_dilate == defaults.sal_dilate
        and spec.sal_blur == defaults.sal_blur
        and spec.sal_dropout == defaults.sal_dropout
    )
    if default_corruption and union:
        iou = inter / union
        if not 0.5 <= iou <= 0.95:
            raise RuntimeError(f"offline saliency IoU {iou:.3f} outside the sanity band [0.5, 0.95]")
    return out


def _load_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    try:
        return np.asarray(Image.open(path))
    except Exception as e:
        raise ValueError(f"corrupt dataset file {path}: {e}") from e


def load_dataset(path: str | Path, split: str, num_classes: int | None = None) -> list[Sample]:
    """Load samples in sorted-id order; gt_mask populated only for split='eval'.

    num_classes defaults to (max labeled class id + 1) over the set. On the
    eval split the labels.json class list is validated against each mask.
    """
    global GT_MASK_READS
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    root = Path(path)
    labels_path = root / "labels" / "labels.json"
    if not labels_path.exists():
        raise FileNotFoundError(f"dataset file missing: {labels_path}")
    labels = json.loads(labels_path.read_text())
    if num_classes is None:
        num_classes = max((max(v) + 1 for v in labels.values() if v), default=1)

    samples = []
    for image_id in sorted(labels):
        class_ids = labels[image_id]
        if any(not 0 <= c < num_classes for c in class_ids):
            raise ValueError(f"{image_id}: class ids {class_ids} outside [0, {num_classes})")
        image = _load_png(root / "images" / f"{image_id}.png").astype(np.float32) / 255.0
        sal = _load_png(root / "saliency" / f"{image_id}.png").astype(np.float32) / 255.0
        vec = np.zeros(num_classes, dtype=np.uint8)
        vec[class_ids] = 1
        gt = None
        if split == "eval":
            GT_MASK_READS += 1
            gt = _load_png(root / "gt_masks" / f"{image_id}.png").astype(np.uint8)
            in_mask = sorted(int(v) - 1 for v in np.unique(gt) if 0 < v != IGNORE_LABEL)
            if in_mask != sorted(class_ids):
                raise ValueError(
                    f"{image_id}: labels.json lists classes {sorted(class_ids)} "
                    f"but the mask contains {in_mask}"
                )
        samples.append(Sample(image_id, image, vec, sal, gt))
    return samples


def augment_sample(
    image: np.ndarray,
    sal_map: np.ndarray | None,
    seg_mask: np.ndarray | None,
    crop: int,
    aug: AugConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Joint flip / zero-pad / crop / color jitter; IGNORE fills padded mask area."""
    if aug.hflip and rng.random() < 0.5:
        image = image[:, ::-1]
        sal_map = sal_map[:, ::-1] if sal_map is not None else None
        seg_mask = seg_mask[:, ::-1] if seg_mask is not None else None
    h, w = image.shape[:2]
    pad_h, pad_w = max(0, crop - h), max(0, crop - w)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
        if sal_map is not None:
            sal_map = np.pad(sal_map, ((0, pad_h), (0, pad_w)))
        if seg_mask is not None:
            seg_mask = np.pad(seg_mask, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_LABEL)
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    image = image[top : top + crop, left : left + crop]
    sal_map = sal_map[top : top + crop, left : left + crop] if sal_map is not None else None
    seg_mask = seg_mask[top : top + crop, left : left + crop] if seg_mask is not None else None
    if aug.color_jitter > 0:
        scale = 1.0 + rng.uniform(-aug.color_jitter, aug.color_jitter)
        shift = rng.uniform(-aug.color_jitter, aug.color_jitter)
        image = np.clip(image * scale + shift, 0.0, 1.0)
    out_sal = np.ascontiguousarray(sal_map) if sal_map is not None else None
    out_seg = np.ascontiguousarray(seg_mask) if seg_mask is not None else None
    return np.ascontiguousarray(image, dtype=np.float32), out_sal, out_seg
