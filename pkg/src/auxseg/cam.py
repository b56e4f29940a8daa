"""Class activation maps: extraction, [0, 1] normalization, affinity propagation."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_array_archive, save_array_archive

NORM_EPS = 1e-5  # guards division for all-zero class maps


def compute_cam(
    features: np.ndarray, weights: np.ndarray, present_classes: set[int] | list[int]
) -> np.ndarray:
    """Unnormalized CAMs: per class, the classifier-weighted sum over feature channels.

    features: H x W x K; weights: K x C classifier matrix. Only present classes
    are computed, the rest stay all-zero. Returns C x H x W.
    """
    h, w, k = features.shape
    kw, c = weights.shape
    if kw != k:
        raise ValueError(f"features have {k} channels but classifier expects {kw}")
    stack = np.zeros((c, h, w), dtype=np.float64)
    for cls in sorted(set(present_classes)):
        if not 0 <= cls < c:
            raise ValueError(f"class id {cls} outside [0, {c})")
        stack[cls] = features @ weights[:, cls]
    return stack


def normalize_cam(stack: np.ndarray) -> np.ndarray:
    """Clamp negatives to 0, then divide each class map by its spatial maximum.

    The per-class max is floored at NORM_EPS, so all-zero maps stay all-zero.
    """
    clamped = np.maximum(stack, 0.0)
    peak = clamped.max(axis=(1, 2), keepdims=True)
    return clamped / np.maximum(peak, NORM_EPS)


def refine_cam(stack: np.ndarray, affinity: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Propagate each class map through an aggregation-normalized affinity.

    stack: normalized C x H x W; affinity: (H*W) x (H*W) with rows summing to 1.
    Applies the affinity `iterations` times per class, then re-normalizes.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    c, h, w = stack.shape
    n = h * w
    if affinity.shape != (n, n):
        raise ValueError(f"affinity is {affinity.shape}, expected ({n}, {n})")
    flat = stack.reshape(c, n)
    for _ in range(iterations):
        flat = flat @ affinity.T
    return normalize_cam(flat.reshape(c, h, w))


def save_cam(directory: str | Path, image_id: str, maps: np.ndarray, present_classes) -> None:
    """Persist a CAM stack as an array archive plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_array_archive(directory / f"{image_id}.arrz", {"cam": maps})
    sidecar = {"image_id": image_id, "present_classes": sorted(int(c) for c in present_classes)}
    (directory / f"{image_id}.json").write_text(json.dumps(sidecar, indent=1))


def load_cam(directory: str | Path, image_id: str) -> tuple[np.ndarray, list[int]]:
    directory = Path(directory)
    maps = load_array_archive(directory / f"{image_id}.arrz")["cam"]
    sidecar = json.loads((directory / f"{image_id}.json").read_text())
    return maps, sidecar["present_classes"]
