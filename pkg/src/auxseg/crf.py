"""Densely connected CRF refined by mean-field iteration.

Pairwise potentials combine a Gaussian spatial kernel and a bilateral
(position + color) kernel under a Potts compatibility. Each kernel is
row-normalized with the self-connection excluded, so messages are convex
averages over the other pixels and the pairwise energy scale is set purely by
the kernel weights and `potts_compat`.

The spatial kernel factorizes over image axes (Kronecker product of 1-D
Gaussians), so its messages cost O(N * (H + W)). The bilateral kernel is a
dense N x N matrix; fine at desk scale, quadratic in pixels by design.
"""

from __future__ import annotations

import warnings

import numpy as np

from .config import CrfConfig

UNARY_EPS = 1e-8


def _axis_kernel(n: int, sigma: float) -> np.ndarray:
    coords = np.arange(n, dtype=np.float64)
    d2 = (coords[:, None] - coords[None, :]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _spatial_messages(q: np.ndarray, ay: np.ndarray, ax: np.ndarray, row_sums: np.ndarray) -> np.ndarray:
    """Row-normalized spatial-kernel messages for all labels; q is H x W x L."""
    h, w, num_labels = q.shape
    out = np.empty_like(q)
    for l in range(num_labels):
        full = ay @ q[:, :, l] @ ax.T
        out[:, :, l] = full - q[:, :, l]  # exclude self (kernel diagonal is 1)
    return out / row_sums[:, :, None]


def dense_crf(unary_probs: np.ndarray, image: np.ndarray, params: CrfConfig) -> np.ndarray:
    """Mean-field refinement of per-pixel label distributions.

    unary_probs: H x W x L distributions; image: H x W x 3 in [0, 1].
    Returns H x W x L distributions after `params.iterations` updates.
    """
    if unary_probs.ndim != 3 or unary_probs.shape[1] == 0:
        raise ValueError(f"unary_probs must be H x W x L, got shape {unary_probs.shape}")
    h, w, num_labels = unary_probs.shape
    if num_labels < 2:
        raise ValueError(f"need at least 2 labels, got {num_labels}")
    if image.shape[:2] != (h, w) or image.shape[2] != 3:
        raise ValueError(f"image shape {image.shape} does not match unaries {unary_probs.shape}")

    u = np.clip(np.asarray(unary_probs, dtype=np.float64), UNARY_EPS, None)
    sums = u.sum(axis=2, keepdims=True)
    if np.abs(sums - 1.0).max() > 1e-5:
        warnings.warn("unary_probs not normalized per pixel; renormalizing", stacklevel=2)
    u /= sums
    log_u = np.log(u)

    # Spatial kernel, separable across axes. Row sums exclude the diagonal.
    ay = _axis_kernel(h, params.spatial_sigma)
    ax = _axis_kernel(w, params.spatial_sigma)
    spatial_sums = np.maximum(np.outer(ay.sum(1), ax.sum(1)) - 1.0, UNARY_EPS)

    # Bilateral kernel, dense over pixel pairs with fused position/color features.
    n = h * w
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    feats = np.concatenate(
        [
            (np.stack([yy, xx], axis=-1).reshape(n, 2) / params.bilateral_sigma_xy),
            image.reshape(n, 3) / params.bilateral_sigma_rgb,
        ],
        axis=1,
    ).astype(np.float32)
    sq = (feats * feats).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (feats @ feats.T), 0.0)
    kb = np.exp(-0.5 * d2)
    np.fill_diagonal(kb, 0.0)
    kb_sums = np.maximum(kb.sum(1), UNARY_EPS).astype(np.float32)

    ws, wb, compat = params.spatial_weight, params.bilateral_weight, params.potts_compat
    q = u.copy()
    for _ in range(params.iterations):
        ms = _spatial_messages(q, ay, ax, spatial_sums)
        mb = (kb @ q.reshape(n, num_labels).astype(np.float32)) / kb_sums[:, None]
        logits = log_u + compat * (ws * ms + wb * mb.astype(np.float64).reshape(h, w, num_labels))
        logits -= logits.max(axis=2, keepdims=True)
        q = np.exp(logits)
        q /= q.sum(axis=2, keepdims=True)
    return q
