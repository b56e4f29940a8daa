"""Cross-task affinity learning: non-local blocks, self-attention fusion, refinement.

Affinities are dense (H*W) x (H*W) matrices. Non-local blocks row-softmax raw
Q.K dot products (no temperature scaling) and add the attended values back to
the input features. The fusion module stacks the two task affinities as a
2-channel image, runs two 1x1 convolutions and a channelwise softmax, and mixes
the inputs with the resulting weight maps. Before refining any prediction the
affinity is transposed and re-normalized so each output pixel aggregates a
convex combination of input values.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn


class NonLocalBlock(nn.Module):
    """Self-attention over all spatial positions with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.q_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.k_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.v_proj = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: B x D x H x W. Returns (augmented B x D x H x W, affinity B x HW x HW)."""
        b, d, h, w = x.shape
        q = self.q_proj(x).flatten(2).transpose(1, 2)   # B x HW x D
        k = self.k_proj(x).flatten(2)                   # B x D x HW
        v = self.v_proj(x).flatten(2).transpose(1, 2)   # B x HW x D
        scores = torch.bmm(q, k)
        if not torch.isfinite(scores).all():
            raise FloatingPointError("non-finite values in non-local projections")
        affinity = torch.softmax(scores, dim=2)
        attended = torch.bmm(affinity, v)               # B x HW x D
        augmented = x + attended.transpose(1, 2).reshape(b, d, h, w)
        return augmented, affinity


class SelfAttentionFusion(nn.Module):
    """Fuses two row-stochastic affinities into one via learned per-entry weights.

    The weight maps are a channelwise softmax, so they are in [0, 1] and sum
    to 1 at every entry; the fused affinity is an entrywise convex combination.
    """

    def __init__(self, hidden: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(2, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, 2, 1)

    def forward(self, a_sal: Tensor, a_seg: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Inputs B x N x N. Returns (a_ct, w1, w2), each B x N x N."""
        if a_sal.shape != a_seg.shape:
            raise ValueError(f"affinity shapes differ: {tuple(a_sal.shape)} vs {tuple(a_seg.shape)}")
        stacked = torch.stack([a_sal, a_seg], dim=1)    # B x 2 x N x N
        weights = torch.softmax(self.conv2(self.conv1(stacked)), dim=1)
        w1, w2 = weights[:, 0], weights[:, 1]
        return w1 * a_sal + w2 * a_seg, w1, w2


def aggregation_normalize(a: Tensor, transpose: bool = False, eps: float = 1e-12) -> Tensor:
    """Optionally transpose, then scale rows to sum to 1 (eps-guarded).

    The result aggregates: row i holds the weights with which output pixel i
    averages input pixels.
    """
    if transpose:
        a = a.transpose(-1, -2)
    return a / a.sum(dim=-1, keepdim=True).clamp_min(eps)


def refine_map(pred: Tensor, a: Tensor) -> Tensor:
    """Propagate a dense prediction through an aggregation-normalized affinity.

    pred: B x C x H x W (use C=1 for a single map); a: B x HW x HW.
    Each channel is flattened, multiplied by `a`, and reshaped; outputs stay
    within the per-channel [min, max] of the input.
    """
    b, c, h, w = pred.shape
    n = h * w
    if a.shape[-2:] != (n, n):
        raise ValueError(f"affinity is {tuple(a.shape[-2:])}, expected ({n}, {n})")
    flat = pred.reshape(b, c, n)
    refined = torch.bmm(flat, a.transpose(1, 2))
    return refined.reshape(b, c, h, w)


def nonlocal_oracle(
    features: np.ndarray, q_w: np.ndarray, k_w: np.ndarray, v_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Explicit O((HW)^2 * D) double-loop reference for the non-local block.

    features: H x W x D; q_w/k_w/v_w: D x D matrices applied as out = W @ f.
    Returns (augmented H x W x D, affinity HW x HW). Kept loop-based on purpose;
    only use on small inputs.
    """
    h, w, d = features.shape
    n = h * w
    flat = features.reshape(n, d).astype(np.float64)

    def project(mat):
        out = np.zeros((n, d))
        for i in range(n):
            for o in range(d):
                acc = 0.0
                for c in range(d):
                    acc += mat[o, c] * flat[i, c]
                out[i, o] = acc
        return out

    q, k, v = project(q_w), project(k_w), project(v_w)
    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for c in range(d):
                acc += q[i, c] * k[j, c]
            scores[i, j] = acc
    affinity = np.zeros((n, n))
    for i in range(n):
        m = max(scores[i, j] for j in range(n))
        total = 0.0
        for j in range(n):
            affinity[i, j] = np.exp(scores[i, j] - m)
            total += affinity[i, j]
        for j in range(n):
            affinity[i, j] /= total
    augmented = flat.copy()
    for i in range(n):
        for c in range(d):
            acc = 0.0
            for j in range(n):
                acc += affinity[i, j] * v[j, c]
            augmented[i, c] += acc
    return augmented.reshape(h, w, d), affinity
