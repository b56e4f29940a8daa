"""Composite multi-task objective and the SGD / polynomial-decay optimization pieces."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from . import IGNORE_LABEL

PROB_EPS = 1e-7  # clamp inside log terms


@dataclass
class LossReport:
    """Per-component losses as 0-dim tensors; `total` is the Eq-style weighted sum."""

    l_cls: Tensor
    l_sal1: Tensor
    l_sal2: Tensor
    l_seg1: Tensor
    l_seg2: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            k: float(getattr(self, k).detach())
            for k in ("l_cls", "l_sal1", "l_sal2", "l_seg1", "l_seg2", "total")
        }


@dataclass
class PolySchedule:
    base_lr: float = 0.001
    power: float = 0.9
    max_iter: int = 1


def multilabel_soft_margin(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over classes of -[y log sigmoid(x) + (1-y) log sigmoid(-x)].

    Numerically stabilized through logsigmoid; targets are binary.
    """
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite classification logits")
    t = targets.to(logits.dtype)
    return -(t * F.logsigmoid(logits) + (1 - t) * F.logsigmoid(-logits)).mean()


def saliency_bce(pred: Tensor, target: Tensor) -> Tensor:
    """Pixel-mean binary cross entropy on probabilities, clamped away from {0, 1}."""
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    t = target.to(pred.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def seg_cross_entropy(probs: Tensor, labels: Tensor) -> Tensor:
    """Mean -log p[label] over pixels whose label is not IGNORE.

    probs: B x L x H x W per-pixel distributions; labels: B x H x W integer map.
    Returns a zero (with zero gradient) when every pixel is ignored.
    """
    num_labels = probs.shape[1]
    bad = (labels >= num_labels) & (labels != IGNORE_LABEL)
    if bad.any() or (labels < 0).any():
        raise ValueError(f"label outside [0, {num_labels}) and not IGNORE={IGNORE_LABEL}")
    mask = labels != IGNORE_LABEL
    if not mask.any():
        return probs.sum() * 0.0
    safe = labels.masked_fill(~mask, 0).unsqueeze(1)
    picked = probs.gather(1, safe).squeeze(1)
    nll = -torch.log(picked.clamp_min(PROB_EPS))
    return nll[mask].mean()


def total_loss(
    logits: Tensor,
    cls_targets: Tensor,
    sal_prob: Tensor,
    seg_prob: Tensor,
    sal_refined: Tensor | None,
    seg_refined: Tensor | None,
    pgt_sal: Tensor,
    pgt_seg: Tensor,
    weights,
) -> LossReport:
    """Weighted sum of the three task losses.

    sal1/seg1 supervise the raw predictions, sal2/seg2 the affinity-refined ones
    (pass None when affinity is disabled; those components are zero). `weights`
    carries lambda_cls / lambda_sal / lambda_seg.
    """
    zero = logits.sum() * 0.0
    l_cls = multilabel_soft_margin(logits, cls_targets)
    l_sal1 = saliency_bce(sal_prob, pgt_sal)
    l_sal2 = saliency_bce(sal_refined, pgt_sal) if sal_refined is not None else zero
    l_seg1 = seg_cross_entropy(seg_prob, pgt_seg)
    l_seg2 = seg_cross_entropy(seg_refined, pgt_seg) if seg_refined is not None else zero
    total = (
        weights.lambda_cls * l_cls
        + weights.lambda_sal * (l_sal1 + l_sal2)
        + weights.lambda_seg * (l_seg1 + l_seg2)
    )
    return LossReport(l_cls, l_sal1, l_sal2, l_seg1, l_seg2, total)


def poly_lr(schedule: PolySchedule, iteration: int) -> float:
    """base_lr * (1 - iter / max_iter) ** power, clamped to 0 past max_iter."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration > schedule.max_iter:
        warnings.warn(
            f"iteration {iteration} beyond max_iter {schedule.max_iter}; learning rate clamped to 0",
            stacklevel=2,
        )
        return 0.0
    return schedule.base_lr * (1.0 - iteration / schedule.max_iter) ** schedule.power


class SgdOptimizer:
    """Classic momentum SGD over named parameters.

    Weight decay is added to the gradient before the momentum update. Parameters
    without a gradient are left untouched; non-finite gradients raise with the
    offending parameter's name.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, Tensor] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                buf = self.buffers.get(name)
                if buf is None:
                    buf = g.clone()
                    self.buffers[name] = buf
                else:
                    buf.mul_(self.momentum).add_(g)
                g = buf
            p.add_(g, alpha=-lr)
