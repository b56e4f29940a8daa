"""Shared backbone plus the three task heads (classification, saliency, segmentation).

The backbone is a small configurable convnet (default 4 blocks, stride 8,
width 32). Both dense heads use two dilated 3x3 convolutions (rates 6 and 12)
and predict through 1x1 convolutions: sigmoid for saliency, per-pixel softmax
over C+1 channels (explicit background) for segmentation. With affinity
enabled, head features pass through non-local blocks and predictions are
refined by the fused cross-task affinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .affinity import NonLocalBlock, SelfAttentionFusion, aggregation_normalize, refine_map
from .config import ConfigError, ModelConfig


@dataclass
class ModelOutputs:
    """Everything one forward pass produces; affinity fields are None when disabled."""

    features: Tensor          # B x K x h x w backbone features
    logits: Tensor            # B x C classification logits
    pooled: Tensor            # B x K global average pooled features
    sal_prob: Tensor          # B x h x w in [0, 1]
    seg_prob: Tensor          # B x (C+1) x h x w, per-pixel distributions
    sal_refined: Tensor | None = None
    seg_refined: Tensor | None = None
    a_sal: Tensor | None = None      # B x hw x hw, row-stochastic
    a_seg: Tensor | None = None
    a_ct: Tensor | None = None
    fusion_w1: Tensor | None = None
    fusion_w2: Tensor | None = None


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class Model(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        _validate(config)
        self.config = config
        k, d, c = config.backbone_width, config.head_channels, config.num_classes

        num_strided = int(math.log2(config.stride))
        blocks = []
        in_ch = 3
        for i in range(config.backbone_blocks):
            stride = 2 if i < num_strided else 1
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, k, 3, stride=stride, padding=1),
                    _group_norm(k),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = k
        self.backbone = nn.Sequential(*blocks)
        self.classifier = nn.Linear(k, c)

        def head():
            return nn.Sequential(
                nn.Conv2d(k, d, 3, dilation=6, padding=6),
                nn.ReLU(inplace=True),
                nn.Conv2d(d, d, 3, dilation=12, padding=12),
                nn.ReLU(inplace=True),
            )

        self.sal_head = head()
        self.seg_head = head()
        self.nonlocal_sal = NonLocalBlock(d)
        self.nonlocal_seg = NonLocalBlock(d)
        self.fusion = SelfAttentionFusion(hidden=config.sa_hidden)
        self.sal_pred = nn.Conv2d(d, 1, 1)
        self.seg_pred = nn.Conv2d(d, c + 1, 1)

    def forward_backbone(self, image: Tensor) -> Tensor:
        """Image B x 3 x H x W in [0, 1] to features B x K x H/stride x W/stride."""
        stride = self.config.stride
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W image, got {tuple(image.shape)}")
        if image.shape[2] % stride or image.shape[3] % stride:
            raise ValueError(
                f"image size {image.shape[2]}x{image.shape[3]} not divisible by stride {stride}"
            )
        return self.backbone(image)

    def classify(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Global average pooling over space, then the linear classifier."""
        pooled = features.mean(dim=(2, 3))
        return self.classifier(pooled), pooled

    def decode_task_heads(self, features: Tensor) -> tuple[Tensor, Tensor]:
        return self.sal_head(features), self.seg_head(features)

    def predict(self, sal_feats: Tensor, seg_feats: Tensor) -> tuple[Tensor, Tensor]:
        sal_prob = torch.sigmoid(self.sal_pred(sal_feats)).squeeze(1)
        seg_prob = torch.softmax(self.seg_pred(seg_feats), dim=1)
        return sal_prob, seg_prob

    def forward(self, image: Tensor) -> ModelOutputs:
        features = self.forward_backbone(image)
        logits, pooled = self.classify(features)
        sal_in, seg_in = self.decode_task_heads(features)
        if not self.config.use_affinity:
            sal_prob, seg_prob = self.predict(sal_in, seg_in)
            return ModelOutputs(features, logits, pooled, sal_prob, seg_prob)

        sal_out, a_sal = self.nonlocal_sal(sal_in)
        seg_out, a_seg = self.nonlocal_seg(seg_in)
        a_ct, w1, w2 = self.fusion(a_sal, a_seg)
        sal_prob, seg_prob = self.predict(sal_out, seg_out)
        # Transposed cross-task affinity, renormalized so each refined pixel is
        # a convex combination of prediction values.
        a_hat = aggregation_normalize(a_ct, transpose=True)
        sal_refined = refine_map(sal_prob.unsqueeze(1), a_hat).squeeze(1)
        seg_refined = refine_map(seg_prob, a_hat)
        return ModelOutputs(
            features, logits, pooled, sal_prob, seg_prob,
            sal_refined=sal_refined, seg_refined=seg_refined,
            a_sal=a_sal, a_seg=a_seg, a_ct=a_ct, fusion_w1=w1, fusion_w2=w2,
        )


def _validate(config: ModelConfig) -> None:
    errors = []
    if config.stride < 1 or (config.stride & (config.stride - 1)) != 0:
        errors.append(f"stride must be a power of two, got {config.stride}")
    if config.head_channels <= 0:
        errors.append(f"head_channels must be positive, got {config.head_channels}")
    if config.backbone_width <= 0:
        errors.append(f"backbone_width must be positive, got {config.backbone_width}")
    if config.num_classes < 1:
        errors.append(f"num_classes must be >= 1, got {config.num_classes}")
    if not errors and config.stride > 1:
        if config.backbone_blocks < int(math.log2(config.stride)):
            errors.append(
                f"backbone_blocks={config.backbone_blocks} too few for stride {config.stride}"
            )
    elif config.backbone_blocks < 1:
        errors.append("backbone_blocks must be >= 1")
    if errors:
        raise ConfigError(errors)


def build_model(config: ModelConfig) -> Model:
    """Construct a model with deterministic parameter init for the config seed.

    He fan-in normals for conv weights, zeros for all biases, classifier
    weights scaled to 0.01 * N(0, 1), GroupNorm at identity.
    """
    model = Model(config)
    init_parameters(model, config.seed)
    return model


def init_parameters(model: Model, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for name, param in model.named_parameters():
        with torch.no_grad():
            if name.startswith("classifier.weight"):
                param.copy_(0.01 * torch.randn(param.shape, generator=gen))
            elif name.endswith("bias"):
                param.zero_()
            elif param.dim() >= 2:  # conv / linear weights: He fan-in
                fan_in = param[0].numel()
                param.copy_(torch.randn(param.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            else:  # GroupNorm scale
                param.fill_(1.0)


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config; forward shapes follow the same arithmetic."""
    k, d, c, h = config.backbone_width, config.head_channels, config.num_classes, config.sa_hidden
    count = 0
    in_ch = 3
    for _ in range(config.backbone_blocks):
        count += in_ch * k * 9 + k      # conv
        count += 2 * k                  # group norm affine
        in_ch = k
    count += k * c + c                  # classifier
    count += 2 * (k * d * 9 + d + d * d * 9 + d)    # two dilated-conv heads
    count += 2 * 3 * d * d              # q/k/v projections, no bias, two blocks
    count += 2 * h + h + h * 2 + 2      # fusion convs 2 -> h -> 2 with biases
    count += d * 1 + 1                  # saliency 1x1
    count += d * (c + 1) + (c + 1)      # segmentation 1x1
    return count
