import numpy as np
import pytest
import torch

from auxseg.config import ConfigError, ModelConfig
from auxseg.model import Model, build_model, expected_param_count, init_parameters


def small_config(**over):
    base = dict(num_classes=3, stride=4, backbone_width=8, backbone_blocks=2,
                head_channels=4, sa_hidden=4, seed=0)
    base.update(over)
    return ModelConfig(**base)


def test_build_twice_bitwise_identical():
    a, b = build_model(small_config()), build_model(small_config())
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2
        assert torch.equal(p1, p2)


def test_different_seeds_differ():
    a = build_model(small_config(seed=0))
    b = build_model(small_config(seed=1))
    assert not torch.equal(a.classifier.weight, b.classifier.weight)


def test_backbone_stride_arithmetic():
    model = build_model(ModelConfig())
    feats = model.forward_backbone(torch.rand(1, 3, 64, 64))
    assert feats.shape == (1, 32, 8, 8)
    feats = model.forward_backbone(torch.rand(2, 3, 32, 48))
    assert feats.shape == (2, 32, 4, 6)


def test_non_divisible_input_rejected():
    model = build_model(small_config())
    with pytest.raises(ValueError, match="divisible"):
        model.forward_backbone(torch.rand(1, 3, 30, 32))


def test_invalid_configs_raise():
    with pytest.raises(ConfigError):
        build_model(small_config(head_channels=0))
    with pytest.raises(ConfigError):
        build_model(small_config(stride=6))
    with pytest.raises(ConfigError):
        build_model(small_config(num_classes=0))
    with pytest.raises(ConfigError):
        build_model(small_config(stride=8, backbone_blocks=2))


def test_zero_image_zero_bias_gives_zero_features():
    model = build_model(small_config())
    feats = model.forward_backbone(torch.zeros(1, 3, 16, 16))
    assert torch.all(feats == 0)


def test_classify_pools_constant_features():
    model = build_model(small_config())
    v = 1.7
    feats = torch.full((1, 8, 4, 4), v)
    _, pooled = model.classify(feats)
    assert torch.allclose(pooled, torch.full((1, 8), v))


def test_classify_hand_matrix_product():
    model = build_model(small_config(backbone_width=2, num_classes=2, backbone_blocks=2))
    with torch.no_grad():
        model.classifier.weight.copy_(torch.eye(2))
        model.classifier.bias.zero_()
    feats = torch.stack(
        [torch.full((4, 4), 1.0), torch.full((4, 4), 2.0)]
    ).unsqueeze(0)
    logits, _ = model.classify(feats)
    assert torch.allclose(logits, torch.tensor([[1.0, 2.0]]), atol=1e-6)


def test_zero_features_give_bias_logits():
    model = build_model(small_config())
    with torch.no_grad():
        model.classifier.bias.copy_(torch.tensor([0.3, -0.2, 1.1]))
    logits, _ = model.classify(torch.zeros(1, 8, 4, 4))
    assert torch.allclose(logits, torch.tensor([[0.3, -0.2, 1.1]]))


def test_gap_linearity():
    model = build_model(small_config())
    f1, f2 = torch.rand(1, 8, 4, 4), torch.rand(1, 8, 4, 4)
    l1, _ = model.classify(f1)
    l2, _ = model.classify(f2)
    l12, _ = model.classify(f1 + f2)
    assert torch.allclose(l12, l1 + l2 - model.classifier.bias, atol=1e-5)


def test_head_dilation_contract():
    model = build_model(small_config())
    for head in (model.sal_head, model.seg_head):
        assert head[0].dilation == (6, 6) and head[0].kernel_size == (3, 3)
        assert head[2].dilation == (12, 12) and head[2].kernel_size == (3, 3)
        assert head[0].padding == (6, 6) and head[2].padding == (12, 12)


def test_dilated_conv_receptive_span_13():
    model = build_model(small_config())
    conv = model.sal_head[0]
    x = torch.zeros(1, 8, 25, 25, requires_grad=True)
    out = conv(x)
    out[0, :, 12, 12].sum().backward()
    rows = torch.nonzero(x.grad.abs().sum(dim=(0, 1, 3))).flatten()
    assert rows.min() == 6 and rows.max() == 18  # 3 taps spaced 6 apart, span 13


def test_heads_emit_head_channels():
    model = build_model(small_config())
    sal, seg = model.decode_task_heads(torch.rand(1, 8, 4, 4))
    assert sal.shape == (1, 4, 4, 4) and seg.shape == (1, 4, 4, 4)


def test_predict_zero_everything():
    model = build_model(small_config())
    with torch.no_grad():
        for mod in (model.sal_pred, model.seg_pred):
            mod.weight.zero_()
            mod.bias.zero_()
    sal, seg = model.predict(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2))
    assert torch.allclose(sal, torch.full((1, 2, 2), 0.5))
    assert torch.allclose(seg, torch.full((1, 4, 2, 2), 0.25))


def test_seg_prob_normalized_and_sal_in_unit_interval():
    model = build_model(small_config())
    out = model(torch.rand(2, 3, 16, 16))
    assert torch.allclose(out.seg_prob.sum(dim=1), torch.ones(2, 4, 4), atol=1e-5)
    assert out.sal_prob.min() >= 0 and out.sal_prob.max() <= 1


def test_forward_with_affinity_populates_fields():
    model = build_model(small_config())
    out = model(torch.rand(1, 3, 16, 16))
    assert out.a_sal.shape == (1, 16, 16)
    assert torch.allclose(out.a_sal.sum(dim=2), torch.ones(1, 16), atol=1e-5)
    assert out.sal_refined is not None and out.seg_refined is not None
    assert torch.allclose(out.fusion_w1 + out.fusion_w2, torch.ones(1, 16, 16), atol=1e-6)


def test_forward_without_affinity_leaves_fields_none():
    model = build_model(small_config(use_affinity=False))
    out = model(torch.rand(1, 3, 16, 16))
    assert out.sal_refined is None and out.a_ct is None


def test_forward_deterministic():
    model = build_model(small_config())
    x = torch.rand(1, 3, 16, 16)
    a, b = model(x), model(x)
    assert torch.equal(a.seg_prob, b.seg_prob)
    assert torch.equal(a.sal_refined, b.sal_refined)


@pytest.mark.parametrize(
    "cfg",
    [ModelConfig(), small_config(), small_config(backbone_width=16, head_channels=8, num_classes=5)],
)
def test_param_count_formula(cfg):
    model = Model(cfg)
    assert sum(p.numel() for p in model.parameters()) == expected_param_count(cfg)


def test_init_parameters_conventions():
    model = build_model(small_config())
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            assert torch.all(p == 0), name
        elif p.dim() == 1:  # group norm scales
            assert torch.all(p == 1), name
    assert model.classifier.weight.abs().max() < 0.1  # 0.01-scaled normals


def test_reinit_restores_fresh_state():
    model = build_model(small_config())
    before = model.classifier.weight.clone()
    with torch.no_grad():
        model.classifier.weight.add_(1.0)
    init_parameters(model, 0)
    assert torch.equal(model.classifier.weight, before)
