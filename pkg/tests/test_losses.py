import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from auxseg import IGNORE_LABEL
from auxseg.config import LossConfig
from auxseg.losses import (
    PolySchedule,
    SgdOptimizer,
    multilabel_soft_margin,
    poly_lr,
    saliency_bce,
    seg_cross_entropy,
    total_loss,
)


def test_soft_margin_zero_logit_is_ln2():
    loss = multilabel_soft_margin(torch.zeros(3, dtype=torch.float64), torch.ones(3))
    assert abs(float(loss) - math.log(2)) < 1e-9


def test_soft_margin_saturated_correct_is_zero():
    loss = multilabel_soft_margin(torch.full((4,), 30.0), torch.ones(4))
    assert float(loss) < 1e-12


def test_soft_margin_sigmoid_symmetry():
    x = torch.tensor([1.3, -0.7, 2.0])
    pos = multilabel_soft_margin(x, torch.ones(3))
    neg = multilabel_soft_margin(-x, torch.zeros(3))
    assert torch.allclose(pos, neg, atol=1e-7)


def test_soft_margin_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        multilabel_soft_margin(torch.tensor([float("nan")]), torch.ones(1))


def test_bce_perfect_prediction_at_eps_floor():
    pred = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    target = pred.clone()
    assert float(saliency_bce(pred, target)) < 1.5e-7


def test_bce_uniform_half_is_ln2():
    pred = torch.full((5, 5), 0.5, dtype=torch.float64)
    loss = saliency_bce(pred, torch.randint(0, 2, (5, 5)).double())
    assert abs(float(loss) - math.log(2)) < 1e-9


def test_bce_label_flip_symmetry():
    p = torch.rand(4, 4) * 0.8 + 0.1
    t = torch.randint(0, 2, (4, 4)).float()
    assert torch.allclose(saliency_bce(p, t), saliency_bce(1 - p, 1 - t), atol=1e-7)


def test_seg_ce_perfect_prediction_is_zero():
    probs = torch.zeros(1, 3, 2, 2)
    probs[0, 1] = 1.0
    labels = torch.ones(1, 2, 2, dtype=torch.long)
    assert float(seg_cross_entropy(probs, labels)) < 1e-6


def test_seg_ce_uniform_three_labels_is_ln3():
    probs = torch.full((1, 3, 4, 4), 1 / 3, dtype=torch.float64)
    labels = torch.randint(0, 3, (1, 4, 4))
    assert abs(float(seg_cross_entropy(probs, labels)) - math.log(3)) < 1e-9


def test_seg_ce_all_ignore_is_zero_with_zero_grad():
    probs = torch.rand(1, 3, 2, 2).softmax(dim=1).requires_grad_(True)
    labels = torch.full((1, 2, 2), IGNORE_LABEL, dtype=torch.long)
    loss = seg_cross_entropy(probs, labels)
    assert float(loss.detach()) == 0.0
    loss.backward()
    assert torch.all(probs.grad == 0)


def test_seg_ce_ignore_pixels_do_not_contribute():
    torch.manual_seed(0)
    base = torch.rand(1, 3, 2, 2).softmax(dim=1)
    labels = torch.tensor([[[0, IGNORE_LABEL], [2, IGNORE_LABEL]]])
    perturbed = base.clone()
    perturbed[0, :, 0, 1] = torch.tensor([0.1, 0.1, 0.8])
    perturbed[0, :, 1, 1] = torch.tensor([0.8, 0.1, 0.1])
    a = seg_cross_entropy(base, labels)
    b = seg_cross_entropy(perturbed, labels)
    assert torch.allclose(a, b, atol=1e-9)


def test_seg_ce_out_of_range_label_raises():
    probs = torch.full((1, 3, 1, 1), 1 / 3)
    with pytest.raises(ValueError):
        seg_cross_entropy(probs, torch.tensor([[[3]]]))


def test_total_loss_weight_masking():
    torch.manual_seed(1)
    logits = torch.randn(2, 3)
    targets = torch.randint(0, 2, (2, 3)).float()
    sal = torch.rand(2, 4, 4)
    seg = torch.rand(2, 4, 4, 4).softmax(dim=1)
    pgt_sal = torch.randint(0, 2, (2, 4, 4)).float()
    pgt_seg = torch.randint(0, 4, (2, 4, 4))
    report = total_loss(
        logits, targets, sal, seg, None, None, pgt_sal, pgt_seg,
        LossConfig(lambda_cls=1, lambda_sal=0, lambda_seg=0),
    )
    assert torch.allclose(report.total, report.l_cls)
    assert float(report.l_sal2) == 0.0 and float(report.l_seg2) == 0.0


def test_total_loss_weighted_sum_recomputes():
    torch.manual_seed(2)
    logits = torch.randn(1, 3)
    targets = torch.tensor([[1.0, 0.0, 1.0]])
    sal = torch.rand(1, 4, 4)
    seg = torch.rand(1, 4, 4, 4).softmax(dim=1)
    sal_ref = torch.rand(1, 4, 4)
    seg_ref = torch.rand(1, 4, 4, 4).softmax(dim=1)
    pgt_sal = torch.randint(0, 2, (1, 4, 4)).float()
    pgt_seg = torch.randint(0, 4, (1, 4, 4))
    w = LossConfig(lambda_cls=2.0, lambda_sal=3.0, lambda_seg=5.0)
    r = total_loss(logits, targets, sal, seg, sal_ref, seg_ref, pgt_sal, pgt_seg, w)
    recombined = 2.0 * r.l_cls + 3.0 * (r.l_sal1 + r.l_sal2) + 5.0 * (r.l_seg1 + r.l_seg2)
    assert abs(float(r.total) - float(recombined)) < 1e-6
    assert all(v >= 0 for v in r.floats().values())


def test_total_loss_perfect_predictions_near_zero():
    logits = torch.tensor([[30.0, -30.0]])
    targets = torch.tensor([[1.0, 0.0]])
    pgt_sal = torch.tensor([[[1.0, 0.0]]])  # 1 x 1 x 2
    seg = torch.zeros(1, 3, 1, 2)
    seg[0, 1, 0, 0] = 1.0
    seg[0, 0, 0, 1] = 1.0
    pgt_seg = torch.tensor([[[1, 0]]])
    r = total_loss(logits, targets, pgt_sal.clone(), seg, None, None, pgt_sal, pgt_seg, LossConfig())
    assert float(r.total) < 1e-5


def test_poly_lr_closed_form_values():
    sched = PolySchedule(base_lr=0.001, power=0.9, max_iter=1000)
    assert poly_lr(sched, 0) == 0.001
    assert poly_lr(sched, 1000) == 0.0
    assert abs(poly_lr(sched, 500) - 5.3589e-4) < 1e-8


def test_poly_lr_beyond_max_warns_and_clamps():
    sched = PolySchedule(max_iter=10)
    with pytest.warns(UserWarning):
        assert poly_lr(sched, 11) == 0.0


def test_poly_lr_negative_iteration_raises():
    with pytest.raises(ValueError):
        poly_lr(PolySchedule(max_iter=10), -1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999), st.integers(0, 999))
def test_poly_lr_monotone(i, j):
    sched = PolySchedule(base_lr=0.01, power=0.9, max_iter=1000)
    lo, hi = sorted((i, j))
    assert poly_lr(sched, hi) <= poly_lr(sched, lo) + 1e-15


def test_sgd_vanilla_step():
    p = torch.tensor([1.0, 2.0], requires_grad=True)
    opt = SgdOptimizer([("p", p)], momentum=0.0, weight_decay=0.0)
    p.grad = torch.tensor([0.5, -0.5])
    opt.step(0.1)
    assert torch.allclose(p, torch.tensor([0.95, 2.05]))


def test_sgd_zero_grad_is_fixpoint():
    p = torch.tensor([1.0], requires_grad=True)
    opt = SgdOptimizer([("p", p)], momentum=0.9, weight_decay=0.0)
    p.grad = torch.zeros(1)
    opt.step(0.1)
    opt.step(0.1)
    assert torch.allclose(p, torch.tensor([1.0]))


def test_sgd_two_momentum_steps_hand_value():
    g = 1.0
    p = torch.zeros(1, requires_grad=True)
    opt = SgdOptimizer([("p", p)], momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad = torch.full((1,), g)
        opt.step(0.1)
    assert abs(float(p.detach()) - (-0.29 * g)) < 1e-7


def test_sgd_weight_decay_enters_gradient():
    p = torch.tensor([2.0], requires_grad=True)
    opt = SgdOptimizer([("p", p)], momentum=0.0, weight_decay=0.5)
    p.grad = torch.zeros(1)
    opt.step(0.1)
    # effective gradient 0 + 0.5 * 2.0 = 1.0
    assert torch.allclose(p, torch.tensor([1.9]))


def test_sgd_nonfinite_gradient_names_parameter():
    p = torch.tensor([1.0], requires_grad=True)
    opt = SgdOptimizer([("layer.weight", p)], momentum=0.0, weight_decay=0.0)
    p.grad = torch.tensor([float("inf")])
    with pytest.raises(FloatingPointError, match="layer.weight"):
        opt.step(0.1)


def test_sgd_skips_parameters_without_grad():
    p = torch.tensor([1.0], requires_grad=True)
    q = torch.tensor([2.0], requires_grad=True)
    opt = SgdOptimizer([("p", p), ("q", q)], momentum=0.0, weight_decay=0.0)
    p.grad = torch.ones(1)
    opt.step(0.1)
    assert torch.allclose(q, torch.tensor([2.0]))


def test_zero_grad_clears_gradients():
    p = torch.tensor([1.0], requires_grad=True)
    opt = SgdOptimizer([("p", p)])
    p.grad = torch.ones(1)
    opt.zero_grad()
    assert p.grad is None
