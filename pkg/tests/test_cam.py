import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxseg.cam import NORM_EPS, compute_cam, load_cam, normalize_cam, refine_cam, save_cam


def test_zero_features_give_zero_cam():
    cam = compute_cam(np.zeros((2, 2, 4)), np.zeros((4, 3)), [0, 1, 2])
    assert cam.shape == (3, 2, 2)
    assert np.all(cam == 0)


def test_hand_dot_product():
    features = np.zeros((1, 1, 2))
    features[0, 0] = [1.0, 2.0]
    weights = np.zeros((2, 1))
    weights[:, 0] = [3.0, 4.0]
    cam = compute_cam(features, weights, [0])
    assert cam[0, 0, 0] == pytest.approx(11.0)


def test_unit_weights_give_channel_sum():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(3, 4, 5))
    weights = np.ones((5, 2))
    cam = compute_cam(features, weights, [1])
    assert np.allclose(cam[1], features.sum(axis=2))


def test_absent_classes_stay_zero():
    rng = np.random.default_rng(1)
    features = rng.uniform(size=(2, 2, 3))
    weights = rng.normal(size=(3, 4))
    cam = compute_cam(features, weights, [2])
    assert np.all(cam[0] == 0) and np.all(cam[1] == 0) and np.all(cam[3] == 0)
    assert not np.all(cam[2] == 0)


def test_out_of_range_class_raises():
    with pytest.raises(ValueError):
        compute_cam(np.zeros((2, 2, 3)), np.zeros((3, 2)), [2])


def test_linearity_in_features():
    rng = np.random.default_rng(2)
    f1, f2 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 2))
    both = compute_cam(f1 + f2, w, [0, 1])
    assert np.allclose(both, compute_cam(f1, w, [0, 1]) + compute_cam(f2, w, [0, 1]))


def test_normalize_max_pixel_becomes_one():
    stack = np.zeros((1, 2, 2))
    stack[0, 1, 1] = 4.0
    out = normalize_cam(stack)
    assert out[0, 1, 1] == 1.0
    assert out.min() >= 0 and out.max() <= 1


def test_normalize_all_zero_stays_zero():
    assert np.all(normalize_cam(np.zeros((2, 3, 3))) == 0)


def test_normalize_hand_values():
    stack = np.array([2.0, 1.0, 0.0]).reshape(1, 1, 3)
    assert np.allclose(normalize_cam(stack), [[[1.0, 0.5, 0.0]]])


def test_normalize_clamps_negatives_first():
    stack = np.array([-5.0, 2.0]).reshape(1, 1, 2)
    assert np.allclose(normalize_cam(stack), [[[0.0, 1.0]]])


def test_normalize_idempotent():
    rng = np.random.default_rng(3)
    stack = normalize_cam(rng.uniform(0.1, 2.0, size=(2, 3, 3)))
    assert np.allclose(normalize_cam(stack), stack, atol=1e-12)


def test_refine_identity_affinity():
    rng = np.random.default_rng(4)
    stack = normalize_cam(rng.uniform(size=(2, 2, 2)))
    out = refine_cam(stack, np.eye(4), iterations=3)
    assert np.allclose(out, stack)


def test_refine_uniform_affinity_renormalizes_to_ones():
    rng = np.random.default_rng(5)
    stack = normalize_cam(rng.uniform(0.2, 1.0, size=(1, 2, 2)))
    out = refine_cam(stack, np.full((4, 4), 0.25), iterations=1)
    assert np.allclose(out, 1.0)


def test_refine_hand_value_after_renormalization():
    stack = np.array([0.8, 0.2]).reshape(1, 1, 2)
    affinity = np.array([[0.75, 0.25], [0.5, 0.5]])
    out = refine_cam(stack, affinity, iterations=1)
    # pre-normalization propagation gives (0.65, 0.5); dividing by the max:
    assert np.allclose(out.flatten(), [1.0, 0.5 / 0.65])


def test_refine_shape_mismatch_raises():
    with pytest.raises(ValueError):
        refine_cam(np.zeros((1, 2, 2)), np.eye(3), 1)


def test_refine_requires_positive_iterations():
    with pytest.raises(ValueError):
        refine_cam(np.zeros((1, 2, 2)), np.eye(4), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_refine_output_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    stack = normalize_cam(rng.uniform(size=(2, 3, 3)))
    raw = rng.uniform(size=(9, 9)) + 0.01
    affinity = raw / raw.sum(axis=1, keepdims=True)
    out = refine_cam(stack, affinity, iterations=2)
    assert out.min() >= 0 and out.max() <= 1 + 1e-12


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    maps = rng.uniform(size=(3, 4, 4)).astype(np.float32)
    save_cam(tmp_path, "img_007", maps, present_classes={2, 0})
    loaded, present = load_cam(tmp_path, "img_007")
    assert np.array_equal(loaded, maps)
    assert present == [0, 2]  # sidecar sorts the class ids


def test_load_missing_cam_names_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cam(tmp_path, "nope")
