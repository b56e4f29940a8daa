import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from auxseg.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
    save_run_config,
    validate_run_config,
)


def test_empty_dict_materializes_all_defaults():
    cfg = run_config_from_dict({})
    assert cfg.stages == 4
    assert cfg.warmup_epochs == 15
    assert cfg.stage_epochs == 10
    assert cfg.batch_size == 4
    assert cfg.crop == 64
    assert cfg.model.num_classes == 3
    assert cfg.model.stride == 8
    assert cfg.model.use_affinity
    assert cfg.optim.base_lr == 0.001
    assert cfg.optim.power == 0.9
    assert cfg.thresholds.fg == 0.3
    assert cfg.thresholds.bg == 0.06
    assert cfg.crf.iterations == 10
    assert cfg.loss.lambda_cls == cfg.loss.lambda_sal == cfg.loss.lambda_seg == 1.0


def test_nested_overrides_apply():
    cfg = run_config_from_dict({"model": {"stride": 4}, "optim": {"base_lr": 0.01}})
    assert cfg.model.stride == 4
    assert cfg.optim.base_lr == 0.01
    assert cfg.model.num_classes == 3  # untouched sibling keeps default


def test_unknown_fields_all_reported():
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"nope": 1, "model": {"bogus": 2}})
    msg = str(exc.value)
    assert "nope" in msg and "bogus" in msg


def test_crop_321_not_divisible_by_stride_8():
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"crop": 321})
    assert "321" in str(exc.value) and "8" in str(exc.value)


def test_negative_loss_weight_rejected():
    with pytest.raises(ConfigError, match="lambda_sal"):
        run_config_from_dict({"loss": {"lambda_sal": -1}})


def test_all_zero_loss_weights_rejected():
    with pytest.raises(ConfigError):
        run_config_from_dict({"loss": {"lambda_cls": 0, "lambda_sal": 0, "lambda_seg": 0}})


@pytest.mark.parametrize(
    "bad",
    [
        {"thresholds": {"fg": 1.5}},
        {"optim": {"momentum": 1.0}},
        {"crf": {"spatial_sigma": 0}},
        {"aug": {"color_jitter": 0.9}},
    ],
)
def test_domain_violations_rejected(bad):
    with pytest.raises(ConfigError):
        run_config_from_dict(bad)


def test_valid_default_config_has_no_errors():
    assert validate_run_config(run_config_from_dict({})) == []


def test_save_load_round_trip(tmp_path):
    cfg = run_config_from_dict({"stages": 2, "model": {"backbone_width": 16}})
    path = tmp_path / "cfg.json"
    save_run_config(cfg, path)
    again = load_run_config(path)
    assert again == cfg
    # every default is materialized in the file, not just the overridden keys
    raw = json.loads(path.read_text())
    assert raw["warmup_epochs"] == 15
    assert raw["model"]["stride"] == 8


def test_apply_overrides_dotted_keys():
    data = apply_overrides({}, ["stages=2", "optim.base_lr=0.01", "model.use_affinity=false"])
    cfg = run_config_from_dict(data)
    assert cfg.stages == 2
    assert cfg.optim.base_lr == 0.01
    assert cfg.model.use_affinity is False


def test_apply_overrides_bad_key_caught_by_schema():
    with pytest.raises(ConfigError):
        run_config_from_dict(apply_overrides({}, ["model.nope=1"]))


def test_apply_overrides_requires_equals_sign():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["stages"])


def test_round_trip_dict_identity():
    cfg = run_config_from_dict({"seed": 9})
    assert run_config_from_dict(run_config_to_dict(cfg)) == cfg


@given(st.integers(1, 12))
def test_crop_multiples_of_stride_validate(mult):
    cfg = run_config_from_dict({"crop": 8 * mult})
    assert not [e for e in validate_run_config(cfg) if "crop" in e]


@given(st.integers(1, 400))
def test_crop_validation_matches_divisibility(crop):
    if crop % 8 == 0:
        assert run_config_from_dict({"crop": crop}).crop == crop
    else:
        with pytest.raises(ConfigError, match="crop"):
            run_config_from_dict({"crop": crop})


def test_config_is_plain_dataclass_tree():
    cfg = RunConfig()
    assert cfg.crf.bilateral_sigma_xy == 30.0
    assert cfg.crf.bilateral_sigma_rgb == 0.1
    assert cfg.crf.spatial_weight == 3.0
    assert cfg.crf.bilateral_weight == 5.0
    assert cfg.crf.potts_compat == 1.0
