"""Dataclass configs with JSON round-trip, defaults materialization and validation."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when a config violates its schema or cross-field constraints."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ModelConfig:
    num_classes: int = 3          # foreground classes; segmentation head adds a background channel
    stride: int = 8               # input pixels per backbone feature cell, power of two
    backbone_width: int = 32
    backbone_blocks: int = 4
    head_channels: int = 16       # width of the saliency/segmentation decoding heads
    sa_hidden: int = 8            # hidden channels of the affinity fusion module
    use_affinity: bool = True
    seed: int = 0


@dataclass
class LossConfig:
    lambda_cls: float = 1.0
    lambda_sal: float = 1.0
    lambda_seg: float = 1.0


@dataclass
class OptimConfig:
    base_lr: float = 0.001
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class ThresholdConfig:
    fg: float = 0.3     # min normalized CAM value for a confident object pixel
    bg: float = 0.06    # saliency at or below this marks a background pixel
    # Optional stricter bound for refreshed (stage >= 1) labels: affinity
    # propagation spreads CAM mass, so the warm-up calibration over-selects
    # there. None reuses fg everywhere.
    fg_refresh: float | None = None

    def for_stage(self, stage: int) -> "ThresholdConfig":
        """Effective thresholds for labels generated at a given stage."""
        if stage <= 0 or self.fg_refresh is None:
            return self
        return dataclasses.replace(self, fg=self.fg_refresh)


@dataclass
class CrfConfig:
    iterations: int = 10
    spatial_sigma: float = 3.0
    bilateral_sigma_xy: float = 30.0
    bilateral_sigma_rgb: float = 0.1
    spatial_weight: float = 3.0
    bilateral_weight: float = 5.0
    potts_compat: float = 1.0


@dataclass
class AugConfig:
    hflip: bool = True
    color_jitter: float = 0.1   # max additive brightness / multiplicative contrast shift


@dataclass
class RunConfig:
    stages: int = 4
    warmup_epochs: int = 15
    stage_epochs: int = 10
    batch_size: int = 4
    crop: int = 64              # must be divisible by model.stride
    seed: int = 0
    train_dir: str = ""
    eval_dir: str = ""
    cam_refine_iterations: int = 1
    cam_refine_transpose: bool = True   # propagate CAMs with the same matrix used for prediction refinement
    reinit_each_stage: bool = False
    infer_crf: bool = False
    export_arrays: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    aug: AugConfig = field(default_factory=AugConfig)


def _build_dataclass(cls, data: dict, prefix: str, errors: list[str]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            errors.append(f"{prefix}{key}: unknown field")
            continue
        ftype = fields[key].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            if not isinstance(value, dict):
                errors.append(f"{prefix}{key}: expected an object")
                continue
            kwargs[key] = _build_dataclass(_resolve(ftype), value, f"{prefix}{key}.", errors)
        else:
            kwargs[key] = _coerce(value, ftype, f"{prefix}{key}", errors)
    try:
        return cls(**kwargs)
    except TypeError:
        return cls()


_DATACLASSES = {}


def _resolve(ftype):
    # field types are strings under `from __future__ import annotations`
    if isinstance(ftype, str):
        return _DATACLASSES.get(ftype, ftype)
    return ftype


def _coerce(value, ftype, name: str, errors: list[str]):
    tname = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if tname == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{name}: expected int, got {value!r}")
            return 0
        return value
    if tname == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{name}: expected number, got {value!r}")
            return 0.0
        return float(value)
    if tname == "bool":
        if not isinstance(value, bool):
            errors.append(f"{name}: expected bool, got {value!r}")
            return False
        return value
    if tname == "str":
        if not isinstance(value, str):
            errors.append(f"{name}: expected string, got {value!r}")
            return ""
        return value
    return value


for _cls in (ModelConfig, LossConfig, OptimConfig, ThresholdConfig, CrfConfig, AugConfig, RunConfig):
    _DATACLASSES[_cls.__name__] = _cls


def run_config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, materializing defaults and validating.

    Raises ConfigError listing every failing field.
    """
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a JSON object"])
    config = _build_dataclass(RunConfig, data, "", errors)
    errors.extend(validate_run_config(config))
    if errors:
        raise ConfigError(errors)
    return config


def validate_run_config(c: RunConfig) -> list[str]:
    """Field and cross-field constraint checks; returns all violations."""
    errors = []
    m = c.model
    if m.stride < 1 or (m.stride & (m.stride - 1)) != 0:
        errors.append(f"model.stride: must be a power of two, got {m.stride}")
    if m.head_channels <= 0:
        errors.append(f"model.head_channels: must be positive, got {m.head_channels}")
    if m.backbone_width <= 0:
        errors.append(f"model.backbone_width: must be positive, got {m.backbone_width}")
    if m.num_classes < 1:
        errors.append(f"model.num_classes: must be >= 1, got {m.num_classes}")
    if m.sa_hidden <= 0:
        errors.append(f"model.sa_hidden: must be positive, got {m.sa_hidden}")
    if m.stride >= 1 and (m.stride & (m.stride - 1)) == 0:
        needed = int(math.log2(m.stride)) if m.stride > 1 else 0
        if m.backbone_blocks < max(needed, 1):
            errors.append(
                f"model.backbone_blocks: need at least {max(needed, 1)} blocks for stride {m.stride}"
            )
    if c.stages < 1:
        errors.append(f"stages: must be >= 1, got {c.stages}")
    if c.warmup_epochs < 1:
        errors.append(f"warmup_epochs: must be >= 1, got {c.warmup_epochs}")
    if c.stage_epochs < 1:
        errors.append(f"stage_epochs: must be >= 1, got {c.stage_epochs}")
    if c.batch_size < 1:
        errors.append(f"batch_size: must be >= 1, got {c.batch_size}")
    if c.crop < m.stride:
        errors.append(f"crop: must be >= model.stride ({m.stride}), got {c.crop}")
    elif m.stride >= 1 and c.crop % m.stride != 0:
        errors.append(f"crop: {c.crop} not divisible by model.stride {m.stride}")
    if c.cam_refine_iterations < 1:
        errors.append(f"cam_refine_iterations: must be >= 1, got {c.cam_refine_iterations}")
    lw = c.loss
    for name, v in (("lambda_cls", lw.lambda_cls), ("lambda_sal", lw.lambda_sal), ("lambda_seg", lw.lambda_seg)):
        if not math.isfinite(v) or v < 0:
            errors.append(f"loss.{name}: must be a finite non-negative number, got {v}")
    if lw.lambda_cls == 0 and lw.lambda_sal == 0 and lw.lambda_seg == 0:
        errors.append("loss: at least one loss weight must be positive")
    if c.optim.base_lr <= 0:
        errors.append(f"optim.base_lr: must be positive, got {c.optim.base_lr}")
    if c.optim.power <= 0:
        errors.append(f"optim.power: must be positive, got {c.optim.power}")
    if not 0 <= c.optim.momentum < 1:
        errors.append(f"optim.momentum: must be in [0, 1), got {c.optim.momentum}")
    if c.optim.weight_decay < 0:
        errors.append(f"optim.weight_decay: must be >= 0, got {c.optim.weight_decay}")
    for name, v in (("fg", c.thresholds.fg), ("bg", c.thresholds.bg)):
        if not 0 < v < 1:
            errors.append(f"thresholds.{name}: must lie in (0, 1), got {v}")
    fr = c.thresholds.fg_refresh
    if fr is not None and (isinstance(fr, bool) or not isinstance(fr, (int, float)) or not 0 < fr < 1):
        errors.append(f"thresholds.fg_refresh: must lie in (0, 1) or be null, got {fr}")
    cr = c.crf
    if cr.iterations < 1:
        errors.append(f"crf.iterations: must be >= 1, got {cr.iterations}")
    for name in ("spatial_sigma", "bilateral_sigma_xy", "bilateral_sigma_rgb",
                 "spatial_weight", "bilateral_weight", "potts_compat"):
        v = getattr(cr, name)
        if not math.isfinite(v) or v <= 0:
            errors.append(f"crf.{name}: must be positive, got {v}")
    if not 0 <= c.aug.color_jitter <= 0.5:
        errors.append(f"aug.color_jitter: must lie in [0, 0.5], got {c.aug.color_jitter}")
    return errors


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"config file {path} is not valid JSON: {e}"])
    return run_config_from_dict(data)


def run_config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def save_run_config(config: RunConfig, path: str | Path) -> None:
    """Write the fully materialized config (every default made explicit)."""
    Path(path).write_text(json.dumps(run_config_to_dict(config), indent=2, sort_keys=True) + "\n")


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` overrides on top of a raw config dict.

    Values parse as JSON when possible, else as strings.
    """
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append(f"override {item!r}: expected key=value")
            continue
        key, raw = item.split("=", 1)
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                errors.append(f"override {key!r}: {part} is not an object")
                break
        else:
            node[parts[-1]] = value
    if errors:
        raise ConfigError(errors)
    return data
