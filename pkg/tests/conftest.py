import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """10 train + 6 eval images at 48x48; mild corruption keeps generation fast."""
    from auxseg.data import SynthSpec, generate

    root = tmp_path_factory.mktemp("tiny_data")
    spec = dict(image_size=48, shapes_max=2, sal_dilate=1, sal_blur=0.8, sal_dropout=0.1)
    generate(SynthSpec(num_images=10, seed=7, **spec), root / "train")
    generate(SynthSpec(num_images=6, seed=8, **spec), root / "eval")
    return root


@pytest.fixture(scope="session")
def tiny_config(tiny_dataset):
    from auxseg.config import run_config_from_dict

    return run_config_from_dict(
        {
            "train_dir": str(tiny_dataset / "train"),
            "eval_dir": str(tiny_dataset / "eval"),
            "stages": 2,
            "warmup_epochs": 2,
            "stage_epochs": 2,
            "crop": 48,
            "optim": {"base_lr": 0.01},
            "crf": {"iterations": 3},
            "seed": 0,
        }
    )
