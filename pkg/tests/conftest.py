import copy
import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from models.experiment import experiment_from_dict  # noqa: E402
from models.interface import InterfaceSpec  # noqa: E402
from utils.data import load_for_experiment  # noqa: E402

# 8x8x3 synthetic, CBR 1/8 -> L = 24, M = 96; seconds per stage on CPU
TINY_CONFIG = {
    "schema_version": 1,
    "name": "tiny",
    "seed": 0,
    "dataset": {"name": "synthetic", "image_shape": [8, 8, 3], "n_train": 16, "n_test": 8},
    "source": {"backbone": "conv", "embed_dim": 8},
    "channel": {
        "type": "awgn",
        "cbr": "1/8",
        "bits_per_token": 8,
        "embed_dim": 16,
        "depth": 1,
        "num_heads": 2,
    },
    "snr": {"mode": "uniform", "low": 5, "high": 20, "validation_snrs": [5, 10, 15, 20]},
    "stage1": {"epochs": 1, "batch_size": 8, "lr": 0.001, "interface_lr": 0.01, "lambda": 1.0},
    "stage2": {"epochs": 1, "batch_size": 8},
    "eval": {"snrs": [5, 20], "seeds": [0], "batch_size": 8},
}


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run toy-scale training tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv("SPLITJSCC_DATA_ROOT", raising=False)
    monkeypatch.setenv("SPLITJSCC_ENV", "testing")


@pytest.fixture
def tiny_config_dict():
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_experiment(tiny_config_dict):
    return experiment_from_dict(tiny_config_dict)


@pytest.fixture
def tiny_dataset(tiny_experiment):
    return load_for_experiment(tiny_experiment)


@pytest.fixture
def write_config(tmp_path):
    """write_config(dict, name="config.json") -> path"""

    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def config_file(write_config, tiny_config_dict):
    return write_config(tiny_config_dict)


@pytest.fixture
def make_spec():
    """make_spec(M, seed=0) -> InterfaceSpec with eps spread over (0.01, 0.49)"""

    def _make(bit_count, seed=0, fingerprint=""):
        rng = np.random.default_rng(seed)
        return InterfaceSpec(
            epsilon=rng.uniform(0.01, 0.49, size=bit_count), training_fingerprint=fingerprint
        )

    return _make
