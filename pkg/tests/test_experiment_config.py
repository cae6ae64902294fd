import json
from fractions import Fraction
from pathlib import Path

import pytest

from models.experiment import (
    config_hash,
    dump_config,
    experiment_from_dict,
    load_experiment_config,
    save_experiment_config,
    stage1_hash,
)
from utils.errors import ConfigError, DatasetMissingError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_toy_config_resolves_derived_sizes():
    experiment = load_experiment_config(CONFIGS / "toy.json")
    assert experiment.channel.cbr == Fraction(1, 8)
    assert experiment.channel.symbol_count == 24
    assert experiment.source.bit_count == 96
    assert experiment.stage2.lr == pytest.approx(1e-4)
    assert experiment.stage2.seed == experiment.seed
    assert experiment.eval.channels == ["awgn"]
    assert experiment.eval.cbrs == [Fraction(1, 8)]
    assert experiment.eval.dataset == "synthetic"


def test_rayleigh_gets_its_own_stage2_rate(tiny_config_dict):
    experiment = experiment_from_dict(tiny_config_dict, {"channel.type": "rayleigh"})
    assert experiment.stage2.lr == pytest.approx(5e-4)
    tiny_config_dict["stage2"]["lr"] = 0.01
    assert experiment_from_dict(tiny_config_dict, {"channel.type": "rayleigh"}).stage2.lr == 0.01


def test_interface_lr_defaults_to_stage1_lr(tiny_config_dict):
    del tiny_config_dict["stage1"]["interface_lr"]
    experiment = experiment_from_dict(tiny_config_dict)
    assert experiment.stage1.interface_lr == experiment.stage1.lr


def test_missing_sections_take_defaults():
    experiment = experiment_from_dict({"schema_version": 1})
    assert experiment.dataset.name == "synthetic"
    assert experiment.channel.symbol_count == 48
    assert experiment.channel.bits_per_symbol == 2
    assert experiment.source.bit_count == 4 * experiment.channel.symbol_count
    assert experiment.stage1.lam == 1.0


def test_negative_lambda_names_the_field(tiny_config_dict):
    tiny_config_dict["stage1"]["lambda"] = -0.5
    with pytest.raises(ConfigError) as excinfo:
        experiment_from_dict(tiny_config_dict)
    assert "lambda" in excinfo.value.details["stage1"]
    assert excinfo.value.exit_code == 2


def test_inverted_snr_range(tiny_config_dict):
    tiny_config_dict["snr"] = {"low": 20, "high": 5}
    with pytest.raises(ConfigError) as excinfo:
        experiment_from_dict(tiny_config_dict)
    assert "high" in excinfo.value.details["snr"]


@pytest.mark.parametrize(
    "value, expected",
    [("1/8", Fraction(1, 8)), ("0.125", Fraction(1, 8)), (0.125, Fraction(1, 8)), ("2/16", Fraction(1, 8))],
)
def test_cbr_parsing(tiny_config_dict, value, expected):
    tiny_config_dict["channel"]["cbr"] = value
    assert experiment_from_dict(tiny_config_dict).channel.cbr == expected


@pytest.mark.parametrize("value", ["abc", "1/0", "-1/8", 0, True])
def test_cbr_rejects_bad_values(tiny_config_dict, value):
    tiny_config_dict["channel"]["cbr"] = value
    with pytest.raises(ConfigError):
        experiment_from_dict(tiny_config_dict)


def test_cbr_must_be_realizable(tiny_config_dict):
    tiny_config_dict["channel"]["cbr"] = "1/7"
    with pytest.raises(ConfigError) as excinfo:
        experiment_from_dict(tiny_config_dict)
    assert "channel.cbr" in excinfo.value.details


def test_declared_symbol_count_must_match_cbr(tiny_config_dict):
    tiny_config_dict["channel"]["symbol_count"] = 25
    with pytest.raises(ConfigError):
        experiment_from_dict(tiny_config_dict)
    tiny_config_dict["channel"]["symbol_count"] = 24
    assert experiment_from_dict(tiny_config_dict).source.bit_count == 96


def test_heads_must_divide_width(tiny_config_dict):
    tiny_config_dict["channel"]["num_heads"] = 3
    with pytest.raises(ConfigError):
        experiment_from_dict(tiny_config_dict)


def test_unknown_fields_and_versions(tiny_config_dict):
    with pytest.raises(ConfigError):
        experiment_from_dict(dict(tiny_config_dict, color="red"))
    with pytest.raises(ConfigError):
        experiment_from_dict(dict(tiny_config_dict, schema_version=2))
    with pytest.raises(ConfigError):
        experiment_from_dict(dict(tiny_config_dict, channel={"type": "rician"}))


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment_config(broken)


def test_save_and_reload_is_identity(tiny_experiment, tmp_path):
    path = save_experiment_config(tiny_experiment, tmp_path / "resolved.json")
    reloaded = load_experiment_config(path)
    assert reloaded == tiny_experiment
    assert json.loads(path.read_text())["stage1"]["lambda"] == 1.0
    assert dump_config(reloaded)["channel"]["cbr"] == "1/8"


def test_hashes_track_what_they_cover(tiny_config_dict):
    base = experiment_from_dict(tiny_config_dict)
    assert config_hash(base) == config_hash(experiment_from_dict(tiny_config_dict))

    channel_changed = experiment_from_dict(tiny_config_dict, {"channel.type": "rayleigh"})
    assert config_hash(channel_changed) != config_hash(base)
    assert stage1_hash(channel_changed) == stage1_hash(base)

    stage2_seed = experiment_from_dict(tiny_config_dict, {"stage2.seed": 5})
    assert stage1_hash(stage2_seed) == stage1_hash(base)
    assert stage2_seed.stage2_seed == 5

    lam_changed = experiment_from_dict(tiny_config_dict, {"stage1.lambda": 0.0})
    assert stage1_hash(lam_changed) != stage1_hash(base)


def test_hash_ignores_dataset_root(tiny_config_dict, tmp_path):
    base = experiment_from_dict(tiny_config_dict)
    tiny_config_dict["dataset"]["root"] = str(tmp_path)
    moved = experiment_from_dict(tiny_config_dict)
    assert moved.dataset.root == str(tmp_path)
    assert config_hash(moved) == config_hash(base)


def test_environment_supplies_dataset_root(tmp_path, monkeypatch):
    raw = json.loads((CONFIGS / "cifar10.json").read_text())
    with pytest.raises(ConfigError):
        experiment_from_dict(raw)

    monkeypatch.setenv("SPLITJSCC_DATA_ROOT", str(tmp_path / "absent"))
    with pytest.raises(DatasetMissingError):
        experiment_from_dict(raw)

    monkeypatch.setenv("SPLITJSCC_DATA_ROOT", str(tmp_path))
    experiment = experiment_from_dict(raw)
    assert experiment.dataset.root == str(tmp_path)
    assert experiment.dataset.image_shape == (32, 32, 3)
    assert experiment.channel.symbol_count == 128
    assert experiment.source.bit_count == 512
