import csv
import json

import pytest
from click.testing import CliRunner
from marshmallow import ValidationError

from app import SplitJSCCGroup, create_app
from models.interface import InterfaceSpec, load_spec, save_spec
from utils.artifacts import (
    CHANNEL_CHECKPOINT,
    INTERFACE_FILE,
    MANIFEST_FILE,
    SOURCE_CHECKPOINT,
    TRAIN_LOG_FILE,
    load_checkpoint,
)
from utils.errors import OutputExistsError, TrainingDivergedError


@pytest.fixture
def app():
    return create_app("testing")


@pytest.fixture
def cli(app):
    return SplitJSCCGroup(create_app=lambda: app)


@pytest.fixture
def run(cli):
    runner = CliRunner()

    def _run(*args):
        return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)

    return _run


@pytest.fixture
def stage1_dir(run, config_file, tmp_path):
    out = tmp_path / "stage1"
    result = run("train-stage1", "--config", config_file, "--output", out)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def stage2_dir(run, config_file, stage1_dir, tmp_path):
    out = tmp_path / "stage2"
    result = run("train-stage2", "--config", config_file, "--stage1-dir", stage1_dir, "--output", out)
    assert result.exit_code == 0, result.output
    return out


def _manifest(directory):
    return json.loads((directory / MANIFEST_FILE).read_text())


def test_commands_are_registered(app):
    assert set(app.cli.commands) == {
        "train-stage1", "train-stage2", "export-interface", "eval", "sweep", "ablate", "plot",
    }
    assert set(app.blueprints) == {"training", "evaluation"}


def test_train_stage1_writes_artifacts(stage1_dir):
    for name in (SOURCE_CHECKPOINT, INTERFACE_FILE, TRAIN_LOG_FILE, MANIFEST_FILE):
        assert (stage1_dir / name).is_file()
    manifest = _manifest(stage1_dir)
    assert manifest["kind"] == "stage1"
    assert manifest["interface_fingerprint"] == load_spec(stage1_dir / INTERFACE_FILE).fingerprint


def test_train_stage1_refuses_to_overwrite(run, config_file, stage1_dir):
    result = run("train-stage1", "--config", config_file, "--output", stage1_dir)
    assert result.exit_code == 3


def test_train_stage1_rerun_is_reproducible(run, config_file, stage1_dir, tmp_path):
    again = tmp_path / "again"
    assert run("train-stage1", "--config", config_file, "--output", again).exit_code == 0
    assert (again / INTERFACE_FILE).read_bytes() == (stage1_dir / INTERFACE_FILE).read_bytes()
    first = load_checkpoint(stage1_dir / SOURCE_CHECKPOINT, "stage1")
    second = load_checkpoint(again / SOURCE_CHECKPOINT, "stage1")
    assert first["param_checksum"] == second["param_checksum"]

    forced = run("train-stage1", "--config", config_file, "--output", again, "--force")
    assert forced.exit_code == 0


def test_negative_lambda_is_a_config_error(run, write_config, tiny_config_dict, tmp_path):
    tiny_config_dict["stage1"]["lambda"] = -1
    path = write_config(tiny_config_dict, "bad.json")
    result = run("train-stage1", "--config", path, "--output", tmp_path / "out")
    assert result.exit_code == 2
    assert not (tmp_path / "out").exists()


def test_missing_config_file(run, tmp_path):
    result = run("train-stage1", "--config", tmp_path / "nope.json", "--output", tmp_path / "out")
    assert result.exit_code == 2


def test_train_stage2_records_ablation(run, config_file, stage1_dir, tmp_path):
    out = tmp_path / "s2"
    result = run(
        "train-stage2", "--config", config_file, "--stage1-dir", stage1_dir,
        "--ablation", "no-ian", "--output", out,
    )
    assert result.exit_code == 0, result.output
    manifest = _manifest(out)
    assert manifest["ablation"] == "no-ian"
    assert manifest["channel"] == "awgn"
    assert manifest["cbr"] == "1/8"
    assert manifest["stage1_hash"] == _manifest(stage1_dir)["stage1_hash"]


def test_train_stage2_rejects_tampered_interface(run, config_file, stage1_dir, tmp_path):
    spec = load_spec(stage1_dir / INTERFACE_FILE)
    eps = spec.epsilon.copy()
    eps[:] = 0.3
    forged = save_spec(
        InterfaceSpec(epsilon=eps, training_fingerprint=spec.training_fingerprint),
        tmp_path / "forged.bin",
    )
    result = run(
        "train-stage2", "--config", config_file, "--stage1-dir", stage1_dir,
        "--interface", forged, "--output", tmp_path / "s2",
    )
    assert result.exit_code == 3


def test_train_stage2_rejects_changed_stage1_config(run, write_config, tiny_config_dict, stage1_dir, tmp_path):
    tiny_config_dict["seed"] = 7
    path = write_config(tiny_config_dict, "other.json")
    result = run("train-stage2", "--config", path, "--stage1-dir", stage1_dir, "--output", tmp_path / "s2")
    assert result.exit_code == 3


def test_export_interface(run, stage1_dir, tmp_path):
    target = tmp_path / "export" / "P.bin"
    result = run("export-interface", "--stage1-dir", stage1_dir, "--output", target)
    assert result.exit_code == 0, result.output
    assert target.read_bytes() == (stage1_dir / INTERFACE_FILE).read_bytes()

    with open(f"{target}.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    spec = load_spec(target)
    assert len(rows) == spec.bit_count
    assert float(rows[0]["epsilon"]) == spec.epsilon[0]
    assert float(rows[0]["importance"]) == pytest.approx(1 - 2 * spec.epsilon[0])

    assert run("export-interface", "--stage1-dir", stage1_dir, "--output", target).exit_code == 3


def test_eval_single_cell(run, config_file, stage2_dir, tmp_path):
    out = tmp_path / "eval"
    result = run(
        "eval", "--config", config_file, "--stage2-dir", stage2_dir,
        "--snr", 10, "--seed", 0, "--output", out, "--save-images", 1,
    )
    assert result.exit_code == 0, result.output
    with open(out / "results.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert rows[0]["snr_db"] == "10.0"
    assert list((out / "images").glob("*.png"))
    assert list((out / "plots").glob("*.png"))

    manifest = _manifest(out)
    assert manifest["kind"] == "eval"
    assert manifest["seeds"] == [0]
    assert manifest["psnr_cap_db"] == 100.0
    assert "results.csv" in manifest["artifacts"]


def test_sweep_records_provenance(run, config_file, stage2_dir, tmp_path):
    out = tmp_path / "sweep"
    result = run("sweep", "--config", config_file, "--stage2-dir", stage2_dir, "--output", out)
    assert result.exit_code == 0, result.output
    manifest = _manifest(out)
    assert manifest["kind"] == "sweep"
    assert len(manifest["models"]) == 1
    assert manifest["models"][0]["interface_fingerprint"] == _manifest(stage2_dir)["interface_fingerprint"]
    with open(out / "results.csv", newline="") as f:
        assert len(list(csv.DictReader(f))) == 2


def test_sweep_reports_missing_models(run, config_file, stage2_dir, tmp_path):
    result = run(
        "sweep", "--config", config_file, "--stage2-dir", stage2_dir,
        "--channel", "rayleigh", "--output", tmp_path / "sweep",
    )
    assert result.exit_code == 3


def test_plot_from_table(run, tmp_path):
    table = tmp_path / "results.csv"
    table.write_text(
        "arm,channel,cbr,snr_db,seed,mean_psnr,std_psnr,mean_ber,count\n"
        "full,awgn,1/8,5.0,0,20.1,1.0,0.1,8\n"
        "full,awgn,1/8,10.0,0,23.4,1.0,0.05,8\n"
        "full,awgn,1/8,15.0,0,25.0,1.0,0.01,8\n"
    )
    result = run("plot", "--table", table, "--output", tmp_path / "plots")
    assert result.exit_code == 0, result.output
    assert [p.name for p in (tmp_path / "plots").iterdir()] == ["psnr_awgn_cbr1-8.png"]


def test_force_never_clears_an_input_directory(run, config_file, stage2_dir, tmp_path):
    out = tmp_path / "eval"
    assert run("eval", "--config", config_file, "--stage2-dir", stage2_dir, "--output", out).exit_code == 0
    table = out / "results.csv"

    result = run("plot", "--table", table, "--output", out, "--force")
    assert result.exit_code == 3
    assert table.is_file()
    assert (out / MANIFEST_FILE).is_file()

    result = run(
        "eval", "--config", config_file, "--stage2-dir", stage2_dir, "--output", stage2_dir, "--force"
    )
    assert result.exit_code == 3
    assert (stage2_dir / CHANNEL_CHECKPOINT).is_file()


def test_plot_missing_table(run, tmp_path):
    result = run("plot", "--table", tmp_path / "absent.csv", "--output", tmp_path / "plots")
    assert result.exit_code == 2


@pytest.mark.parametrize(
    "error, code",
    [
        (TrainingDivergedError("stage2", 3, 41, float("nan")), 4),
        (ValidationError({"stage1": {"lambda": ["bad"]}}), 2),
        (OutputExistsError("exists"), 3),
    ],
)
def test_error_handlers_map_exit_codes(app, cli, error, code):
    @app.cli.command("boom")
    def boom():
        raise error

    result = CliRunner().invoke(cli, ["boom"], catch_exceptions=False)
    assert result.exit_code == code


def test_help_lists_blueprint_commands(cli):
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for name in ("train-stage1", "export-interface", "sweep", "plot"):
        assert name in result.output
