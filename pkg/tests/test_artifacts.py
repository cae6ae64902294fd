import json

import jsonschema
import pytest
import torch

from models.channel_codec import train_stage2
from models.experiment import experiment_from_dict, stage1_hash
from models.interface import InterfaceSpec, save_spec
from models.source_codec import train_stage1
from utils.artifacts import (
    CHANNEL_CHECKPOINT,
    INTERFACE_FILE,
    MANIFEST_FILE,
    MANIFEST_SCHEMA,
    SOURCE_CHECKPOINT,
    artifact_summary,
    build_manifest,
    check_output_file,
    load_checkpoint,
    load_stage1,
    load_stage2,
    prepare_output_dir,
    read_manifest,
    save_stage1,
    save_stage2,
    write_manifest,
)
from utils.errors import ArtifactIncompatibleError, MissingModelError, OutputExistsError
from utils.helpers import parameter_checksum


@pytest.fixture
def stage1_dir(tmp_path, tiny_experiment, tiny_dataset):
    result = train_stage1(tiny_dataset, tiny_experiment, fingerprint=stage1_hash(tiny_experiment))
    return save_stage1(prepare_output_dir(tmp_path / "stage1"), result, tiny_experiment)


def test_prepare_output_dir(tmp_path):
    out = prepare_output_dir(tmp_path / "run")
    (out / "x.txt").write_text("x")
    with pytest.raises(OutputExistsError):
        prepare_output_dir(out)
    prepare_output_dir(out, force=True)
    assert list(out.iterdir()) == []

    (tmp_path / "file").write_text("x")
    with pytest.raises(OutputExistsError):
        prepare_output_dir(tmp_path / "file", force=True)


def test_force_keeps_inputs_and_foreign_runs(tmp_path):
    run = prepare_output_dir(tmp_path / "run")
    table = run / "results.csv"
    table.write_text("x")
    for target in (run, tmp_path):
        with pytest.raises(OutputExistsError):
            prepare_output_dir(target, force=True, inputs=[table])
    assert table.is_file()

    (run / MANIFEST_FILE).write_text(json.dumps({"kind": "stage2"}))
    with pytest.raises(OutputExistsError):
        prepare_output_dir(run, force=True, kind="eval")
    assert (run / MANIFEST_FILE).is_file()
    prepare_output_dir(run, force=True, kind="stage2")
    assert list(run.iterdir()) == []


def test_check_output_file(tmp_path):
    path = check_output_file(tmp_path / "a" / "b.bin")
    path.write_bytes(b"1")
    with pytest.raises(OutputExistsError):
        check_output_file(path)
    assert check_output_file(path, force=True) == path


def test_manifest_records_checksums(tmp_path, tiny_experiment):
    (tmp_path / "data.bin").write_bytes(b"abc")
    manifest = build_manifest("eval", tiny_experiment, seeds=[0], psnr_cap_db=100.0, models=[])
    write_manifest(tmp_path, manifest)
    loaded = read_manifest(tmp_path, kind="eval")
    assert set(loaded["artifacts"]) == {"data.bin"}
    assert loaded["config_hash"] == manifest["config_hash"]
    with pytest.raises(ArtifactIncompatibleError):
        read_manifest(tmp_path, kind="stage1")


def test_manifest_schema_requires_kind_fields(tiny_experiment):
    manifest = build_manifest("stage2", tiny_experiment)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(manifest, MANIFEST_SCHEMA)


def test_read_manifest_errors(tmp_path):
    with pytest.raises(MissingModelError):
        read_manifest(tmp_path)
    (tmp_path / MANIFEST_FILE).write_text("{broken")
    with pytest.raises(ArtifactIncompatibleError):
        read_manifest(tmp_path)
    (tmp_path / MANIFEST_FILE).write_text(json.dumps({"kind": "stage1"}))
    with pytest.raises(ArtifactIncompatibleError):
        read_manifest(tmp_path)


def test_stage1_roundtrip(stage1_dir, tiny_experiment):
    for name in (SOURCE_CHECKPOINT, INTERFACE_FILE, MANIFEST_FILE):
        assert (stage1_dir / name).is_file()

    loaded = load_stage1(stage1_dir, experiment=tiny_experiment)
    assert loaded.experiment == tiny_experiment
    assert loaded.spec.training_fingerprint == stage1_hash(tiny_experiment)
    assert loaded.manifest["interface_fingerprint"] == loaded.spec.fingerprint
    assert all(not p.requires_grad for p in loaded.codec.parameters())

    checkpoint = load_checkpoint(stage1_dir / SOURCE_CHECKPOINT, "stage1")
    assert checkpoint["param_checksum"] == parameter_checksum(loaded.codec)
    with pytest.raises(ArtifactIncompatibleError):
        load_checkpoint(stage1_dir / SOURCE_CHECKPOINT, "stage2")


def test_stage1_rejects_other_config(stage1_dir, tiny_config_dict):
    other = experiment_from_dict(tiny_config_dict, {"stage1.lambda": 0.0})
    with pytest.raises(ArtifactIncompatibleError):
        load_stage1(stage1_dir, experiment=other)


def test_stage1_rejects_foreign_interface(stage1_dir, tmp_path):
    loaded = load_stage1(stage1_dir)
    eps = loaded.spec.epsilon.copy()
    eps[0] = 0.5 if eps[0] != 0.5 else 0.4
    forged = save_spec(
        InterfaceSpec(epsilon=eps, training_fingerprint=loaded.spec.training_fingerprint),
        tmp_path / "forged.bin",
    )
    with pytest.raises(ArtifactIncompatibleError):
        load_stage1(stage1_dir, interface_path=forged)


def test_stage1_rejects_tampered_checkpoint(stage1_dir):
    checkpoint = torch.load(stage1_dir / SOURCE_CHECKPOINT, weights_only=True)
    first = next(iter(checkpoint["state_dict"]))
    checkpoint["state_dict"][first] = checkpoint["state_dict"][first] + 1.0
    torch.save(checkpoint, stage1_dir / SOURCE_CHECKPOINT)
    with pytest.raises(ArtifactIncompatibleError):
        load_stage1(stage1_dir)


def test_stage2_roundtrip(stage1_dir, tiny_dataset, tmp_path):
    stage1 = load_stage1(stage1_dir)
    result = train_stage2(tiny_dataset, stage1.codec, stage1.spec, stage1.experiment, ablation="no-iattn")
    out = save_stage2(prepare_output_dir(tmp_path / "stage2"), result, stage1.experiment, stage1)
    assert (out / CHANNEL_CHECKPOINT).is_file()

    loaded = load_stage2(out)
    assert loaded.ablation == "no-iattn"
    assert loaded.channel == "awgn"
    assert str(loaded.cbr) == "1/8"
    assert loaded.spec == stage1.spec
    assert parameter_checksum(loaded.codec) == parameter_checksum(result.codec)

    summary = artifact_summary(loaded)
    assert summary["ablation"] == "no-iattn"
    assert summary["checkpoint_sha256"] == loaded.manifest["artifacts"][CHANNEL_CHECKPOINT]


def test_stage2_detects_replaced_stage1(stage1_dir, tiny_dataset, tmp_path):
    stage1 = load_stage1(stage1_dir)
    result = train_stage2(tiny_dataset, stage1.codec, stage1.spec, stage1.experiment)
    out = save_stage2(prepare_output_dir(tmp_path / "stage2"), result, stage1.experiment, stage1)

    other = experiment_from_dict({**_raw(stage1_dir), "seed": 1})
    retrained = train_stage1(tiny_dataset, other, fingerprint=stage1_hash(other))
    save_stage1(prepare_output_dir(stage1_dir, force=True), retrained, other)
    with pytest.raises(ArtifactIncompatibleError):
        load_stage2(out)


def _raw(stage1_dir):
    return json.loads((stage1_dir / MANIFEST_FILE).read_text())["config"]
