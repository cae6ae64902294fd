"""
========================================
ARTIFACTS
========================================
Каталоги запусков: чекпоинты (torch.save), спецификация интерфейса,
манифесты (проверяются jsonschema при чтении) и политика перезаписи.

stage1/  source_codec.pt  interface.bin  train_log.jsonl  manifest.json
stage2/  channel_codec.pt  train_log.jsonl  manifest.json
"""

import logging
import shutil
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import jsonschema
import torch

from models.channel_codec import ChannelCodec
from models.experiment import (
    config_hash,
    dump_config,
    experiment_from_dict,
    stage1_hash,
)
from models.interface import load_spec, save_spec
from models.source_codec import SourceCodec, freeze
from utils.errors import (
    ArtifactError,
    ArtifactIncompatibleError,
    MissingModelError,
    OutputExistsError,
)
from utils.helpers import file_checksum, generate_run_id, parameter_checksum, read_json, write_json

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_FILE = "manifest.json"
TRAIN_LOG_FILE = "train_log.jsonl"
SOURCE_CHECKPOINT = "source_codec.pt"
CHANNEL_CHECKPOINT = "channel_codec.pt"
INTERFACE_FILE = "interface.bin"

MANIFEST_KINDS = ("stage1", "stage2", "eval", "sweep", "ablation")

_SHA256 = {"type": "string", "pattern": "^[0-9a-f]{64}$"}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["kind", "manifest_version", "run_id", "created", "config", "config_hash", "artifacts"],
    "properties": {
        "kind": {"enum": list(MANIFEST_KINDS)},
        "manifest_version": {"const": MANIFEST_VERSION},
        "run_id": {"type": "string"},
        "created": {"type": "string"},
        "config": {"type": "object"},
        "config_hash": _SHA256,
        "stage1_hash": _SHA256,
        "interface_fingerprint": _SHA256,
        "artifacts": {"type": "object", "additionalProperties": _SHA256},
        "stage1_dir": {"type": "string"},
        "ablation": {"type": "string"},
        "channel": {"type": "string"},
        "cbr": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "psnr_cap_db": {"type": "number"},
        "summary": {"type": "object"},
        "models": {"type": "array", "items": {"type": "object"}},
    },
    "allOf": [
        {
            "if": {"properties": {"kind": {"const": "stage1"}}},
            "then": {"required": ["stage1_hash", "interface_fingerprint"]},
        },
        {
            "if": {"properties": {"kind": {"const": "stage2"}}},
            "then": {
                "required": [
                    "stage1_dir",
                    "stage1_hash",
                    "interface_fingerprint",
                    "ablation",
                    "channel",
                    "cbr",
                ]
            },
        },
        {
            "if": {"properties": {"kind": {"enum": ["eval", "sweep", "ablation"]}}},
            "then": {"required": ["seeds", "psnr_cap_db", "models"]},
        },
    ],
}


# ========================================
# КАТАЛОГИ
# ========================================


def _overlaps(path, other):
    path, other = path.resolve(), Path(other).resolve()
    return path == other or path in other.parents


def _existing_kind(path):
    manifest = path / MANIFEST_FILE
    if not manifest.is_file():
        return None
    try:
        return read_json(manifest).get("kind")
    except (OSError, ValueError, AttributeError):
        return "unreadable"


def prepare_output_dir(path, force=False, kind=None, inputs=()):
    """
    Подготовка каталога результатов

    Args:
        path: Каталог запуска
        force: Очистить непустой каталог
        kind: Вид запуска; force не трогает каталог с манифестом другого вида
        inputs: Файлы и каталоги, которые команда читает; каталог, который
            совпадает с одним из них или содержит его, не очищается

    Returns:
        Path существующего пустого каталога
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise OutputExistsError(f"output path exists and is not a directory: {path}")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise OutputExistsError(
                f"output directory is not empty: {path} (use --force to overwrite)",
                details={"path": str(path)},
            )
        for item in inputs:
            if _overlaps(path, item):
                raise OutputExistsError(
                    f"output directory {path} holds an input of this command: {item}",
                    details={"path": str(path), "input": str(item)},
                )
        existing = _existing_kind(path)
        if kind is not None and existing is not None and existing != kind:
            raise OutputExistsError(
                f"output directory {path} holds a {existing} run, refusing to replace it with {kind}",
                details={"path": str(path), "kind": existing},
            )
        logger.warning(f"⚠️ Overwriting output directory: {path}")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def check_output_file(path, force=False):
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(f"output file exists: {path} (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ========================================
# МАНИФЕСТЫ
# ========================================


def build_manifest(kind, experiment, **fields):
    manifest = {
        "kind": kind,
        "manifest_version": MANIFEST_VERSION,
        "run_id": generate_run_id(kind),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": dump_config(experiment),
        "config_hash": config_hash(experiment),
        "artifacts": {},
    }
    manifest.update(fields)
    return manifest


def write_manifest(directory, manifest):
    directory = Path(directory)
    artifacts = {}
    for item in sorted(directory.rglob("*")):
        if item.is_file() and item.name != MANIFEST_FILE:
            artifacts[item.relative_to(directory).as_posix()] = file_checksum(item)
    manifest = dict(manifest, artifacts=artifacts)
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    return write_json(directory / MANIFEST_FILE, manifest)


def read_manifest(directory, kind=None):
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise MissingModelError(f"no manifest in {directory}", details={"path": str(path)})
    try:
        manifest = read_json(path)
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except ValueError as e:
        raise ArtifactIncompatibleError(f"manifest {path} is not valid JSON: {e}")
    except jsonschema.ValidationError as e:
        raise ArtifactIncompatibleError(
            f"manifest {path} does not match the manifest schema: {e.message}",
            details={"path": list(e.absolute_path)},
        )
    if kind is not None and manifest["kind"] != kind:
        raise ArtifactIncompatibleError(
            f"{directory} holds a {manifest['kind']} run, expected {kind}"
        )
    return manifest


# ========================================
# ЧЕКПОИНТЫ
# ========================================


def save_checkpoint(path, kind, module, experiment, interface_fingerprint):
    checkpoint = {
        "kind": kind,
        "state_dict": module.state_dict(),
        "config": dump_config(experiment),
        "config_hash": config_hash(experiment),
        "interface_fingerprint": interface_fingerprint,
        "param_checksum": parameter_checksum(module),
    }
    torch.save(checkpoint, path)
    return path


def load_checkpoint(path, kind):
    path = Path(path)
    if not path.is_file():
        raise MissingModelError(f"checkpoint not found: {path}")
    try:
        checkpoint = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ArtifactIncompatibleError(f"cannot read checkpoint {path}: {e}")
    if checkpoint.get("kind") != kind:
        raise ArtifactIncompatibleError(
            f"{path} is a {checkpoint.get('kind')!r} checkpoint, expected {kind!r}"
        )
    return checkpoint


def _restore(module, checkpoint, path):
    try:
        module.load_state_dict(checkpoint["state_dict"])
    except RuntimeError as e:
        raise ArtifactIncompatibleError(f"checkpoint {path} does not fit the configured model: {e}")
    if parameter_checksum(module) != checkpoint["param_checksum"]:
        raise ArtifactIncompatibleError(f"parameter checksum mismatch: {path}")
    return module


# ========================================
# STAGE 1
# ========================================


@dataclass
class Stage1Artifacts:
    directory: Path
    experiment: object
    codec: SourceCodec
    spec: object
    manifest: dict

    @property
    def inputs(self):
        return (self.directory,)


def save_stage1(directory, result, experiment):
    directory = Path(directory)
    spec = result.spec
    save_checkpoint(
        directory / SOURCE_CHECKPOINT, "stage1", result.codec, experiment, spec.fingerprint
    )
    save_spec(spec, directory / INTERFACE_FILE)
    final = result.log[-1] if result.log else {}
    manifest = build_manifest(
        "stage1",
        experiment,
        stage1_hash=stage1_hash(experiment),
        interface_fingerprint=spec.fingerprint,
        summary={
            "final_loss": final.get("loss"),
            "mean_eps": float(spec.epsilon.mean()),
            "psnr_val": final.get("psnr_val"),
            "bit_count": spec.bit_count,
        },
    )
    write_manifest(directory, manifest)
    logger.info(f"💾 Stage-1 artifacts written to {directory}")
    return directory


def load_stage1(directory, experiment=None, interface_path=None):
    """
    Load and verify a stage-1 run.

    experiment: when given, its stage1_hash must match the run.
    interface_path: use this spec file instead of the run's own; it must carry
    the same fingerprint.
    """
    directory = Path(directory)
    manifest = read_manifest(directory, kind="stage1")

    if experiment is not None and stage1_hash(experiment) != manifest["stage1_hash"]:
        raise ArtifactIncompatibleError(
            f"config does not match stage-1 run {directory}",
            details={"expected": manifest["stage1_hash"], "found": stage1_hash(experiment)},
        )

    spec = load_spec(interface_path or directory / INTERFACE_FILE)
    if spec.fingerprint != manifest["interface_fingerprint"]:
        raise ArtifactIncompatibleError(
            f"interface fingerprint does not match stage-1 run {directory}",
            details={"expected": manifest["interface_fingerprint"], "found": spec.fingerprint},
        )
    if spec.training_fingerprint != manifest["stage1_hash"]:
        raise ArtifactIncompatibleError(f"interface was not produced by stage-1 run {directory}")

    run_experiment = experiment_from_dict(manifest["config"], resolve=False)
    checkpoint = load_checkpoint(directory / SOURCE_CHECKPOINT, "stage1")
    if checkpoint["interface_fingerprint"] != spec.fingerprint:
        raise ArtifactIncompatibleError(f"checkpoint and interface disagree in {directory}")

    codec = _restore(SourceCodec.from_config(run_experiment), checkpoint, directory / SOURCE_CHECKPOINT)
    freeze(codec)
    return Stage1Artifacts(directory, run_experiment, codec, spec, manifest)


# ========================================
# STAGE 2
# ========================================


@dataclass
class Stage2Artifacts:
    directory: Path
    experiment: object
    stage1: Stage1Artifacts
    codec: ChannelCodec
    manifest: dict

    @property
    def inputs(self):
        return (self.directory, *self.stage1.inputs)

    @property
    def channel(self):
        return self.manifest["channel"]

    @property
    def cbr(self):
        return Fraction(self.manifest["cbr"])

    @property
    def ablation(self):
        return self.manifest["ablation"]

    @property
    def source(self):
        return self.stage1.codec

    @property
    def spec(self):
        return self.stage1.spec


def save_stage2(directory, result, experiment, stage1):
    directory = Path(directory)
    codec = result.codec
    save_checkpoint(
        directory / CHANNEL_CHECKPOINT, "stage2", codec, experiment, codec.interface_fingerprint
    )
    final = result.log[-1] if result.log else {}
    manifest = build_manifest(
        "stage2",
        experiment,
        stage1_dir=str(Path(stage1.directory).resolve()),
        stage1_hash=stage1.manifest["stage1_hash"],
        interface_fingerprint=codec.interface_fingerprint,
        ablation=codec.ablation,
        channel=experiment.channel.type,
        cbr=f"{experiment.channel.cbr.numerator}/{experiment.channel.cbr.denominator}",
        summary={
            "final_loss": final.get("loss"),
            "psnr_val": final.get("psnr_val"),
            "trainable_parameters": codec.trainable_parameters(),
            "stage1_param_checksum": parameter_checksum(stage1.codec),
        },
    )
    write_manifest(directory, manifest)
    logger.info(f"💾 Stage-2 artifacts written to {directory}")
    return directory


def load_stage2(directory):
    """Загрузка второй стадии с повторной проверкой её первой стадии"""
    directory = Path(directory)
    manifest = read_manifest(directory, kind="stage2")
    stage1 = load_stage1(manifest["stage1_dir"])

    if stage1.manifest["stage1_hash"] != manifest["stage1_hash"]:
        raise ArtifactIncompatibleError(
            f"stage-1 run {manifest['stage1_dir']} changed since {directory} was trained"
        )
    if stage1.spec.fingerprint != manifest["interface_fingerprint"]:
        raise ArtifactIncompatibleError(
            f"interface of {manifest['stage1_dir']} differs from the one {directory} was trained on"
        )
    frozen = manifest.get("summary", {}).get("stage1_param_checksum")
    if frozen is not None and parameter_checksum(stage1.codec) != frozen:
        raise ArtifactIncompatibleError(f"stage-1 weights changed under {directory}")

    run_experiment = experiment_from_dict(manifest["config"], resolve=False)
    checkpoint = load_checkpoint(directory / CHANNEL_CHECKPOINT, "stage2")
    codec = ChannelCodec.from_config(run_experiment, stage1.spec, ablation=manifest["ablation"])
    _restore(codec, checkpoint, directory / CHANNEL_CHECKPOINT)
    codec.eval()
    return Stage2Artifacts(directory, run_experiment, stage1, codec, manifest)


def artifact_summary(artifacts):
    """Provenance entry recorded in eval/sweep manifests"""
    if not isinstance(artifacts, Stage2Artifacts):
        raise ArtifactError("expected stage-2 artifacts")
    return {
        "stage2_dir": str(Path(artifacts.directory).resolve()),
        "stage2_run_id": artifacts.manifest["run_id"],
        "stage1_dir": artifacts.manifest["stage1_dir"],
        "channel": artifacts.channel,
        "cbr": artifacts.manifest["cbr"],
        "ablation": artifacts.ablation,
        "interface_fingerprint": artifacts.manifest["interface_fingerprint"],
        "checkpoint_sha256": artifacts.manifest["artifacts"].get(CHANNEL_CHECKPOINT),
    }
