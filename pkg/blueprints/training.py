"""
=============================================================================
TRAINING BLUEPRINT
=============================================================================
train-stage1, train-stage2, export-interface
"""

import csv
import logging
from pathlib import Path

import click
from flask import Blueprint

from models.channel_codec import ABLATIONS, train_stage2
from models.experiment import load_experiment_config, stage1_hash
from models.interface import save_spec
from models.source_codec import train_stage1
from utils.artifacts import (
    TRAIN_LOG_FILE,
    check_output_file,
    load_stage1,
    prepare_output_dir,
    save_stage1,
    save_stage2,
)
from utils.channel import CHANNEL_TYPES
from utils.data import load_for_experiment
from utils.errors import ArtifactIncompatibleError
from utils.helpers import format_duration, parameter_checksum

logger = logging.getLogger(__name__)

# =============================================================================
# BLUEPRINT
# =============================================================================
training_bp = Blueprint("training", __name__, cli_group=None)


def default_output(experiment, leaf):
    return Path(experiment.output_dir) / experiment.name / leaf


def _elapsed(log):
    return format_duration(sum(record["seconds"] for record in log))


def run_inputs(experiment, config_path, *extra):
    """Paths a command reads; prepare_output_dir never clears a directory holding one"""
    inputs = [config_path, *extra]
    if experiment.dataset.root:
        inputs.append(experiment.dataset.root)
    return inputs


# =============================================================================
# STAGE 1
# =============================================================================


@training_bp.cli.command("train-stage1")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def train_stage1_command(config_path, output, seed, force):
    """Train the source codec and the BSC interface"""
    logger.info(f"🎯 train-stage1 config={config_path}")
    experiment = load_experiment_config(config_path, overrides={"seed": seed})
    out = prepare_output_dir(
        output or default_output(experiment, "stage1"),
        force,
        kind="stage1",
        inputs=run_inputs(experiment, config_path),
    )
    dataset = load_for_experiment(experiment)

    result = train_stage1(
        dataset,
        experiment,
        log_path=out / TRAIN_LOG_FILE,
        fingerprint=stage1_hash(experiment),
    )
    save_stage1(out, result, experiment)

    final = result.log[-1]
    click.echo(
        f"stage1 done in {_elapsed(result.log)}: loss={final['loss']:.5f} "
        f"mean_eps={final['mean_eps']:.4f} psnr_val={final['psnr_val']:.2f} dB"
    )
    click.echo(f"artifacts: {out}")


# =============================================================================
# STAGE 2
# =============================================================================


@training_bp.cli.command("train-stage2")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--stage1-dir", required=True, type=click.Path(file_okay=False))
@click.option("--interface", "interface_path", type=click.Path(dir_okay=False), default=None)
@click.option("--channel", type=click.Choice(CHANNEL_TYPES), default=None)
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None)
@click.option("--output", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def train_stage2_command(config_path, stage1_dir, interface_path, channel, ablation, output, seed, force):
    """Train the channel codec against a frozen stage-1 run"""
    logger.info(f"🎯 train-stage2 config={config_path} stage1={stage1_dir}")
    experiment = load_experiment_config(
        config_path,
        overrides={
            "channel.type": channel,
            "channel.ablation": ablation,
            "stage2.seed": seed,
        },
    )
    stage1 = load_stage1(stage1_dir, experiment, interface_path=interface_path)

    ch = experiment.channel
    leaf = f"stage2_{ch.type}_{ch.ablation}"
    inputs = run_inputs(experiment, config_path, *stage1.inputs)
    if interface_path:
        inputs.append(interface_path)
    out = prepare_output_dir(
        output or default_output(experiment, leaf), force, kind="stage2", inputs=inputs
    )
    dataset = load_for_experiment(experiment)

    frozen = parameter_checksum(stage1.codec)
    result = train_stage2(
        dataset,
        stage1.codec,
        stage1.spec,
        experiment,
        log_path=out / TRAIN_LOG_FILE,
    )
    if parameter_checksum(stage1.codec) != frozen:
        raise ArtifactIncompatibleError("stage-1 parameters changed during stage-2 training")
    save_stage2(out, result, experiment, stage1)
    logger.info(f"✅ Stage 2 ({ch.type}, {ch.ablation}) finished: {out}")

    final = result.log[-1]
    psnr_text = ", ".join(f"{snr} dB: {p:.2f}" for snr, p in final["psnr_val"].items())
    click.echo(
        f"stage2 ({ch.type}, {ch.ablation}) done in {_elapsed(result.log)}: "
        f"loss={final['loss']:.5f} psnr [{psnr_text}]"
    )
    click.echo(f"artifacts: {out}")


# =============================================================================
# INTERFACE EXPORT
# =============================================================================


@training_bp.cli.command("export-interface")
@click.option("--stage1-dir", required=True, type=click.Path(file_okay=False))
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.option("--force", is_flag=True, help="Overwrite existing files")
def export_interface_command(stage1_dir, output, force):
    """Copy the frozen interface spec out of a stage-1 run (plus a CSV view)"""
    logger.info(f"🎯 export-interface stage1={stage1_dir}")
    stage1 = load_stage1(stage1_dir)
    spec = stage1.spec
    target = check_output_file(output, force)
    table = check_output_file(f"{target}.csv", force)

    save_spec(spec, target)
    importance = spec.importance()
    with open(table, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bit", "epsilon", "importance"])
        for i, (eps, imp) in enumerate(zip(spec.epsilon.tolist(), importance.tolist())):
            writer.writerow([i, f"{eps:.17g}", f"{imp:.17g}"])

    summary = spec.summary()
    click.echo(
        f"interface M={summary['bit_count']} mean_eps={summary['mean_eps']:.4f} "
        f"fingerprint={summary['fingerprint'][:16]} -> {target}"
    )
