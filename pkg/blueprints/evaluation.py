"""
=============================================================================
EVALUATION BLUEPRINT
=============================================================================
eval, sweep, ablate, plot
"""

import logging

import click
from flask import Blueprint

from blueprints.training import default_output, run_inputs
from models.experiment import load_experiment_config
from utils.artifacts import (
    artifact_summary,
    build_manifest,
    load_stage1,
    load_stage2,
    prepare_output_dir,
    save_checkpoint,
    write_manifest,
)
from utils.channel import CHANNEL_TYPES
from utils.data import load_for_experiment
from utils.errors import ConfigError
from utils.evaluation import (
    SweepGrid,
    format_cbr,
    read_table,
    render_plots,
    run_ablation,
    run_sweep,
    save_reconstructions,
    write_tables,
)

logger = logging.getLogger(__name__)

# =============================================================================
# BLUEPRINT
# =============================================================================
evaluation_bp = Blueprint("evaluation", __name__, cli_group=None)


def _eval_images(experiment, source):
    dataset = load_for_experiment(experiment, name=experiment.eval.dataset)
    H, W, C = source.image_shape
    if tuple(dataset.image_shape) != (H, W, C):
        raise ConfigError(
            f"eval dataset {dataset.name} has shape {dataset.image_shape}, "
            f"the source codec expects {(H, W, C)}"
        )
    return dataset.test


def _echo_rows(result):
    for row in result.rows:
        click.echo(
            f"{row.arm:>8} {row.channel:>8} cbr={row.cbr:>5} snr={row.snr_db:5.1f} "
            f"seed={row.seed} psnr={row.mean_psnr:6.2f}±{row.std_psnr:.2f} ber={row.mean_ber:.4f}"
        )


def _publish(out, result, experiment, kind, models, **fields):
    write_tables(result, out)
    render_plots(result.rows, out / "plots")
    manifest = build_manifest(
        kind,
        experiment,
        seeds=sorted({row.seed for row in result.rows}),
        psnr_cap_db=float(result.psnr_cap),
        models=models,
        **fields,
    )
    write_manifest(out, manifest)


# =============================================================================
# EVAL
# =============================================================================


@evaluation_bp.cli.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--stage2-dir", required=True, type=click.Path(file_okay=False))
@click.option("--snr", "snrs", type=float, multiple=True, help="Repeatable; default eval.snrs")
@click.option("--seed", type=int, default=None, help="Single evaluation seed")
@click.option("--output", type=click.Path(file_okay=False), default=None)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
@click.option("--save-images", type=click.IntRange(min=0), default=0)
def eval_command(config_path, stage2_dir, snrs, seed, output, force, save_images):
    """Evaluate one trained pipeline over SNRs and seeds"""
    logger.info(f"🎯 eval stage2={stage2_dir}")
    experiment = load_experiment_config(
        config_path,
        overrides={
            "eval.snrs": list(snrs) or None,
            "eval.seeds": [seed] if seed is not None else None,
        },
    )
    artifacts = load_stage2(stage2_dir)
    out = prepare_output_dir(
        output or default_output(experiment, "eval"), force, kind="eval",
        inputs=run_inputs(experiment, config_path, *artifacts.inputs),
    )
    images = _eval_images(experiment, artifacts.source)

    grid = SweepGrid(
        channels=[artifacts.channel],
        cbrs=[artifacts.cbr],
        snrs=[float(s) for s in experiment.eval.snrs],
        seeds=[int(s) for s in experiment.eval.seeds],
    )
    result = run_sweep(
        {(artifacts.channel, artifacts.cbr): artifacts},
        grid,
        images,
        batch_size=experiment.eval.batch_size,
        workers=experiment.eval.workers,
        cap=experiment.eval.psnr_cap,
    )
    if save_images:
        for snr_db in grid.snrs:
            save_reconstructions(
                artifacts.source,
                artifacts.codec,
                images,
                artifacts.channel,
                snr_db,
                out / "images",
                count=save_images,
                seed=grid.seeds[0],
            )
    _publish(out, result, experiment, "eval", [artifact_summary(artifacts)])

    _echo_rows(result)
    click.echo(f"results: {out}")


# =============================================================================
# SWEEP
# =============================================================================


@evaluation_bp.cli.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--stage2-dir", "stage2_dirs", required=True, multiple=True, type=click.Path(file_okay=False))
@click.option("--channel", type=click.Choice(CHANNEL_TYPES), default=None)
@click.option("--cbr", "ratio", type=str, default=None, help="e.g. 1/24")
@click.option("--output", type=click.Path(file_okay=False), default=None)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def sweep_command(config_path, stage2_dirs, channel, ratio, output, force):
    """Evaluate a (channel x cbr x snr x seed) grid over trained pipelines"""
    logger.info(f"🎯 sweep over {len(stage2_dirs)} stage-2 run(s)")
    experiment = load_experiment_config(
        config_path,
        overrides={
            "eval.channels": [channel] if channel else None,
            "eval.cbrs": [ratio] if ratio else None,
        },
    )

    models = {}
    for directory in stage2_dirs:
        artifacts = load_stage2(directory)
        key = (artifacts.channel, artifacts.cbr)
        if key in models:
            raise ConfigError(
                f"two stage-2 runs for {artifacts.channel}@{format_cbr(artifacts.cbr)}: "
                f"{models[key].directory} and {directory}"
            )
        models[key] = artifacts

    grid = SweepGrid.from_config(experiment)
    loaded = [path for artifacts in models.values() for path in artifacts.inputs]
    inputs = run_inputs(experiment, config_path, *loaded)
    out = prepare_output_dir(
        output or default_output(experiment, "sweep"), force, kind="sweep", inputs=inputs
    )

    # all pipelines of a sweep share the dataset image shape
    first = next(iter(models.values()))
    images = _eval_images(experiment, first.source)
    result = run_sweep(
        models,
        grid,
        images,
        batch_size=experiment.eval.batch_size,
        workers=experiment.eval.workers,
        cap=experiment.eval.psnr_cap,
    )
    used = [artifact_summary(models[key]) for key in grid.model_keys()]
    _publish(out, result, experiment, "sweep", used)

    _echo_rows(result)
    click.echo(f"results: {out}")


# =============================================================================
# ABLATION
# =============================================================================


@evaluation_bp.cli.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--stage1-dir", required=True, type=click.Path(file_okay=False))
@click.option("--channel", type=click.Choice(CHANNEL_TYPES), default=None)
@click.option("--output", type=click.Path(file_okay=False), default=None)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def ablate_command(config_path, stage1_dir, channel, output, force):
    """Train and compare full / no-iattn / no-ian on one stage-1 interface"""
    logger.info(f"🎯 ablate stage1={stage1_dir}")
    experiment = load_experiment_config(config_path, overrides={"channel.type": channel})
    stage1 = load_stage1(stage1_dir, experiment)
    out = prepare_output_dir(
        output or default_output(experiment, "ablation"), force, kind="ablation",
        inputs=run_inputs(experiment, config_path, *stage1.inputs),
    )
    dataset = load_for_experiment(experiment)

    ablation = run_ablation(dataset, stage1.codec, stage1.spec, experiment, log_dir=out / "logs")

    (out / "arms").mkdir(exist_ok=True)
    for (arm, seed), codec in sorted(ablation.codecs.items()):
        save_checkpoint(
            out / "arms" / f"{arm}_seed{seed}.pt",
            "stage2",
            codec,
            experiment,
            codec.interface_fingerprint,
        )

    models = [
        {
            "arm": arm,
            "trainable_parameters": ablation.parameter_counts[arm],
            "interface_fingerprint": ablation.interface_fingerprints[arm],
        }
        for arm in ablation.parameter_counts
    ]
    _publish(
        out,
        ablation.sweep,
        experiment,
        "ablation",
        models,
        stage1_dir=str(stage1.directory.resolve()),
        stage1_hash=stage1.manifest["stage1_hash"],
        interface_fingerprint=stage1.spec.fingerprint,
        channel=experiment.channel.type,
        cbr=format_cbr(experiment.channel.cbr),
    )

    for arm, count in ablation.parameter_counts.items():
        curve = ablation.sweep.curve(experiment.channel.type, experiment.channel.cbr, arm=arm)
        points = ", ".join(f"{snr:g} dB: {p:.2f}" for snr, p in curve)
        click.echo(f"{arm:>8} params={count} psnr [{points}]")
    click.echo(f"results: {out}")


# =============================================================================
# PLOT
# =============================================================================


@evaluation_bp.cli.command("plot")
@click.option("--table", "table_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
def plot_command(table_path, output, force):
    """Render PSNR-vs-SNR plots from a results table"""
    logger.info(f"🎯 plot table={table_path}")
    rows = read_table(table_path)
    if not rows:
        raise ConfigError(f"table {table_path} has no rows")
    out = prepare_output_dir(output, force, kind="plot", inputs=[table_path])
    for path in render_plots(rows, out):
        click.echo(f"plot: {path}")

