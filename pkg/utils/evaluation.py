"""
Evaluation harness: per-cell pipeline evaluation, SNR sweeps, the IAN
ablation, the bit-importance flip test, CSV tables and PSNR-vs-SNR plots.

A cell is (channel, cbr, snr_db, seed). Every cell draws its channel noise
from its own generator, so results do not depend on evaluation order.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack, contextmanager
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from models.channel_codec import ABLATIONS, train_stage2
from utils.errors import ConfigError, MissingModelError
from utils.metrics import PSNR_CAP_DB, bit_error_rate, psnr_per_image

logger = logging.getLogger(__name__)

RESULT_FIELDS = [
    "arm",
    "channel",
    "cbr",
    "snr_db",
    "seed",
    "mean_psnr",
    "std_psnr",
    "mean_ber",
    "count",
]
PER_IMAGE_FIELDS = ["arm", "channel", "cbr", "snr_db", "seed", "index", "psnr", "ber"]


def format_cbr(ratio):
    ratio = Fraction(ratio)
    return f"{ratio.numerator}/{ratio.denominator}"


def cell_stream_seed(seed, snr_db):
    """Seed of the channel-noise generator owned by one (seed, snr) cell"""
    return int(seed) * 1_000_003 + int(round(float(snr_db) * 1000)) % 1_000_003


# ========================================
# ТИПЫ
# ========================================


@dataclass(frozen=True)
class SweepCell:
    channel: str
    cbr: Fraction
    snr_db: float
    seed: int

    @property
    def model_key(self):
        return (self.channel, Fraction(self.cbr))

    def stream_seed(self):
        return cell_stream_seed(self.seed, self.snr_db)


@dataclass
class SweepGrid:
    channels: list
    cbrs: list
    snrs: list
    seeds: list

    @classmethod
    def from_config(cls, experiment):
        ev = experiment.eval
        return cls(
            channels=list(ev.channels),
            cbrs=[Fraction(c) for c in ev.cbrs],
            snrs=[float(s) for s in ev.snrs],
            seeds=[int(s) for s in ev.seeds],
        )

    def cells(self):
        for channel in self.channels:
            for ratio in self.cbrs:
                for snr_db in self.snrs:
                    for seed in self.seeds:
                        yield SweepCell(channel, Fraction(ratio), float(snr_db), int(seed))

    def model_keys(self):
        return [(channel, Fraction(ratio)) for channel in self.channels for ratio in self.cbrs]


@dataclass
class CellResult:
    arm: str
    channel: str
    cbr: str
    snr_db: float
    seed: int
    mean_psnr: float
    std_psnr: float
    mean_ber: float
    count: int


@dataclass
class SweepResult:
    rows: list
    per_image: list = field(default_factory=list)
    psnr_cap: float = PSNR_CAP_DB

    def cell(self, channel, cbr, snr_db, seed, arm=None):
        for row in self.rows:
            if (
                row.channel == channel
                and row.cbr == format_cbr(cbr)
                and row.snr_db == float(snr_db)
                and row.seed == int(seed)
                and (arm is None or row.arm == arm)
            ):
                return row
        raise KeyError((channel, format_cbr(cbr), snr_db, seed, arm))

    def curve(self, channel, cbr, arm=None):
        """[(snr_db, mean PSNR over seeds)] sorted by SNR"""
        rows = [
            r
            for r in self.rows
            if r.channel == channel
            and r.cbr == format_cbr(cbr)
            and (arm is None or r.arm == arm)
        ]
        return mean_over_seeds(rows)

    def table(self):
        return [asdict(row) for row in self.rows]


def mean_over_seeds(rows):
    by_snr = {}
    for row in rows:
        by_snr.setdefault(float(row.snr_db), []).append(float(row.mean_psnr))
    return [(snr, math.fsum(v) / len(v)) for snr, v in sorted(by_snr.items())]


# ========================================
# ОЦЕНКА ЯЧЕЙКИ
# ========================================


@contextmanager
def eval_mode(module):
    """Switch a module to eval for the block and restore its previous mode"""
    was_training = module.training
    if was_training:
        module.eval()
    try:
        yield module
    finally:
        if was_training:
            module.train()


@torch.no_grad()
def evaluate_pipeline(source, codec, images, channel, snr_db, seed, batch_size=256, cap=PSNR_CAP_DB):
    """
    Full hard-decision pipeline for one cell:
    binarize(encode) -> map -> channel -> demap -> binarize -> decode.

    Returns one record per image: {index, psnr, ber}.
    """
    generator = torch.Generator().manual_seed(cell_stream_seed(seed, snr_db))

    records = []
    with eval_mode(codec):
        for start in range(0, len(images), batch_size):
            s = images[start : start + batch_size]
            b = source.transmit_bits(s)
            probs, _ = codec(b, channel, snr_db, generator)
            b_hat = source.binarize(probs)
            scores = psnr_per_image(s, source.decode(b_hat), cap=cap)
            errors = bit_error_rate(b, b_hat).reshape(-1)
            for i, (p, e) in enumerate(zip(scores.tolist(), errors.tolist())):
                records.append({"index": start + i, "psnr": float(p), "ber": float(e)})
    return records


def aggregate(records):
    """Deterministic reduction of per-image records, in index order"""
    if not records:
        raise ValueError("cannot aggregate an empty cell")
    ordered = sorted(records, key=lambda r: r["index"])
    psnrs = np.array([r["psnr"] for r in ordered], dtype=np.float64)
    bers = np.array([r["ber"] for r in ordered], dtype=np.float64)
    return {
        "mean_psnr": math.fsum(psnrs) / len(psnrs),
        "std_psnr": float(np.std(psnrs)),
        "mean_ber": math.fsum(bers) / len(bers),
        "count": len(ordered),
    }


def _pipeline_parts(model):
    """(source, channel codec) from Stage2Artifacts or a plain pair"""
    if isinstance(model, tuple):
        return model
    return model.source, model.codec


def _model_arm(model, default="full"):
    return getattr(model, "ablation", None) or getattr(
        _pipeline_parts(model)[1], "ablation", default
    )


def run_sweep(models, grid, images, batch_size=256, workers=1, cap=PSNR_CAP_DB):
    """
    Прогон сетки (канал, CBR, SNR, seed)

    Args:
        models: {(channel, Fraction cbr): Stage2Artifacts или (source, codec)}
        grid: SweepGrid
        images: Тензор (N, C, H, W) тестовых изображений
        batch_size: Размер пакета оценки
        workers: Число потоков; результат от него не зависит
        cap: Потолок PSNR в дБ

    Returns:
        SweepResult со строками в порядке сетки

    Raises:
        MissingModelError: Сразу для всех (channel, cbr) без модели
    """
    models = {(channel, Fraction(ratio)): m for (channel, ratio), m in models.items()}
    missing = [
        f"{channel}@{format_cbr(ratio)}"
        for channel, ratio in grid.model_keys()
        if (channel, ratio) not in models
    ]
    if missing:
        raise MissingModelError(
            f"no trained model for {len(missing)} sweep cell(s): {', '.join(missing)}",
            details={"missing": missing},
        )
    if len(images) == 0:
        raise ConfigError("evaluation split is empty")

    cells = list(grid.cells())

    def evaluate(cell):
        model = models[cell.model_key]
        source, codec = _pipeline_parts(model)
        records = evaluate_pipeline(
            source, codec, images, cell.channel, cell.snr_db, cell.seed, batch_size, cap
        )
        return cell, _model_arm(model), records

    logger.info(f"🔬 Sweep: {len(cells)} cells over {len(images)} images, workers={workers}")
    # modes are switched once here; worker threads only read them
    with ExitStack() as stack:
        for model in models.values():
            stack.enter_context(eval_mode(_pipeline_parts(model)[1]))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(evaluate, cells))
        else:
            outcomes = [evaluate(cell) for cell in cells]

    rows, per_image = [], []
    for cell, arm, records in outcomes:
        stats = aggregate(records)
        rows.append(
            CellResult(
                arm=arm,
                channel=cell.channel,
                cbr=format_cbr(cell.cbr),
                snr_db=cell.snr_db,
                seed=cell.seed,
                **stats,
            )
        )
        for record in records:
            per_image.append(
                {
                    "arm": arm,
                    "channel": cell.channel,
                    "cbr": format_cbr(cell.cbr),
                    "snr_db": cell.snr_db,
                    "seed": cell.seed,
                    **record,
                }
            )
    return SweepResult(rows=rows, per_image=per_image, psnr_cap=cap)


# ========================================
# АБЛЯЦИЯ
# ========================================


@dataclass
class AblationResult:
    sweep: SweepResult
    parameter_counts: dict
    interface_fingerprints: dict
    codecs: dict = field(default_factory=dict)

    def mean_psnr(self, arm, snr_db):
        values = [
            r.mean_psnr for r in self.sweep.rows if r.arm == arm and r.snr_db == float(snr_db)
        ]
        return math.fsum(values) / len(values)


def run_ablation(dataset, source, spec, experiment, arms=ABLATIONS, seeds=None, snrs=None, log_dir=None):
    """
    Train and evaluate every arm on the shared stage-1 interface with
    identical seeds and data order. Each training seed is also the
    evaluation seed of its rows.
    """
    seeds = list(seeds if seeds is not None else experiment.eval.seeds)
    snrs = [float(s) for s in (snrs if snrs is not None else experiment.eval.snrs)]
    channel = experiment.channel.type
    ratio = experiment.channel.cbr

    rows, per_image = [], []
    parameter_counts, fingerprints, codecs = {}, {}, {}
    for arm in arms:
        for seed in seeds:
            run = replace(experiment, stage2=replace(experiment.stage2, seed=int(seed)))
            log_path = None
            if log_dir is not None:
                log_path = Path(log_dir) / f"{arm}_seed{seed}.jsonl"
            logger.info(f"🧪 Ablation arm={arm} seed={seed}")
            result = train_stage2(dataset, source, spec, run, ablation=arm, log_path=log_path)
            codec = result.codec
            parameter_counts[arm] = codec.trainable_parameters()
            fingerprints[arm] = codec.interface_fingerprint
            codecs[(arm, seed)] = codec

            grid = SweepGrid([channel], [ratio], snrs, [int(seed)])
            sweep = run_sweep(
                {(channel, ratio): (source, codec)},
                grid,
                dataset.test,
                batch_size=experiment.eval.batch_size,
                cap=experiment.eval.psnr_cap,
            )
            rows.extend(sweep.rows)
            per_image.extend(sweep.per_image)

    return AblationResult(
        sweep=SweepResult(rows, per_image, experiment.eval.psnr_cap),
        parameter_counts=parameter_counts,
        interface_fingerprints=fingerprints,
        codecs=codecs,
    )


# ========================================
# ВАЖНОСТЬ БИТОВ
# ========================================


@torch.no_grad()
def bit_flip_sensitivity(source, spec, images, fraction=0.1):
    """
    Flip the lowest-eps and the highest-eps `fraction` of bit positions in
    the noiseless binary code and compare the PSNR drops.
    """
    M = spec.bit_count
    k = max(1, int(round(fraction * M)))
    order = np.argsort(spec.epsilon, kind="stable")
    low = torch.as_tensor(order[:k].copy())
    high = torch.as_tensor(order[-k:].copy())

    b = source.transmit_bits(images)

    def score(bits):
        return float(psnr_per_image(images, source.decode(bits)).mean())

    def flipped(positions):
        out = b.clone()
        out[:, positions] = 1 - out[:, positions]
        return out

    baseline = score(b)
    low_psnr = score(flipped(low))
    high_psnr = score(flipped(high))
    return {
        "flipped_bits": k,
        "baseline_psnr": baseline,
        "low_eps_psnr": low_psnr,
        "high_eps_psnr": high_psnr,
        "low_eps_drop": baseline - low_psnr,
        "high_eps_drop": baseline - high_psnr,
    }


# ========================================
# ТАБЛИЦЫ И ГРАФИКИ
# ========================================


def _write_csv(path, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
    return path


def write_tables(result, directory):
    directory = Path(directory)
    results = _write_csv(directory / "results.csv", RESULT_FIELDS, result.table())
    per_image = _write_csv(directory / "per_image.csv", PER_IMAGE_FIELDS, result.per_image)
    return results, per_image


def read_table(path):
    """results.csv rows with numeric columns converted"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"table not found: {path}")
    with path.open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = {"channel", "cbr", "snr_db", "mean_psnr"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"table {path} lacks columns: {sorted(missing)}")
        rows = []
        for row in reader:
            rows.append(
                CellResult(
                    arm=row.get("arm") or "full",
                    channel=row["channel"],
                    cbr=row["cbr"],
                    snr_db=float(row["snr_db"]),
                    seed=int(row.get("seed") or 0),
                    mean_psnr=float(row["mean_psnr"]),
                    std_psnr=float(row.get("std_psnr") or 0.0),
                    mean_ber=float(row.get("mean_ber") or 0.0),
                    count=int(row.get("count") or 0),
                )
            )
    return rows


def render_plots(rows, directory):
    """One PSNR-vs-SNR figure per (channel, cbr); one line per arm (seed mean)"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    groups = {}
    for row in rows:
        groups.setdefault((row.channel, row.cbr), {}).setdefault(row.arm, []).append(row)

    paths = []
    for (channel, ratio), arms in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5, 3.6), constrained_layout=True)
        for arm, arm_rows in sorted(arms.items()):
            curve = mean_over_seeds(arm_rows)
            ax.plot([s for s, _ in curve], [p for _, p in curve], marker="o", label=arm)
        ax.set_title(f"{channel.upper()}, CBR = {ratio}")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("PSNR (dB)")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", fontsize=8)

        path = directory / f"psnr_{channel}_cbr{ratio.replace('/', '-')}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


@torch.no_grad()
def save_reconstructions(source, codec, images, channel, snr_db, directory, count=4, seed=0):
    """Original | reconstruction PNG pairs for the first `count` images"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    s = images[:count]
    generator = torch.Generator().manual_seed(int(seed))
    probs, _ = codec(source.transmit_bits(s), channel, snr_db, generator)
    s_hat = source.decode(source.binarize(probs))

    paths = []
    for i in range(len(s)):
        pair = torch.cat([s[i], s_hat[i]], dim=-1).permute(1, 2, 0).clamp(0, 1).cpu().numpy()
        if pair.shape[-1] == 1:
            pair = pair[..., 0]
        path = directory / f"recon_{i:03d}_{channel}_{snr_db:g}dB.png"
        plt.imsave(path, pair)
        paths.append(path)
    return paths
