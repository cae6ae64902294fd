"""
========================================
EXPERIMENT CONFIG
========================================
Дерево dataclass-ов эксперимента, JSON-файл на диске, валидация через
marshmallow. resolve_config материализует все производные значения
(L, M, lr второй стадии, корень данных), чтобы манифест был самодостаточным.
"""

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from marshmallow import (
    Schema,
    ValidationError,
    fields,
    post_load,
    pre_load,
    validate,
    validates_schema,
)

from config import data_root_override
from models.backbones import BACKBONES
from models.channel_codec import ABLATIONS
from utils.channel import CHANNEL_TYPES, cbr, symbols_for_cbr
from utils.data import DATASETS, STANDARD_SHAPE
from utils.errors import ConfigError, DatasetMissingError
from utils.helpers import fingerprint

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CBR_TOLERANCE = 1e-9
STAGE2_LR = {"awgn": 1e-4, "rayleigh": 5e-4}


# ========================================
# DATACLASSES
# ========================================


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    root: str = None
    image_shape: tuple = (8, 8, 3)
    n_train: int = 512
    n_test: int = 64
    subsample: int = None
    download: bool = False


@dataclass
class SourceConfig:
    bit_count: int = None
    backbone: str = "swin"
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    window_size: int = 4
    patch_size: int = 2

    def backbone_options(self):
        if self.backbone == "conv":
            return {"embed_dim": self.embed_dim}
        return {
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "window_size": self.window_size,
            "patch_size": self.patch_size,
        }


@dataclass
class ChannelConfig:
    type: str = "awgn"
    cbr: Fraction = Fraction(1, 4)
    symbol_count: int = None
    bits_per_symbol: int = 2
    bits_per_token: int = 16
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    se_reduction: int = 4
    ablation: str = "full"


@dataclass
class SnrConfig:
    mode: str = "uniform"
    low: float = 5.0
    high: float = 20.0
    fixed: float = None
    validation_snrs: list = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0])


@dataclass
class Stage1Config:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    interface_lr: float = None
    lam: float = 1.0
    eps_init: float = 0.25


@dataclass
class Stage2Config:
    epochs: int = 10
    batch_size: int = 128
    lr: float = None
    seed: int = None


@dataclass
class EvalConfig:
    dataset: str = None
    channels: list = None
    cbrs: list = None
    snrs: list = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    batch_size: int = 256
    psnr_cap: float = 100.0
    workers: int = 1


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    snr: SnrConfig = field(default_factory=SnrConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def stage2_seed(self):
        return self.seed if self.stage2.seed is None else self.stage2.seed


# ========================================
# SCHEMAS
# ========================================


class CBRField(fields.Field):
    """'1/24', '0.25', 0.25 -> Fraction; dumped as 'n/d'"""

    default_error_messages = {"invalid": "Not a valid channel bandwidth ratio."}

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return f"{value.numerator}/{value.denominator}"

    def _deserialize(self, value, attr, data, **kwargs):
        if isinstance(value, bool):
            raise self.make_error("invalid")
        try:
            if isinstance(value, float):
                ratio = Fraction(value).limit_denominator(1 << 20)
            else:
                ratio = Fraction(str(value).strip())
        except (ValueError, ZeroDivisionError, TypeError):
            raise self.make_error("invalid")
        if ratio <= 0:
            raise ValidationError("CBR must be positive.")
        return ratio


def _positive():
    return validate.Range(min=1)


class DatasetSchema(Schema):
    name = fields.String(load_default="synthetic", validate=validate.OneOf(DATASETS))
    root = fields.String(load_default=None, allow_none=True)
    image_shape = fields.List(
        fields.Integer(validate=_positive()),
        load_default=[8, 8, 3],
        validate=validate.Length(equal=3),
    )
    n_train = fields.Integer(load_default=512, validate=_positive())
    n_test = fields.Integer(load_default=64, validate=validate.Range(min=0))
    subsample = fields.Integer(load_default=None, allow_none=True, validate=_positive())
    download = fields.Boolean(load_default=False)

    @post_load
    def make(self, data, **kwargs):
        data["image_shape"] = tuple(data["image_shape"])
        return DatasetConfig(**data)


class SourceSchema(Schema):
    bit_count = fields.Integer(load_default=None, allow_none=True, validate=_positive())
    backbone = fields.String(load_default="swin", validate=validate.OneOf(BACKBONES))
    embed_dim = fields.Integer(load_default=64, validate=_positive())
    depth = fields.Integer(load_default=2, validate=_positive())
    num_heads = fields.Integer(load_default=4, validate=_positive())
    window_size = fields.Integer(load_default=4, validate=_positive())
    patch_size = fields.Integer(load_default=2, validate=_positive())

    @validates_schema
    def check_heads(self, data, **kwargs):
        if data["embed_dim"] % data["num_heads"]:
            raise ValidationError("embed_dim must be divisible by num_heads", "num_heads")

    @post_load
    def make(self, data, **kwargs):
        return SourceConfig(**data)


class ChannelSchema(Schema):
    type = fields.String(load_default="awgn", validate=validate.OneOf(CHANNEL_TYPES))
    cbr = CBRField(load_default=Fraction(1, 4))
    symbol_count = fields.Integer(load_default=None, allow_none=True, validate=_positive())
    bits_per_symbol = fields.Integer(load_default=2, validate=_positive())
    bits_per_token = fields.Integer(load_default=16, validate=_positive())
    embed_dim = fields.Integer(load_default=64, validate=_positive())
    depth = fields.Integer(load_default=2, validate=_positive())
    num_heads = fields.Integer(load_default=4, validate=_positive())
    se_reduction = fields.Integer(load_default=4, validate=_positive())
    ablation = fields.String(load_default="full", validate=validate.OneOf(ABLATIONS))

    @validates_schema
    def check_heads(self, data, **kwargs):
        if data["embed_dim"] % data["num_heads"]:
            raise ValidationError("embed_dim must be divisible by num_heads", "num_heads")

    @post_load
    def make(self, data, **kwargs):
        return ChannelConfig(**data)


class SnrSchema(Schema):
    mode = fields.String(load_default="uniform", validate=validate.OneOf(("uniform", "fixed")))
    low = fields.Float(load_default=5.0)
    high = fields.Float(load_default=20.0)
    fixed = fields.Float(load_default=None, allow_none=True)
    validation_snrs = fields.List(
        fields.Float(), load_default=[5.0, 10.0, 15.0, 20.0], validate=validate.Length(min=1)
    )

    @validates_schema
    def check_range(self, data, **kwargs):
        if data["low"] > data["high"]:
            raise ValidationError(
                f"SNR range low ({data['low']}) must not exceed high ({data['high']})", "high"
            )
        if data["mode"] == "fixed" and data.get("fixed") is None:
            raise ValidationError("fixed SNR mode needs a value", "fixed")

    @post_load
    def make(self, data, **kwargs):
        return SnrConfig(**data)


class Stage1Schema(Schema):
    epochs = fields.Integer(load_default=10, validate=_positive())
    batch_size = fields.Integer(load_default=128, validate=_positive())
    lr = fields.Float(load_default=1e-4, validate=validate.Range(min=0, min_inclusive=False))
    interface_lr = fields.Float(
        load_default=None, allow_none=True, validate=validate.Range(min=0, min_inclusive=False)
    )
    lam = fields.Float(data_key="lambda", load_default=1.0, validate=validate.Range(min=0))
    eps_init = fields.Float(
        load_default=0.25,
        validate=validate.Range(min=0, max=0.5, min_inclusive=False, max_inclusive=False),
    )

    @post_load
    def make(self, data, **kwargs):
        return Stage1Config(**data)


class Stage2Schema(Schema):
    epochs = fields.Integer(load_default=10, validate=_positive())
    batch_size = fields.Integer(load_default=128, validate=_positive())
    lr = fields.Float(
        load_default=None, allow_none=True, validate=validate.Range(min=0, min_inclusive=False)
    )
    seed = fields.Integer(load_default=None, allow_none=True)

    @post_load
    def make(self, data, **kwargs):
        return Stage2Config(**data)


class EvalSchema(Schema):
    dataset = fields.String(load_default=None, allow_none=True, validate=validate.OneOf(DATASETS))
    channels = fields.List(
        fields.String(validate=validate.OneOf(CHANNEL_TYPES)), load_default=None, allow_none=True
    )
    cbrs = fields.List(CBRField(), load_default=None, allow_none=True)
    snrs = fields.List(
        fields.Float(), load_default=[5.0, 10.0, 15.0, 20.0], validate=validate.Length(min=1)
    )
    seeds = fields.List(fields.Integer(), load_default=[0, 1, 2], validate=validate.Length(min=1))
    batch_size = fields.Integer(load_default=256, validate=_positive())
    psnr_cap = fields.Float(load_default=100.0, validate=validate.Range(min=0, min_inclusive=False))
    workers = fields.Integer(load_default=1, validate=_positive())

    @post_load
    def make(self, data, **kwargs):
        return EvalConfig(**data)


SECTIONS = ("dataset", "source", "channel", "snr", "stage1", "stage2", "eval")


class ExperimentConfigSchema(Schema):
    schema_version = fields.Integer(
        load_default=SCHEMA_VERSION, validate=validate.Equal(SCHEMA_VERSION)
    )
    name = fields.String(load_default="experiment")
    seed = fields.Integer(load_default=0)
    output_dir = fields.String(load_default="runs")
    dataset = fields.Nested(DatasetSchema)
    source = fields.Nested(SourceSchema)
    channel = fields.Nested(ChannelSchema)
    snr = fields.Nested(SnrSchema)
    stage1 = fields.Nested(Stage1Schema)
    stage2 = fields.Nested(Stage2Schema)
    eval = fields.Nested(EvalSchema)

    @pre_load
    def fill_sections(self, data, **kwargs):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        for section in SECTIONS:
            if data.get(section) is None:
                data[section] = {}
        return data

    @post_load
    def make(self, data, **kwargs):
        return ExperimentConfig(**data)


_SCHEMA = ExperimentConfigSchema()


# ========================================
# ЗАГРУЗКА / ВЫГРУЗКА
# ========================================


def _set_dotted(raw, dotted, value):
    node = raw
    *parents, leaf = dotted.split(".")
    for key in parents:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
    node[leaf] = value


def experiment_from_dict(raw, overrides=None, resolve=True):
    """
    Validate a raw config mapping. overrides: {"channel.type": "rayleigh", ...};
    None values are ignored.
    """
    raw = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, key, value)
    try:
        experiment = _SCHEMA.load(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e.messages}", details=e.messages)
    return resolve_config(experiment) if resolve else experiment


def load_experiment_config(path, overrides=None, resolve=True):
    """
    Загрузка JSON-конфигурации эксперимента

    Args:
        path: Путь к файлу
        overrides: Точечные переопределения {"stage1.epochs": 3}
        resolve: Заполнить производные значения (L, M, lr)

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Нет файла, неверный JSON или нарушена схема
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    try:
        experiment = experiment_from_dict(raw, overrides, resolve)
    except ConfigError as e:
        raise type(e)(f"{path}: {e.message}", details=e.details)
    logger.info(f"⚙️ Config loaded: {path} (name={experiment.name}, seed={experiment.seed})")
    return experiment


def dump_config(experiment):
    return _SCHEMA.dump(experiment)


def save_experiment_config(experiment, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dump_config(experiment), indent=2, sort_keys=True) + "\n")
    return path


# ========================================
# МАТЕРИАЛИЗАЦИЯ
# ========================================


def resolve_config(experiment):
    """Fill every derived default and check cross-field constraints"""
    ds = experiment.dataset
    root = data_root_override() or ds.root
    image_shape = tuple(ds.image_shape)
    if ds.name != "synthetic":
        if image_shape != STANDARD_SHAPE and image_shape != DatasetConfig.image_shape:
            raise ConfigError(
                f"dataset {ds.name} has images of shape {STANDARD_SHAPE}, config says {image_shape}",
                details={"dataset.image_shape": list(image_shape)},
            )
        image_shape = STANDARD_SHAPE
        if root is None:
            raise ConfigError(
                f"dataset {ds.name} needs a root (dataset.root or SPLITJSCC_DATA_ROOT)",
                details={"dataset.root": None},
            )
        if not ds.download and not Path(root).is_dir():
            raise DatasetMissingError(
                f"dataset root does not exist: {root}", details={"dataset.root": root}
            )
    dataset = replace(ds, root=root, image_shape=image_shape)

    H, W, C = image_shape
    ch = experiment.channel
    if ch.symbol_count is None:
        try:
            symbol_count = symbols_for_cbr(ch.cbr, H, W, C)
        except ValueError as e:
            raise ConfigError(str(e), details={"channel.cbr": str(ch.cbr)})
    else:
        symbol_count = ch.symbol_count
        if abs(cbr(symbol_count, H, W, C) - float(ch.cbr)) > CBR_TOLERANCE:
            raise ConfigError(
                f"cbr(L={symbol_count}, {H}x{W}x{C}) = {cbr(symbol_count, H, W, C):.6g} "
                f"does not match the declared CBR {ch.cbr}",
                details={"channel.symbol_count": symbol_count, "channel.cbr": str(ch.cbr)},
            )
    channel = replace(ch, symbol_count=symbol_count)

    source = experiment.source
    if source.bit_count is None:
        source = replace(source, bit_count=2 * symbol_count * ch.bits_per_symbol)

    stage1 = experiment.stage1
    if stage1.interface_lr is None:
        stage1 = replace(stage1, interface_lr=stage1.lr)

    stage2 = experiment.stage2
    if stage2.lr is None:
        stage2 = replace(stage2, lr=STAGE2_LR[ch.type])
    if stage2.seed is None:
        stage2 = replace(stage2, seed=experiment.seed)

    ev = experiment.eval
    ev = replace(
        ev,
        dataset=ev.dataset or dataset.name,
        channels=list(ev.channels) if ev.channels else [ch.type],
        cbrs=list(ev.cbrs) if ev.cbrs else [ch.cbr],
    )
    if ev.dataset != dataset.name and ev.dataset != "synthetic" and root is None:
        raise ConfigError(f"eval dataset {ev.dataset} needs a dataset root")

    return replace(
        experiment,
        dataset=dataset,
        channel=channel,
        source=source,
        stage1=stage1,
        stage2=stage2,
        eval=ev,
    )


# ========================================
# ХЭШИ
# ========================================

# environment-specific, not part of the experiment identity
_LOCAL_DATASET_KEYS = ("root", "download")


def _identity(dumped):
    dumped = copy.deepcopy(dumped)
    for key in _LOCAL_DATASET_KEYS:
        dumped["dataset"].pop(key, None)
    return dumped


def config_hash(experiment):
    return fingerprint(_identity(dump_config(experiment)))


def stage1_hash(experiment):
    """Hash of the parts stage 1 depends on: seed, dataset, source, stage1"""
    dumped = _identity(dump_config(experiment))
    return fingerprint({key: dumped[key] for key in ("seed", "dataset", "source", "stage1")})
