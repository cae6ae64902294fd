"""
Source codec (application layer): probabilistic encoder, rounding binarizer,
decoder, and stage-1 training through the BSC interface.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import torch
from torch import nn

from models.backbones import build_source_backbone
from models.interface import (
    EPS_INIT,
    EpsilonParams,
    noisy_bit_marginal,
    regularization_loss,
    sample_noisy_bits,
)
from utils.errors import ShapeError, TrainingDivergedError
from utils.data import batch_loader
from utils.helpers import append_jsonl, process_memory_mb, seed_everything
from utils.metrics import mse, psnr_per_image

logger = logging.getLogger(__name__)


# ========================================
# ТИПЫ
# ========================================


@dataclass
class Image:
    """
    H x W x C image with a declared value range.

    Internally images are kept in [0, 1]; source_depth records the bit depth
    of the original samples (8 for the standard datasets).
    """

    pixels: torch.Tensor
    value_range: tuple = (0.0, 1.0)
    source_depth: int = 8

    def __post_init__(self):
        if self.pixels.dim() != 3 or min(self.pixels.shape) < 1:
            raise ShapeError(f"image must be H x W x C, got {tuple(self.pixels.shape)}")
        lo, hi = self.value_range
        if bool((self.pixels < lo).any()) or bool((self.pixels > hi).any()):
            raise ValueError(f"pixel values outside declared range {self.value_range}")

    @property
    def shape(self):
        return tuple(self.pixels.shape)

    def as_batch(self):
        """(1, C, H, W) tensor"""
        return self.pixels.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_batch(cls, batch, index=0, **kwargs):
        return cls(pixels=batch[index].permute(1, 2, 0).contiguous(), **kwargs)

    def to_uint8(self):
        lo, hi = self.value_range
        scaled = (self.pixels - lo) / (hi - lo) * (2**self.source_depth - 1)
        return scaled.round().clamp(0, 2**self.source_depth - 1).to(torch.uint8)


@dataclass
class Stage1Result:
    codec: "SourceCodec"
    spec: object
    log: list = field(default_factory=list)


# ========================================
# МОДЕЛЬ
# ========================================


class SourceCodec(nn.Module):
    """Encoder, decoder and trainable interface of the source node"""

    def __init__(
        self,
        image_shape,
        bit_count,
        backbone="swin",
        eps_init=EPS_INIT,
        **backbone_options,
    ):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.bit_count = int(bit_count)
        self.backbone = backbone
        self.encoder, self.decoder = build_source_backbone(
            backbone, self.image_shape, self.bit_count, **backbone_options
        )
        self.interface = EpsilonParams(self.bit_count, eps_init=eps_init)

    @classmethod
    def from_config(cls, experiment):
        src = experiment.source
        return cls(
            image_shape=experiment.dataset.image_shape,
            bit_count=src.bit_count,
            backbone=src.backbone,
            eps_init=experiment.stage1.eps_init,
            **src.backbone_options(),
        )

    def _as_batch(self, s):
        if isinstance(s, Image):
            s = s.as_batch()
        H, W, C = self.image_shape
        if s.dim() != 4 or tuple(s.shape[1:]) != (C, H, W):
            raise ShapeError(
                f"expected images of shape (B, {C}, {H}, {W}), got {tuple(s.shape)}"
            )
        return s

    def encode_soft(self, s):
        """P(bit = 1) for every one of the M bits, shape (B, M)"""
        return torch.sigmoid(self.encoder(self._as_batch(s)))

    @staticmethod
    def binarize(p):
        """Element-wise rounding; a tie at exactly 0.5 goes to 1"""
        return (p >= 0.5).to(p.dtype)

    def decode(self, b_hat):
        """Reconstruction in [0, 1] from hard or relaxed bits, shape (B, C, H, W)"""
        if b_hat.dim() == 1:
            b_hat = b_hat.unsqueeze(0)
        if b_hat.shape[-1] != self.bit_count:
            raise ShapeError(
                f"decoder expects {self.bit_count} bits, got {b_hat.shape[-1]}"
            )
        return self.decoder(b_hat.to(self.decoder_dtype)).clamp(0.0, 1.0)

    @property
    def decoder_dtype(self):
        return next(self.decoder.parameters()).dtype

    def epsilon(self):
        return self.interface()

    def forward(self, s, generator=None, sample=True):
        """
        Stage-1 path: encode -> BSC marginal -> sample (STE) -> decode.

        With sample=False the deterministic marginal is decoded instead.
        """
        p = self.encode_soft(s)
        q = noisy_bit_marginal(p, self.epsilon())
        b_hat = sample_noisy_bits(q, generator) if sample else q
        return self.decode(b_hat)

    @torch.no_grad()
    def transmit_bits(self, s):
        """Deterministic binary encoder used after training"""
        return self.binarize(self.encode_soft(s))

    def to_spec(self, training_fingerprint=""):
        return self.interface.to_spec(training_fingerprint)


def stage1_loss(s, s_hat, eps, lam=1.0):
    """Per-element MSE plus (lam / M) * sum (eps - 0.5)^2"""
    return mse(s, s_hat) + regularization_loss(eps, lam)


def freeze(module):
    """Stop gradients into a trained module and switch it to eval mode"""
    for param in module.parameters():
        param.requires_grad_(False)
    return module.eval()


# ========================================
# ОБУЧЕНИЕ (STAGE 1)
# ========================================


@torch.no_grad()
def validation_psnr(codec, images, batch_size=256):
    """Mean PSNR of the noiseless binary path binarize -> decode"""
    if len(images) == 0:
        return float("nan")
    was_training = codec.training
    codec.eval()
    scores = []
    for start in range(0, len(images), batch_size):
        s = images[start : start + batch_size]
        scores.append(psnr_per_image(s, codec.decode(codec.transmit_bits(s))))
    codec.train(was_training)
    return float(torch.cat(scores).mean())


def train_stage1(dataset, experiment, log_path=None, fingerprint=""):
    """
    Совместное обучение энкодера, декодера и сырых eps через массив BSC

    Args:
        dataset: DatasetHandle с train/test изображениями в [0, 1]
        experiment: Разрешённый ExperimentConfig
        log_path: Путь train_log.jsonl (None - без файла)
        fingerprint: Отпечаток обучения для InterfaceSpec

    Returns:
        Stage1Result(codec, замороженный InterfaceSpec, лог по эпохам)

    Raises:
        TrainingDivergedError: Потеря стала NaN/inf
    """
    cfg = experiment.stage1
    seed_everything(experiment.seed)

    codec = SourceCodec.from_config(experiment)
    interface_lr = cfg.interface_lr if cfg.interface_lr is not None else cfg.lr
    optimizer = torch.optim.Adam(
        [
            {"params": list(codec.encoder.parameters()) + list(codec.decoder.parameters())},
            {"params": codec.interface.parameters(), "lr": interface_lr},
        ],
        lr=cfg.lr,
    )
    generator = torch.Generator().manual_seed(experiment.seed)

    logger.info(
        f"🚀 Stage 1: M={codec.bit_count}, backbone={codec.backbone}, "
        f"epochs={cfg.epochs}, batch={cfg.batch_size}, lambda={cfg.lam}"
    )

    log = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.monotonic()
        codec.train()
        total, count = 0.0, 0

        for s in batch_loader(dataset.train, cfg.batch_size, seed=experiment.seed, epoch=epoch):
            s_hat = codec(s, generator=generator)
            loss = stage1_loss(s, s_hat, codec.epsilon(), cfg.lam)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("stage1", epoch, step, float(loss))

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            step += 1
            total += float(loss) * len(s)
            count += len(s)

        with torch.no_grad():
            mean_eps = float(codec.epsilon().mean())
        record = {
            "stage": "stage1",
            "epoch": epoch,
            "loss": total / max(count, 1),
            "mean_eps": mean_eps,
            "psnr_val": validation_psnr(codec, dataset.test),
            "seconds": round(time.monotonic() - started, 3),
            "rss_mb": process_memory_mb(),
        }
        log.append(record)
        if log_path is not None:
            append_jsonl(log_path, record)

        logger.info(
            f"📈 [stage1] epoch {epoch}/{cfg.epochs} loss={record['loss']:.5f} "
            f"mean_eps={mean_eps:.4f} psnr_val={record['psnr_val']:.2f} dB"
        )
        if not math.isfinite(record["loss"]):
            raise TrainingDivergedError("stage1", epoch, step, record["loss"])

    codec.eval()
    spec = codec.to_spec(training_fingerprint=fingerprint)
    return Stage1Result(codec=codec, spec=spec, log=log)
