"""
Channel codec (wireless access node): channel mapper, channel demapper,
Importance-Aware Net and SNR modulation, plus stage-2 training
against the frozen source codec.

Bits are grouped into T tokens of `bits_per_token` consecutive positions
(zero-padded at the end); every token is a feature vector of width `dim`.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from models.backbones import TransformerBlock
from models.interface import importance_weights, sample_noisy_bits
from models.source_codec import freeze
from utils.channel import complex_to_reals, equalize, power_normalize, transmit
from utils.data import batch_loader
from utils.errors import ShapeError, TrainingDivergedError
from utils.helpers import append_jsonl, process_memory_mb, seed_everything
from utils.metrics import bit_error_rate, mse, psnr_per_image

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no-ian", "no-iattn")
SNR_RANGE_DB = (-5.0, 30.0)


# =============================================================================
# IMPORTANCE-AWARE NET
# =============================================================================


class InterfaceAttention(nn.Module):
    """
    Multiplicative attention scores computed from the interface importance.

    Each token's slice of the importance vector is projected to the feature
    width; gate = 2 * sigmoid(proj), so a zero projection is the identity.
    """

    def __init__(self, bits_per_token, dim):
        super().__init__()
        self.proj = nn.Linear(bits_per_token, dim)
        nn.init.zeros_(self.proj.bias)

    def scores(self, importance_tokens):
        return 2.0 * torch.sigmoid(self.proj(importance_tokens))

    def forward(self, features, importance_tokens):
        return features * self.scores(importance_tokens)


class SqueezeExcitation(nn.Module):
    """Pool over tokens -> bottleneck -> sigmoid gates -> per-channel rescale"""

    def __init__(self, dim, reduction=4):
        super().__init__()
        hidden = max(1, dim // reduction)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        squeezed = x.mean(dim=1)
        gates = torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))
        return x * gates.unsqueeze(1)


class ImportanceAwareNet(nn.Module):
    """Interface attention followed by squeeze-excitation ('no-iattn' keeps only SE)"""

    def __init__(self, bits_per_token, dim, reduction=4, use_attention=True):
        super().__init__()
        self.attention = InterfaceAttention(bits_per_token, dim) if use_attention else None
        self.se = SqueezeExcitation(dim, reduction)

    def forward(self, features, importance_tokens):
        if features.shape[-2] != importance_tokens.shape[-2]:
            raise ShapeError(
                f"{features.shape[-2]} feature tokens vs {importance_tokens.shape[-2]} importance tokens"
            )
        if self.attention is not None:
            features = self.attention(features, importance_tokens)
        return self.se(features)


def ian_forward(features, importance_tokens, ian):
    return ian(features, importance_tokens)


# =============================================================================
# SNR MODULATION
# =============================================================================


class ChannelModNet(nn.Module):
    """
    Per-layer FiLM from channel conditions: (1 + gamma) * x + beta.

    Zero-initialized output layers make every layer start as the identity.
    """

    def __init__(self, cond_dim, dim, layers, hidden=64):
        super().__init__()
        self.embed = nn.Sequential(
            nn.Linear(cond_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
        )
        self.gamma = nn.ModuleList(nn.Linear(hidden, dim) for _ in range(layers))
        self.beta = nn.ModuleList(nn.Linear(hidden, dim) for _ in range(layers))
        for head in list(self.gamma) + list(self.beta):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, cond):
        e = self.embed(cond)
        return [(g(e).unsqueeze(1), b(e).unsqueeze(1)) for g, b in zip(self.gamma, self.beta)]


def snr_condition(snr_db, batch, like):
    """SNR in dB mapped to [0, 1] over SNR_RANGE_DB, shape (B, 1)"""
    lo, hi = SNR_RANGE_DB
    value = (float(snr_db) - lo) / (hi - lo)
    return torch.full((batch, 1), value, dtype=like.dtype, device=like.device)


# =============================================================================
# MAPPER / DEMAPPER
# =============================================================================


class _TokenBody(nn.Module):
    """Positional tokens -> optional IAN -> [transformer block + FiLM] x depth"""

    def __init__(self, tokens, bits_per_token, dim, depth, num_heads, cond_dim, ablation, reduction):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(1, tokens, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.ian = (
            None
            if ablation == "no-ian"
            else ImportanceAwareNet(
                bits_per_token, dim, reduction, use_attention=ablation == "full"
            )
        )
        self.blocks = nn.ModuleList(TransformerBlock(dim, num_heads) for _ in range(depth))
        self.modnet = ChannelModNet(cond_dim, dim, depth)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, importance_tokens, cond):
        x = x + self.pos_embed
        if self.ian is not None:
            x = self.ian(x, importance_tokens)
        for block, (gamma, beta) in zip(self.blocks, self.modnet(cond)):
            x = (1 + gamma) * block(x) + beta
        return self.norm(x)


class ChannelMapper(nn.Module):
    """bits (B, M) -> 2L reals, conditioned on SNR"""

    def __init__(self, bit_count, symbol_count, bits_per_token, dim, depth, num_heads, ablation, reduction):
        super().__init__()
        self.bits_per_token = bits_per_token
        self.tokens = math.ceil(bit_count / bits_per_token)
        self.embed = nn.Linear(bits_per_token, dim)
        self.body = _TokenBody(
            self.tokens, bits_per_token, dim, depth, num_heads, 1, ablation, reduction
        )
        self.head = nn.Linear(self.tokens * dim, 2 * symbol_count)

    def forward(self, bit_tokens, importance_tokens, cond):
        # centered bits: 0 -> -1, 1 -> +1
        x = self.embed(2 * bit_tokens - 1)
        return self.head(self.body(x, importance_tokens, cond).flatten(1))


class ChannelDemapper(nn.Module):
    """equalized symbols as 2L reals -> (B, T, bits_per_token) logits"""

    def __init__(self, bit_count, symbol_count, bits_per_token, dim, depth, num_heads, ablation, reduction):
        super().__init__()
        self.tokens = math.ceil(bit_count / bits_per_token)
        self.dim = dim
        self.embed = nn.Linear(2 * symbol_count, self.tokens * dim)
        self.body = _TokenBody(
            self.tokens, bits_per_token, dim, depth, num_heads, 2, ablation, reduction
        )
        self.head = nn.Linear(dim, bits_per_token)

    def forward(self, y_reals, importance_tokens, cond):
        x = self.embed(y_reals).view(y_reals.shape[0], self.tokens, self.dim)
        return self.head(self.body(x, importance_tokens, cond))


@dataclass
class Stage2Result:
    codec: "ChannelCodec"
    log: list = field(default_factory=list)


class ChannelCodec(nn.Module):
    """Mapper + demapper bound to one frozen interface"""

    def __init__(
        self,
        spec,
        symbol_count,
        bits_per_token=16,
        dim=64,
        depth=2,
        num_heads=4,
        ablation="full",
        se_reduction=4,
    ):
        super().__init__()
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}")
        self.bit_count = spec.bit_count
        self.symbol_count = int(symbol_count)
        self.bits_per_token = int(bits_per_token)
        self.ablation = ablation
        self.interface_fingerprint = spec.fingerprint

        self.tokens = math.ceil(self.bit_count / self.bits_per_token)
        importance = torch.as_tensor(importance_weights(spec), dtype=torch.float32)
        self.register_buffer("importance", importance)

        options = dict(
            bits_per_token=self.bits_per_token,
            dim=dim,
            depth=depth,
            num_heads=num_heads,
            ablation=ablation,
            reduction=se_reduction,
        )
        self.mapper = ChannelMapper(self.bit_count, self.symbol_count, **options)
        self.demapper = ChannelDemapper(self.bit_count, self.symbol_count, **options)

    @classmethod
    def from_config(cls, experiment, spec, ablation=None):
        ch = experiment.channel
        return cls(
            spec,
            symbol_count=ch.symbol_count,
            bits_per_token=ch.bits_per_token,
            dim=ch.embed_dim,
            depth=ch.depth,
            num_heads=ch.num_heads,
            ablation=ablation or ch.ablation,
            se_reduction=ch.se_reduction,
        )

    def trainable_parameters(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # ---------------------------------------------------------------- tokens

    def _tokens(self, v, repeat_last=False):
        pad = self.tokens * self.bits_per_token - v.shape[-1]
        if pad and repeat_last:
            v = torch.cat([v, v[..., -1:].expand(*v.shape[:-1], pad)], dim=-1)
        elif pad:
            v = F.pad(v, (0, pad))
        return v.reshape(*v.shape[:-1], self.tokens, self.bits_per_token)

    def importance_tokens(self, batch):
        """(B, tokens, bits_per_token); the tail token repeats the last importance value"""
        tokens = self._tokens(self.importance, repeat_last=True)
        return tokens.unsqueeze(0).expand(batch, -1, -1)

    # ------------------------------------------------------------ operations

    def map_bits(self, b, snr_db):
        """(B, M) bits -> power-normalized ChannelSymbols of length L"""
        if b.dim() == 1:
            b = b.unsqueeze(0)
        if b.shape[-1] != self.bit_count:
            raise ShapeError(f"mapper expects {self.bit_count} bits, got {b.shape[-1]}")
        b = b.to(self.importance.dtype)
        cond = snr_condition(snr_db, b.shape[0], b)
        reals = self.mapper(self._tokens(b), self.importance_tokens(b.shape[0]), cond)
        return power_normalize(reals)

    def demap_symbols(self, y, state, snr_db):
        """Received (B, L) complex symbols -> (B, M) bit probabilities"""
        if y.dim() == 1:
            y = y.unsqueeze(0)
        if y.shape[-1] != self.symbol_count:
            raise ShapeError(f"demapper expects {self.symbol_count} symbols, got {y.shape[-1]}")
        y_eq = equalize(y, state)
        reals = complex_to_reals(y_eq).to(self.importance.dtype)
        gain = state.gain().to(reals.dtype).reshape(-1, 1).expand(reals.shape[0], 1)
        cond = torch.cat([snr_condition(snr_db, reals.shape[0], reals), gain], dim=1)
        logits = self.demapper(reals, self.importance_tokens(reals.shape[0]), cond)
        return torch.sigmoid(logits.flatten(1)[:, : self.bit_count])

    def forward(self, b, channel_type, snr_db, generator=None):
        """Full link: map -> channel -> demap; returns (probabilities, state)"""
        x = self.map_bits(b, snr_db)
        y, state = transmit(x, channel_type, snr_db, generator)
        return self.demap_symbols(y, state, snr_db), state


def stage2_loss(s, s_hat):
    """Per-element MSE through the frozen source decoder"""
    return mse(s, s_hat)


# =============================================================================
# ОБУЧЕНИЕ (STAGE 2)
# =============================================================================


def draw_snr(snr_cfg, generator):
    if snr_cfg.mode == "fixed":
        return float(snr_cfg.fixed)
    u = float(torch.rand((), generator=generator, dtype=torch.float64))
    return snr_cfg.low + (snr_cfg.high - snr_cfg.low) * u


@torch.no_grad()
def evaluate_link(source, codec, images, channel_type, snr_db, generator, batch_size=256):
    """(per-image PSNR, per-image BER) tensors for the hard-decision pipeline"""
    was_training = codec.training
    codec.eval()
    scores, errors = [], []
    for start in range(0, len(images), batch_size):
        s = images[start : start + batch_size]
        b = source.transmit_bits(s)
        probs, _ = codec(b, channel_type, snr_db, generator)
        b_hat = source.binarize(probs)
        scores.append(psnr_per_image(s, source.decode(b_hat)))
        errors.append(bit_error_rate(b, b_hat).reshape(-1))
    codec.train(was_training)
    return torch.cat(scores), torch.cat(errors)


def train_stage2(dataset, source, spec, experiment, ablation=None, log_path=None):
    """
    Обучение маппера, демаппера, IAN и сети модуляции при замороженном
    кодеке источника

    Args:
        dataset: DatasetHandle
        source: Обученный SourceCodec (замораживается здесь)
        spec: InterfaceSpec первой стадии
        experiment: Разрешённый ExperimentConfig; канал из experiment.channel
        ablation: full, no-iattn или no-ian (по умолчанию из конфигурации)
        log_path: Путь train_log.jsonl

    Returns:
        Stage2Result

    Raises:
        ShapeError: Длина интерфейса не совпадает с кодеком источника
        TrainingDivergedError: Потеря стала NaN/inf
    """
    cfg = experiment.stage2
    channel_type = experiment.channel.type
    seed = experiment.stage2_seed
    seed_everything(seed)

    if spec.bit_count != source.bit_count:
        raise ShapeError(
            f"interface has {spec.bit_count} bits but the source codec emits {source.bit_count}"
        )
    freeze(source)

    codec = ChannelCodec.from_config(experiment, spec, ablation=ablation)
    optimizer = torch.optim.Adam(
        [p for p in codec.parameters() if p.requires_grad], lr=cfg.lr
    )
    generator = torch.Generator().manual_seed(seed)
    validation_seed = seed + 7919

    logger.info(
        f"🚀 Stage 2: channel={channel_type}, L={codec.symbol_count}, M={codec.bit_count}, "
        f"ablation={codec.ablation}, params={codec.trainable_parameters()}, lr={cfg.lr}"
    )

    log = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.monotonic()
        codec.train()
        total, count = 0.0, 0

        for s in batch_loader(dataset.train, cfg.batch_size, seed=seed, epoch=epoch):
            with torch.no_grad():
                b = source.transmit_bits(s)
            snr_db = draw_snr(experiment.snr, generator)

            probs, _ = codec(b, channel_type, snr_db, generator)
            b_hat = sample_noisy_bits(probs, generator)
            loss = stage2_loss(s, source.decode(b_hat))
            if not torch.isfinite(loss):
                raise TrainingDivergedError("stage2", epoch, step, float(loss))

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            step += 1
            total += float(loss) * len(s)
            count += len(s)

        psnr_val = {}
        if len(dataset.test):
            validation_generator = torch.Generator().manual_seed(validation_seed)
            for snr_db in experiment.snr.validation_snrs:
                scores, _ = evaluate_link(
                    source, codec, dataset.test, channel_type, snr_db, validation_generator
                )
                psnr_val[f"{snr_db:g}"] = float(scores.mean())

        record = {
            "stage": "stage2",
            "epoch": epoch,
            "loss": total / max(count, 1),
            "psnr_val": psnr_val,
            "seconds": round(time.monotonic() - started, 3),
            "rss_mb": process_memory_mb(),
        }
        log.append(record)
        if log_path is not None:
            append_jsonl(log_path, record)

        psnr_text = ", ".join(f"{k}dB={v:.2f}" for k, v in psnr_val.items())
        logger.info(
            f"📈 [stage2] epoch {epoch}/{cfg.epochs} loss={record['loss']:.5f} {psnr_text}"
        )
        if not math.isfinite(record["loss"]):
            raise TrainingDivergedError("stage2", epoch, step, record["loss"])

    codec.eval()
    return Stage2Result(codec=codec, log=log)
