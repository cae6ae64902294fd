"""
Physical-layer simulator: power normalization, AWGN and flat Rayleigh
fading, SNR accounting and CBR arithmetic.

Symbols are complex tensors of shape (B, L), one row per transmitted block.
At module boundaries they travel as 2L reals, (B, L, 2) flattened to (B, 2L).
"""

import logging
from dataclasses import dataclass
from fractions import Fraction

import torch

from utils.errors import ChannelInputError, ShapeError

logger = logging.getLogger(__name__)

CHANNEL_TYPES = ("awgn", "rayleigh")


# ========================================
# ТИПЫ
# ========================================


@dataclass(frozen=True)
class ChannelSymbols:
    symbols: torch.Tensor

    @property
    def length(self):
        return self.symbols.shape[-1]

    @property
    def power(self):
        """Mean |x|^2 per block"""
        return self.symbols.abs().pow(2).mean(dim=-1)

    def as_reals(self):
        return complex_to_reals(self.symbols)


@dataclass(frozen=True)
class ChannelState:
    """Receiver-known channel state; h has one coefficient per block"""

    h: torch.Tensor
    noise_sigma2: float
    snr_db: float
    channel_type: str = "awgn"

    def gain(self):
        return self.h.abs()


# ========================================
# ПРЕДСТАВЛЕНИЕ
# ========================================


def reals_to_complex(x):
    if x.shape[-1] % 2:
        raise ShapeError(f"need an even number of reals, got {x.shape[-1]}")
    pairs = x.reshape(*x.shape[:-1], x.shape[-1] // 2, 2)
    if pairs.dtype not in (torch.float32, torch.float64):
        pairs = pairs.float()
    return torch.view_as_complex(pairs.contiguous())


def complex_to_reals(z):
    r = torch.view_as_real(z)
    return r.reshape(*z.shape[:-1], 2 * z.shape[-1])


# ========================================
# ОПЕРАЦИИ
# ========================================


def power_normalize(x):
    """Scale each block to mean power 1: x * sqrt(L / sum |x|^2)"""
    if not torch.is_complex(x):
        x = reals_to_complex(x)
    if x.shape[-1] < 1:
        raise ShapeError("cannot normalize an empty block")
    energy = x.abs().pow(2).sum(dim=-1, keepdim=True)
    if bool((energy == 0).any()):
        raise ChannelInputError("cannot power-normalize an all-zero block")
    scale = torch.sqrt(x.shape[-1] / energy)
    return ChannelSymbols(symbols=x * scale)


def snr_to_sigma2(snr_db):
    """Total complex noise variance for unit signal power"""
    return 10.0 ** (-float(snr_db) / 10.0)


def _complex_noise(shape, sigma2, generator, like):
    real_dtype = torch.float64 if like.dtype == torch.complex128 else torch.float32
    std = (sigma2 / 2.0) ** 0.5
    parts = torch.randn(
        (*shape, 2), generator=generator, dtype=real_dtype, device=like.device
    )
    return torch.view_as_complex(parts * std)


def _complex_gaussian(shape, generator, like):
    return _complex_noise(shape, 1.0, generator, like)


def transmit_awgn(x, snr_db, generator=None):
    """y = x + n, n ~ CN(0, sigma2)"""
    symbols = x.symbols if isinstance(x, ChannelSymbols) else x
    sigma2 = snr_to_sigma2(snr_db)
    noise = _complex_noise(symbols.shape, sigma2, generator, symbols)
    h = torch.ones(symbols.shape[:-1], dtype=symbols.dtype, device=symbols.device)
    state = ChannelState(h=h, noise_sigma2=sigma2, snr_db=float(snr_db), channel_type="awgn")
    return symbols + noise, state


def transmit_rayleigh(x, snr_db, generator=None, h=None):
    """
    Канал с блочными замираниями Рэлея: y = h x + n, один h ~ CN(0, 1) на блок

    Args:
        x: Комплексные символы (B, L) или ChannelSymbols; не изменяются
        snr_db: SNR в дБ при единичной мощности сигнала
        generator: torch.Generator для h и шума
        h: Известный коэффициент вместо случайного

    Returns:
        (y, ChannelState)
    """
    symbols = x.symbols if isinstance(x, ChannelSymbols) else x
    sigma2 = snr_to_sigma2(snr_db)
    if h is None:
        h = _complex_gaussian(symbols.shape[:-1], generator, symbols)
    else:
        h = torch.as_tensor(h, dtype=symbols.dtype, device=symbols.device)
        h = h.expand(symbols.shape[:-1])
    noise = _complex_noise(symbols.shape, sigma2, generator, symbols)
    state = ChannelState(
        h=h, noise_sigma2=sigma2, snr_db=float(snr_db), channel_type="rayleigh"
    )
    return h.unsqueeze(-1) * symbols + noise, state


def transmit(x, channel_type, snr_db, generator=None):
    if channel_type == "awgn":
        return transmit_awgn(x, snr_db, generator)
    if channel_type == "rayleigh":
        return transmit_rayleigh(x, snr_db, generator)
    raise ValueError(f"unknown channel type: {channel_type!r}")


def equalize(y, state):
    """Zero-forcing with the receiver-known coefficient: y / h"""
    return y / state.h.unsqueeze(-1)


# ========================================
# CBR
# ========================================


def cbr(L, H, W, C):
    """Channel bandwidth ratio L / (C * H * W), complex uses per source dimension"""
    return float(cbr_fraction(L, H, W, C))


def cbr_fraction(L, H, W, C):
    for name, value in (("L", L), ("H", H), ("W", W), ("C", C)):
        if int(value) != value or value < 0:
            raise ValueError(f"{name} must be a nonnegative integer, got {value}")
    denominator = int(C) * int(H) * int(W)
    if denominator == 0:
        raise ValueError("source dimension C*H*W must be positive")
    return Fraction(int(L), denominator)


def symbols_for_cbr(ratio, H, W, C):
    """Inverse of cbr(): the symbol count L giving exactly this ratio"""
    ratio = Fraction(ratio)
    L = ratio * (H * W * C)
    if L.denominator != 1 or L <= 0:
        raise ValueError(f"CBR {ratio} is not realizable for a {H}x{W}x{C} source")
    return int(L)
