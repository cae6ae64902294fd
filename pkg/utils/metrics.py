"""
Quality metrics: PSNR (per-element mean squared error convention) and BER.
"""

import math

import torch

from utils.errors import ShapeError

PSNR_CAP_DB = 100.0
PIXEL_MAX = 255.0


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(s, s_hat):
    """Mean over every element (not the squared norm)"""
    _check_same_shape(s, s_hat)
    return torch.mean((s - s_hat) ** 2)


def psnr(s, s_hat, max_value=PIXEL_MAX, cap=PSNR_CAP_DB):
    """
    PSNR пары изображений: 10 log10(MAX^2 / MSE)

    Args:
        s, s_hat: Тензоры одной формы
        max_value: Максимум шкалы пикселей
        cap: Значение при нулевой ошибке

    Returns:
        PSNR в дБ, не выше cap
    """
    _check_same_shape(s, s_hat)
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = float(torch.mean((torch.as_tensor(s, dtype=torch.float64)
                            - torch.as_tensor(s_hat, dtype=torch.float64)) ** 2))
    if err == 0.0:
        return float(cap)
    return min(float(cap), 10.0 * math.log10(max_value**2 / err))


def psnr_per_image(s, s_hat, max_value=1.0, cap=PSNR_CAP_DB):
    """
    PSNR for each image of a (B, ...) batch, returned as a float64 tensor.

    Images in [0, 1] with max_value=1 give the same dB as the 0-255 domain.
    """
    _check_same_shape(s, s_hat)
    diff = (s.to(torch.float64) - s_hat.to(torch.float64)).flatten(1)
    err = diff.pow(2).mean(dim=1)
    out = 10.0 * torch.log10(max_value**2 / err)
    return torch.where(err == 0, torch.full_like(out, cap), out.clamp(max=cap))


def bit_error_rate(b, b_hat):
    """Hamming distance / M; batched inputs give one rate per row"""
    b = torch.as_tensor(b)
    b_hat = torch.as_tensor(b_hat)
    _check_same_shape(b, b_hat)
    if b.shape[-1] == 0:
        raise ShapeError("empty bit sequence")
    errors = (b.round() != b_hat.round()).to(torch.float64)
    if errors.dim() == 1:
        return float(errors.mean())
    return errors.mean(dim=-1)
