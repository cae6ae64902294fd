"""
Binary interface: an array of M binary symmetric channels with trainable
flip probabilities.

The interface is the only contract shared by the source node and the wireless
access node. During stage 1 it stands in for (channel mapper + channel +
channel demapper); afterwards its frozen flip probabilities are handed to the
channel codec as per-bit importance.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from utils.errors import (
    ShapeError,
    SpecCorruptedError,
    SpecFileMissingError,
    SpecValidationError,
    SpecVersionError,
)

logger = logging.getLogger(__name__)

# ========================================
# КОНСТАНТЫ ФОРМАТА
# ========================================
SPEC_MAGIC = b"BSCIFACE"
SPEC_FORMAT_VERSION = 1
EPS_MAX = 0.5
EPS_INIT = 0.25

# magic | version u16 | M u32 | fingerprint length u16
_HEADER = struct.Struct("<8sHIH")
_DIGEST_SIZE = 32


# ========================================
# ТИПЫ
# ========================================


@dataclass(frozen=True)
class InterfaceSpec:
    """Frozen stage-1 interface: per-bit flip probabilities plus provenance"""

    epsilon: np.ndarray
    training_fingerprint: str = ""
    format_version: int = SPEC_FORMAT_VERSION
    bit_count: int = field(init=False)

    def __post_init__(self):
        eps = np.array(self.epsilon, dtype="<f8", order="C")
        if eps.ndim != 1 or eps.size < 1:
            raise SpecValidationError(
                "Interface must hold at least one bit",
                details={"shape": list(eps.shape)},
            )
        bad = np.flatnonzero(~((eps > 0.0) & (eps <= EPS_MAX)))
        if bad.size:
            raise SpecValidationError(
                f"Flip probabilities must lie in (0, {EPS_MAX}]",
                details={"positions": bad[:10].tolist()},
            )
        eps.setflags(write=False)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "bit_count", int(eps.size))

    def __eq__(self, other):
        if not isinstance(other, InterfaceSpec):
            return NotImplemented
        return (
            self.bit_count == other.bit_count
            and self.format_version == other.format_version
            and self.training_fingerprint == other.training_fingerprint
            and self.epsilon.tobytes() == other.epsilon.tobytes()
        )

    def __hash__(self):
        return hash((self.epsilon.tobytes(), self.training_fingerprint))

    @property
    def fingerprint(self):
        """SHA-256 of the serialized payload; identifies this exact interface"""
        return hashlib.sha256(_payload(self)).hexdigest()

    def importance(self):
        return importance_weights(self)

    def summary(self):
        return {
            "bit_count": self.bit_count,
            "mean_eps": float(self.epsilon.mean()),
            "min_eps": float(self.epsilon.min()),
            "max_eps": float(self.epsilon.max()),
            "training_fingerprint": self.training_fingerprint,
            "fingerprint": self.fingerprint,
        }


class EpsilonParams(nn.Module):
    """Unconstrained raw parameters mapped to eps = 0.5 * sigmoid(raw)"""

    def __init__(self, bit_count, eps_init=EPS_INIT):
        super().__init__()
        if bit_count < 1:
            raise ValueError("bit_count must be positive")
        if not 0.0 < eps_init < EPS_MAX:
            raise ValueError(f"eps_init must lie in (0, {EPS_MAX})")
        # inverse of 0.5*sigmoid: raw = logit(2*eps)
        raw0 = float(np.log(2 * eps_init / (1 - 2 * eps_init)))
        self.raw = nn.Parameter(torch.full((bit_count,), raw0))

    @property
    def bit_count(self):
        return self.raw.numel()

    def forward(self):
        return epsilon_from_raw(self.raw)

    def to_spec(self, training_fingerprint=""):
        with torch.no_grad():
            eps = self().detach().to(torch.float64).cpu().numpy()
        return InterfaceSpec(epsilon=eps, training_fingerprint=training_fingerprint)


# ========================================
# ОПЕРАЦИИ
# ========================================


def epsilon_from_raw(raw):
    """
    Вероятности переворота бит из сырых параметров

    Args:
        raw: Тензор неограниченных параметров (float32 или float64)

    Returns:
        eps = 0.5 * sigmoid(raw) в (0, 0.5]; снизу ограничено
        torch.finfo(dtype).tiny
    """
    eps = EPS_MAX * torch.sigmoid(raw)
    return eps.clamp(min=torch.finfo(eps.dtype).tiny)


def bsc_transition_prob(b, b_hat, eps):
    """p(b_hat | b) for a BSC with crossover eps"""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if b not in (0, 1) or b_hat not in (0, 1):
        raise ValueError("bits must be 0 or 1")
    return eps if b_hat != b else 1.0 - eps


def noisy_bit_marginal(p, eps):
    """
    Probability that the BSC output bit is 1 given P(b=1) = p.

    q = p(1 - eps) + (1 - p) eps, affine in p with slope 1 - 2 eps.
    """
    if p.shape[-1] != eps.shape[-1]:
        raise ShapeError(
            f"bit dimension mismatch: probabilities {p.shape[-1]}, eps {eps.shape[-1]}"
        )
    return p * (1 - eps) + (1 - p) * eps


class _StraightThroughBernoulli(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, generator):
        return torch.bernoulli(q.detach(), generator=generator)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def sample_noisy_bits(q, generator=None, straight_through=True):
    """
    Independent Bernoulli(q) draws.

    With straight_through the backward pass is the identity w.r.t. q.
    """
    if straight_through and q.requires_grad:
        return _StraightThroughBernoulli.apply(q, generator)
    return torch.bernoulli(q.detach(), generator=generator)


def regularization_loss(eps, lam=1.0):
    """(lam / M) * sum (eps - 0.5)^2 ; lam is applied exactly once"""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if eps.shape[-1] < 1:
        raise ShapeError("regularization needs at least one bit")
    return lam * torch.mean((eps - EPS_MAX) ** 2)


def importance_weights(spec):
    """1 - 2 eps per bit, in [0, 1)"""
    if isinstance(spec, InterfaceSpec):
        return 1.0 - 2.0 * spec.epsilon
    return 1.0 - 2.0 * spec


# ========================================
# СЕРИАЛИЗАЦИЯ
# ========================================


def _payload(spec):
    fingerprint = spec.training_fingerprint.encode("utf-8")
    header = struct.pack("<HIH", spec.format_version, spec.bit_count, len(fingerprint))
    return header + fingerprint + spec.epsilon.astype("<f8").tobytes()


def save_spec(spec, path):
    """Write magic | version | M | fingerprint | sha256 | M little-endian f64"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fingerprint = spec.training_fingerprint.encode("utf-8")
    body = spec.epsilon.astype("<f8").tobytes()
    digest = hashlib.sha256(_payload(spec)).digest()

    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(SPEC_MAGIC, spec.format_version, spec.bit_count, len(fingerprint))
        )
        f.write(fingerprint)
        f.write(digest)
        f.write(body)

    logger.info(f"💾 Interface spec saved: {path} (M={spec.bit_count})")
    return path


def load_spec(path):
    """
    Чтение InterfaceSpec с проверкой заголовка и sha256

    Returns:
        InterfaceSpec

    Raises:
        SpecFileMissingError, SpecCorruptedError, SpecVersionError
    """
    path = Path(path)
    if not path.is_file():
        raise SpecFileMissingError(f"Interface spec not found: {path}")

    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise SpecCorruptedError(f"Interface spec truncated: {path}")

    magic, version, bit_count, fp_len = _HEADER.unpack_from(raw)
    if magic != SPEC_MAGIC:
        raise SpecCorruptedError(f"Not an interface spec file: {path}")
    if version != SPEC_FORMAT_VERSION:
        raise SpecVersionError(
            f"Unsupported interface spec version {version}",
            details={"expected": SPEC_FORMAT_VERSION, "found": version},
        )

    offset = _HEADER.size
    expected = offset + fp_len + _DIGEST_SIZE + 8 * bit_count
    if len(raw) != expected:
        raise SpecCorruptedError(
            f"Interface spec has wrong size: {path}",
            details={"expected": expected, "found": len(raw)},
        )

    fingerprint = raw[offset : offset + fp_len]
    offset += fp_len
    digest = raw[offset : offset + _DIGEST_SIZE]
    offset += _DIGEST_SIZE
    body = raw[offset:]

    header = struct.pack("<HIH", version, bit_count, fp_len)
    if hashlib.sha256(header + fingerprint + body).digest() != digest:
        raise SpecCorruptedError(f"Interface spec checksum mismatch: {path}")

    try:
        fingerprint = fingerprint.decode("utf-8")
    except UnicodeDecodeError:
        raise SpecCorruptedError(f"Interface spec fingerprint is not UTF-8: {path}")

    return InterfaceSpec(
        epsilon=np.frombuffer(body, dtype="<f8").copy(),
        training_fingerprint=fingerprint,
        format_version=version,
    )
