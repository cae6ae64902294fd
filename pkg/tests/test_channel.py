import math
from fractions import Fraction

import pytest
import torch

from utils.channel import (
    ChannelSymbols,
    cbr,
    cbr_fraction,
    complex_to_reals,
    equalize,
    power_normalize,
    reals_to_complex,
    snr_to_sigma2,
    symbols_for_cbr,
    transmit,
    transmit_awgn,
    transmit_rayleigh,
)
from utils.errors import ChannelInputError, ShapeError


def test_power_normalize_unit_power_over_many_inputs():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1000, 64, dtype=torch.float64, generator=gen) * 7.0
    symbols = power_normalize(x)
    assert isinstance(symbols, ChannelSymbols)
    assert symbols.length == 32
    assert torch.allclose(symbols.power, torch.ones(1000, dtype=torch.float64), atol=1e-6)


def test_power_normalize_rejects_zero_block():
    x = torch.zeros(2, 8)
    x[0, 0] = 1.0
    with pytest.raises(ChannelInputError):
        power_normalize(x)


@pytest.mark.parametrize("c", [1e-3, 0.5, 3.0, 250.0])
def test_power_normalize_ignores_positive_rescaling(c):
    x = torch.randn(64, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    once = power_normalize(x).symbols
    assert torch.allclose(power_normalize(c * once).symbols, once, atol=1e-6)
    assert torch.allclose(power_normalize(c * x).symbols, once, atol=1e-6)


def test_reals_complex_layout():
    reals = torch.tensor([[1.0, 2.0, 3.0, 4.0]])
    z = reals_to_complex(reals)
    assert z.shape == (1, 2)
    assert z[0, 0] == complex(1.0, 2.0)
    assert torch.equal(complex_to_reals(z), reals)
    with pytest.raises(ShapeError):
        reals_to_complex(torch.ones(1, 3))


def test_snr_to_sigma2():
    assert snr_to_sigma2(0) == pytest.approx(1.0)
    assert snr_to_sigma2(10) == pytest.approx(0.1)
    assert snr_to_sigma2(20) == pytest.approx(0.01)


def test_awgn_noise_variance_matches_snr():
    x = power_normalize(torch.randn(4, 20_000, dtype=torch.float64)).symbols
    y, state = transmit_awgn(x, 10.0, generator=torch.Generator().manual_seed(1))
    noise = y - x
    assert state.noise_sigma2 == pytest.approx(0.1)
    assert torch.all(state.h == 1)
    assert noise.real.var().item() == pytest.approx(0.05, rel=0.05)
    assert noise.imag.var().item() == pytest.approx(0.05, rel=0.05)


def test_awgn_noise_statistics_over_a_million_symbols():
    n_symbols = 1_000_000
    x = torch.zeros(1, n_symbols, dtype=torch.complex128)
    noise, _ = transmit_awgn(x, 10.0, generator=torch.Generator().manual_seed(11))
    bound = 4 * math.sqrt(0.05 / n_symbols)
    assert abs(noise.real.mean().item()) < bound
    assert abs(noise.imag.mean().item()) < bound
    assert noise.abs().pow(2).mean().item() == pytest.approx(0.1, rel=0.01)


def test_noise_draws_from_different_seeds_are_uncorrelated():
    x = torch.zeros(1, 50_000, dtype=torch.complex128)
    a, _ = transmit_awgn(x, 0.0, generator=torch.Generator().manual_seed(1))
    b, _ = transmit_awgn(x, 0.0, generator=torch.Generator().manual_seed(2))
    a, b = complex_to_reals(a).flatten(), complex_to_reals(b).flatten()
    rho = torch.corrcoef(torch.stack([a, b]))[0, 1].item()
    assert abs(rho) < 4 / math.sqrt(a.numel())


@pytest.mark.parametrize("channel_type", ["awgn", "rayleigh"])
def test_transmit_leaves_input_untouched(channel_type):
    x = power_normalize(torch.randn(4, 32)).symbols
    before = x.clone()
    transmit(x, channel_type, 5.0, torch.Generator().manual_seed(0))
    assert torch.equal(x, before)
    wrapped = power_normalize(torch.randn(4, 32))
    before = wrapped.symbols.clone()
    transmit(wrapped, channel_type, 5.0, torch.Generator().manual_seed(0))
    assert torch.equal(wrapped.symbols, before)


def test_equalized_rayleigh_noise_scales_with_gain():
    x = power_normalize(torch.randn(1, 2_000_000, dtype=torch.float64)).symbols
    h = torch.tensor(0.4 + 0.3j, dtype=torch.complex128)
    y, state = transmit_rayleigh(x, 10.0, torch.Generator().manual_seed(6), h=h)
    residual = (equalize(y, state) - x).abs().pow(2).mean().item()
    assert residual == pytest.approx(0.1 / abs(0.4 + 0.3j) ** 2, rel=0.02)


def test_channel_draws_are_reproducible():
    x = power_normalize(torch.randn(3, 16)).symbols
    y1, _ = transmit(x, "rayleigh", 5.0, torch.Generator().manual_seed(9))
    y2, _ = transmit(x, "rayleigh", 5.0, torch.Generator().manual_seed(9))
    assert torch.equal(y1, y2)


def test_rayleigh_with_injected_coefficient_equalizes():
    x = power_normalize(torch.randn(2, 16, dtype=torch.float64)).symbols
    h = torch.tensor(0.3 - 0.8j, dtype=torch.complex128)
    y, state = transmit_rayleigh(x, 120.0, torch.Generator().manual_seed(0), h=h)
    assert state.channel_type == "rayleigh"
    assert torch.allclose(state.gain(), torch.full((2,), abs(0.3 - 0.8j), dtype=torch.float64))
    assert torch.allclose(equalize(y, state), x, atol=1e-4)


def test_rayleigh_coefficients_have_unit_mean_power():
    x = power_normalize(torch.randn(20_000, 4, dtype=torch.float64)).symbols
    _, state = transmit_rayleigh(x, 10.0, torch.Generator().manual_seed(2))
    assert state.h.shape == (20_000,)
    assert state.h.abs().pow(2).mean().item() == pytest.approx(1.0, rel=0.05)


def test_unknown_channel_type():
    with pytest.raises(ValueError):
        transmit(torch.ones(1, 4, dtype=torch.complex64), "rician", 10.0)


def test_cbr_oracle():
    gen = torch.Generator().manual_seed(4)
    for _ in range(100):
        L, H, W, C = (int(v) for v in torch.randint(1, 64, (4,), generator=gen))
        assert math.isclose(cbr(L, H, W, C), L / (C * H * W), rel_tol=1e-6)


def test_cbr_examples_and_inverse():
    assert cbr_fraction(128, 32, 32, 3) == Fraction(1, 24)
    assert cbr(0, 32, 32, 3) == 0.0
    assert symbols_for_cbr(Fraction(1, 24), 32, 32, 3) == 128
    assert symbols_for_cbr("1/4", 8, 8, 3) == 48
    with pytest.raises(ValueError):
        symbols_for_cbr(Fraction(1, 7), 8, 8, 3)
    with pytest.raises(ValueError):
        cbr(4, 0, 8, 3)
