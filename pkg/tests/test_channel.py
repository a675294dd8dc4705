import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uidsc.channel import (
    Channel,
    ChannelConfig,
    DeepFadeError,
    DegenerateSignalError,
    awgn_transmit,
    draw_rayleigh_gain,
    equalize,
    from_complex,
    measure_snr,
    noise_variance_for,
    power_normalize,
    rayleigh_transmit,
    to_complex,
)


def gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestPacking:
    def test_pairs(self):
        z = to_complex(torch.tensor([1.0, 2.0, 3.0, 4.0]))
        assert torch.equal(z, torch.tensor([1 + 2j, 3 + 4j], dtype=torch.complex64))

    def test_round_trip(self):
        v = torch.randn(128, dtype=torch.float64)
        assert torch.equal(from_complex(to_complex(v)), v)

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError, match="even"):
            to_complex(torch.ones(3))

    def test_from_complex_single(self):
        assert torch.equal(from_complex(torch.tensor([1 + 2j])), torch.tensor([1.0, 2.0]))

    def test_zeros(self):
        assert torch.equal(from_complex(to_complex(torch.zeros(8))), torch.zeros(8))


class TestPowerNormalize:
    def test_unit_power_fixed_point(self):
        v = torch.tensor([1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0], dtype=torch.float64)
        z, scale = power_normalize(v)
        assert float(scale) == pytest.approx(1.0)
        assert torch.equal(z, to_complex(v))

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_mean_power_one(self, seed):
        rng = np.random.default_rng(seed)
        v = torch.from_numpy(rng.normal(0, rng.uniform(0.1, 10), size=64))
        z, _ = power_normalize(v)
        p = float((z.real**2 + z.imag**2).mean())
        assert abs(p - 1.0) <= 1e-6

    def test_all_zeros_degenerate(self):
        with pytest.raises(DegenerateSignalError):
            power_normalize(torch.zeros(16))

    def test_differentiable(self):
        v = torch.randn(16, dtype=torch.float64, requires_grad=True)
        z, _ = power_normalize(v)
        z.real.sum().backward()
        assert v.grad is not None and torch.isfinite(v.grad).all()

    def test_batched_per_row(self):
        v = torch.randn(3, 32, dtype=torch.float64) * torch.tensor([[0.1], [1.0], [7.0]])
        z, scale = power_normalize(v)
        p = (z.real**2 + z.imag**2).mean(dim=-1)
        assert torch.allclose(p, torch.ones(3, dtype=torch.float64))
        assert scale.shape == (3,)


class TestNoiseVarianceLaw:
    def test_snr_zero(self):
        assert float(noise_variance_for(torch.tensor(1.0), 0.0)) == 1.0

    @given(st.floats(min_value=-20, max_value=40), st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=60, deadline=None)
    def test_exact_formula(self, snr_db, p):
        got = float(noise_variance_for(torch.tensor(p, dtype=torch.float64), snr_db))
        want = p * 10.0 ** (-snr_db / 10.0)
        assert got == pytest.approx(want, rel=1e-12)


class TestAwgn:
    def test_infinite_snr_identity(self):
        z, _ = power_normalize(torch.randn(32, dtype=torch.float64))
        out = awgn_transmit(z, math.inf, gen())
        assert torch.equal(out.received, z)
        assert float(out.noise_variance) == 0.0

    def test_snr0_unit_sigma(self):
        z, _ = power_normalize(torch.randn(64, dtype=torch.float64))
        out = awgn_transmit(z, 0.0, gen())
        assert float(out.noise_variance) == pytest.approx(1.0, rel=1e-12)

    def test_monte_carlo_snr(self):
        # 1e6 unit-power symbols at 10 dB: measured SNR within 0.1 dB.
        z, _ = power_normalize(torch.randn(2_000_000, dtype=torch.float64))
        out = awgn_transmit(z, 10.0, gen(1))
        assert measure_snr(z, out.received) == pytest.approx(10.0, abs=0.1)

    def test_deterministic_given_seed(self):
        z, _ = power_normalize(torch.randn(256, dtype=torch.float64))
        a = awgn_transmit(z, 5.0, gen(7)).received
        b = awgn_transmit(z, 5.0, gen(7)).received
        assert torch.equal(a, b)

    def test_gradient_is_identity(self):
        # Noise is a constant sample, so d(received)/d(z) = I.
        v = torch.randn(32, dtype=torch.float64, requires_grad=True)
        z = to_complex(v)
        out = awgn_transmit(z, 3.0, gen(2))
        loss = from_complex(out.received).sum()
        loss.backward()
        assert torch.allclose(v.grad, torch.ones_like(v), rtol=1e-12, atol=0)

    def test_forced_noise_hook(self):
        z = to_complex(torch.ones(8, dtype=torch.float64))
        forced = torch.full((4,), 1 + 1j, dtype=torch.complex128)
        out = awgn_transmit(z, 0.0, gen(), forced_noise=forced)
        assert torch.equal(out.received, z + forced)


class TestRayleigh:
    def test_gain_second_moment(self):
        h = draw_rayleigh_gain(1.0, gen(3), n=1_000_000)
        e2 = float((h.real**2 + h.imag**2).mean())
        assert 0.99 <= e2 <= 1.01

    def test_forced_identity_channel(self):
        z, _ = power_normalize(torch.randn(32, dtype=torch.float64))
        out = rayleigh_transmit(z, math.inf, 1.0, gen(), forced_gain=1 + 0j)
        assert torch.allclose(out.received, z)

    def test_gain_magnitude_distribution(self):
        # |h| ~ Rayleigh(sigma_R = sqrt(h_c/2)); KS statistic below 0.01 at 1e5.
        from scipy import stats

        h = draw_rayleigh_gain(1.0, gen(11), n=100_000, dtype=torch.complex128)
        mag = h.abs().numpy()
        ks = stats.kstest(mag, "rayleigh", args=(0, math.sqrt(0.5))).statistic
        assert ks < 0.01

    def test_noiseless_equalization_round_trip(self):
        z, _ = power_normalize(torch.randn(64, dtype=torch.float64))
        out = rayleigh_transmit(z, math.inf, 1.0, gen(5))
        back = equalize(out)
        assert torch.allclose(back, z, atol=1e-9)

    def test_bad_h_c_rejected(self):
        z = to_complex(torch.ones(4))
        with pytest.raises(ValueError, match="h_c"):
            rayleigh_transmit(z, 10.0, 0.0, gen())

    def test_gain_components_gaussian(self):
        h = draw_rayleigh_gain(2.0, gen(13), n=200_000, dtype=torch.complex128)
        for part in (h.real, h.imag):
            assert float(part.mean()) == pytest.approx(0.0, abs=0.02)
            assert float(part.var()) == pytest.approx(1.0, rel=0.03)


class TestEqualize:
    def test_identity_gain(self):
        z = to_complex(torch.randn(16, dtype=torch.float64))
        out = awgn_transmit(z, math.inf, gen())
        assert torch.equal(equalize(out), z)

    def test_scalar_division(self):
        from uidsc.channel import ChannelOutcome

        out = ChannelOutcome(
            received=torch.tensor([2 + 2j], dtype=torch.complex128),
            gain=torch.tensor(2 + 0j, dtype=torch.complex128),
            noise_variance=torch.tensor(0.0),
        )
        assert torch.allclose(equalize(out), torch.tensor([1 + 1j], dtype=torch.complex128))

    def test_deep_fade_error(self):
        from uidsc.channel import ChannelOutcome

        out = ChannelOutcome(
            received=torch.ones(4, dtype=torch.complex128),
            gain=torch.tensor(1e-8 + 0j, dtype=torch.complex128),
            noise_variance=torch.tensor(0.0),
        )
        with pytest.raises(DeepFadeError):
            equalize(out)


class TestMeasureSnr:
    def test_identical_is_inf(self):
        z = to_complex(torch.randn(8))
        assert measure_snr(z, z) == math.inf

    def test_known_ratio(self):
        # Unit-power signal plus noise of power 0.1 -> 10 dB.
        clean = to_complex(torch.ones(20, dtype=torch.float64))  # |1+1i|^2 = 2
        noise = torch.full((10,), math.sqrt(0.2), dtype=torch.complex128)  # power 0.2
        assert measure_snr(clean, clean + noise) == pytest.approx(10.0 * math.log10(2 / 0.2))

    def test_consistency_with_awgn(self):
        z, _ = power_normalize(torch.randn(2_000_000, dtype=torch.float64))
        out = awgn_transmit(z, 5.0, gen(17))
        assert measure_snr(z, out.received) == pytest.approx(5.0, abs=0.1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            measure_snr(torch.ones(4, dtype=torch.complex64), torch.ones(5, dtype=torch.complex64))


class TestChannelInstance:
    def test_counter_advances_noise(self):
        ch = Channel(ChannelConfig(kind="awgn", snr_db=10.0, seed=5))
        z, _ = power_normalize(torch.randn(64, dtype=torch.float64))
        a = ch.transmit(z).received
        b = ch.transmit(z).received
        assert not torch.equal(a, b)

    def test_reproducible_stream(self):
        z, _ = power_normalize(torch.randn(64, dtype=torch.float64))
        runs = []
        for _ in range(2):
            ch = Channel(ChannelConfig(kind="rayleigh", snr_db=4.0, seed=9))
            runs.append([ch.transmit(z).received for _ in range(3)])
        for a, b in zip(*runs):
            assert torch.equal(a, b)

    def test_snr_override(self):
        ch = Channel(ChannelConfig(kind="awgn", snr_db=0.0, seed=1))
        z, _ = power_normalize(torch.randn(100_000, dtype=torch.float64))
        out = ch.transmit(z, snr_db=20.0)
        assert measure_snr(z, out.received) == pytest.approx(20.0, abs=0.3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChannelConfig(kind="awgn", snr_db=math.nan)
        with pytest.raises(ValueError):
            ChannelConfig(kind="rayleigh", snr_db=10.0, h_c=-1.0)
        with pytest.raises(ValueError):
            ChannelConfig(kind="laser", snr_db=10.0)
