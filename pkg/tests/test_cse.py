import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uidsc.cse import embed_noise_map, noise_level, signal_power


class TestSignalPower:
    def test_all_ones(self):
        assert float(signal_power(torch.ones(2, 4, 4))) == 1.0

    def test_all_zeros(self):
        assert float(signal_power(torch.zeros(3, 4, 4))) == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(2, 5, 7))
        total = 0.0
        for c in range(2):
            for i in range(5):
                for j in range(7):
                    total += z[c, i, j] ** 2
        want = total / (2 * 5 * 7)
        got = float(signal_power(torch.from_numpy(z)))
        assert got == pytest.approx(want, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            signal_power(torch.zeros(0, 4, 4))

    @given(st.floats(min_value=0.01, max_value=100))
    @settings(max_examples=30, deadline=None)
    def test_homogeneity(self, alpha):
        z = torch.from_numpy(np.random.default_rng(0).normal(size=(3, 4, 4)))
        assert float(signal_power(alpha * z)) == pytest.approx(
            alpha**2 * float(signal_power(z)), rel=1e-9
        )


class TestNoiseLevel:
    def test_snr0(self):
        assert noise_level(1.0, 0.0) == 1.0

    def test_snr10(self):
        assert noise_level(1.0, 10.0) == pytest.approx(0.1, rel=1e-12)

    def test_snr3_high_precision(self):
        # 2 / 10^0.3 = 1.0023744672... (mpmath, 50 digits)
        assert noise_level(2.0, 3.0) == pytest.approx(1.00237, abs=5e-6)

    def test_negative_power_rejected(self):
        with pytest.raises(ValueError):
            noise_level(-1.0, 5.0)
        with pytest.raises(ValueError):
            noise_level(torch.tensor([-0.5]), 5.0)

    def test_monotone_in_snr(self):
        grid = np.arange(-5.0, 25.1, 1.0)
        levels = [noise_level(1.7, s) for s in grid]
        assert all(a > b for a, b in zip(levels, levels[1:]))


class TestEmbedNoiseMap:
    def test_shape_contract(self):
        z = torch.randn(4, 8, 8)
        assert embed_noise_map(z, 10.0).shape == (5, 8, 8)
        zb = torch.randn(2, 4, 8, 8)
        assert embed_noise_map(zb, 10.0).shape == (2, 5, 8, 8)

    def test_all_ones_snr0(self):
        out = embed_noise_map(torch.ones(4, 8, 8), 0.0)
        assert torch.equal(out[-1], torch.ones(8, 8))

    def test_appended_channel_value(self):
        z = torch.from_numpy(np.random.default_rng(5).normal(size=(3, 6, 6)))
        out = embed_noise_map(z, 7.0)
        want = float(noise_level(signal_power(z), 7.0))
        appended = out[-1]
        assert torch.all(appended == appended.reshape(-1)[0])
        assert float(appended[0, 0]) == pytest.approx(want, abs=1e-9)

    def test_original_channels_bit_exact(self):
        z = torch.randn(2, 3, 5, 5)
        out = embed_noise_map(z, 4.0)
        assert torch.equal(out[:, :3], z)

    def test_per_sample_power(self):
        a = torch.ones(1, 2, 4, 4)
        b = 2 * torch.ones(1, 2, 4, 4)
        out = embed_noise_map(torch.cat([a, b]), 0.0)
        assert float(out[0, -1, 0, 0]) == pytest.approx(1.0)
        assert float(out[1, -1, 0, 0]) == pytest.approx(4.0)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_strictly_decreasing_in_snr(self, seed):
        z = torch.from_numpy(np.random.default_rng(seed).normal(size=(2, 4, 4)) + 0.1)
        values = [float(embed_noise_map(z, s)[-1, 0, 0]) for s in np.arange(-5.0, 25.1, 2.5)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_stop_gradient_default(self):
        z = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
        out = embed_noise_map(z, 5.0)
        out[-1].sum().backward()
        assert torch.equal(z.grad, torch.zeros_like(z))

    def test_gradient_flows_when_enabled(self):
        z = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
        out = embed_noise_map(z, 5.0, stop_gradient=False)
        out[-1].sum().backward()
        assert float(z.grad.abs().sum()) > 0

    def test_log_scale_option(self):
        z = torch.ones(1, 4, 4)
        out = embed_noise_map(z, 0.0, log_scale=True)
        assert float(out[-1, 0, 0]) == pytest.approx(float(np.log1p(1.0)))

    def test_bad_rank_rejected(self):
        with pytest.raises(ValueError):
            embed_noise_map(torch.ones(4, 4), 0.0)
