"""System model: quantizer, channel draws, sensing operator vs dense oracles."""

import math

import numpy as np
import pytest
from scipy import optimize

from qmimo.gaussian import big_phi, phi
from qmimo.system import (ChannelOperator, ConfigError, SystemConfig,
                          apply_A, apply_A_adjoint, dense_sensing_matrix,
                          draw_channel, load_channel, make_quantizer,
                          quantize, quantizer_for, realization_p_z,
                          save_channel, spectrum, thresholds, transmit)


def small_cfg(**kw):
    base = dict(n_t=2, n_r=2, n_c=8, taps_l=4, snr_db=10.0, adc_bits=(2, 2), seed=7)
    base.update(kw)
    return SystemConfig(**base)


class TestSystemConfig:
    def test_derived_sizes(self):
        cfg = small_cfg()
        assert cfg.m == 16 and cfg.n == 16
        assert cfg.sigma2 == pytest.approx(0.1)

    def test_rejects_more_streams_than_chains(self):
        with pytest.raises(ConfigError):
            small_cfg(n_t=3)

    def test_rejects_non_power_of_two_subcarriers(self):
        with pytest.raises(ConfigError):
            small_cfg(n_c=12)

    def test_rejects_wrong_adc_list_length(self):
        with pytest.raises(ConfigError):
            small_cfg(adc_bits=(1,))

    def test_rejects_bad_bits(self):
        with pytest.raises(ConfigError):
            small_cfg(adc_bits=(4, 4))

    def test_groups_cover_all_chains(self):
        cfg = small_cfg(n_t=2, n_r=4, adc_bits=(1, "inf", 1, 3))
        groups = cfg.adc_groups()
        assert [b for b, _ in groups] == [1, 3, math.inf]
        assert sorted(np.concatenate([c for _, c in groups]).tolist()) == [0, 1, 2, 3]


class TestQuantizer:
    def test_one_bit_codebook_with_override(self):
        q = make_quantizer(1, 1.0, scale_override=2.0)
        assert np.allclose(q.codebook, [-1.0, 1.0])

    def test_two_bit_codebook_with_override(self):
        q = make_quantizer(2, 1.0, scale_override=2.0)
        assert np.allclose(q.codebook, [-3.0, -1.0, 1.0, 3.0])

    def test_optimal_step_constants_vs_optimizer_oracle(self):
        # minimize E(y-Q(y))^2 for y ~ N(0,1) by closed-form bin moments
        def distortion(delta, bits):
            half = (1 << bits) // 2
            b = np.arange(1 - half, half + 1, dtype=float)
            c = (b - 0.5) * delta
            lo = np.where(b > 1 - half, c - delta / 2, -np.inf)
            up = np.where(b < half, c + delta / 2, np.inf)
            d = 0.0
            for ci, lo_i, up_i in zip(c, lo, up):
                m0 = big_phi(up_i) - big_phi(lo_i)
                m1 = (phi(lo_i) if np.isfinite(lo_i) else 0.0) - (phi(up_i) if np.isfinite(up_i) else 0.0)
                t_lo = lo_i * phi(lo_i) if np.isfinite(lo_i) else 0.0
                t_up = up_i * phi(up_i) if np.isfinite(up_i) else 0.0
                m2 = m0 + t_lo - t_up
                d += m2 - 2 * ci * m1 + ci * ci * m0
            return d

        want = {1: 1.5956, 2: 0.9957, 3: 0.5860}
        for bits, const in want.items():
            res = optimize.minimize_scalar(lambda d: distortion(d, bits),
                                           bounds=(0.05, 3.0), method="bounded")
            assert res.x == pytest.approx(const, abs=2e-3)
            q = make_quantizer(bits, 1.0)
            assert q.step == pytest.approx(const, abs=1e-6)

    def test_step_scales_with_power(self):
        assert make_quantizer(1, 0.25).step == pytest.approx(1.5956 * 0.5)

    def test_unsupported_width(self):
        with pytest.raises(ConfigError):
            make_quantizer(4, 1.0)
        with pytest.raises(ConfigError):
            make_quantizer(13, 1.0, scale_override=0.1)

    def test_bins_partition_real_line(self):
        q = make_quantizer(3, 1.0)
        assert q.lows[0] == -np.inf and q.ups[-1] == np.inf
        assert np.allclose(q.ups[:-1], q.lows[1:])
        assert np.all(q.lows < q.ups)
        assert np.allclose(q.codebook, -q.codebook[::-1])

    def test_quantize_examples(self):
        q1 = make_quantizer(1, 1.0, scale_override=2.0)
        assert quantize(q1, np.array([0.3 - 0.7j]))[0] == 1 - 1j
        q2 = make_quantizer(2, 1.0, scale_override=2.0)
        assert q2.quantize_real(5.0) == 3.0   # saturation into the outer bin
        assert q2.quantize_real(-0.999) == -1.0
        assert q2.quantize_real(0.0) == -1.0  # bins are (low, up]

    def test_thresholds_examples(self):
        q1 = make_quantizer(1, 1.0, scale_override=2.0)
        assert thresholds(q1, 1.0) == (0.0, np.inf)
        assert thresholds(q1, -1.0) == (-np.inf, 0.0)
        q3 = make_quantizer(3, 1.0, scale_override=1.0)
        assert thresholds(q3, 0.5) == (0.0, 1.0)

    def test_thresholds_reject_non_codebook_value(self):
        q = make_quantizer(2, 1.0, scale_override=2.0)
        with pytest.raises(ValueError):
            thresholds(q, 0.5)

    def test_quantize_round_trips_through_own_bin(self):
        q = make_quantizer(3, 0.5)
        y = np.random.default_rng(0).normal(0, 1.5, 2000)
        yq = q.quantize_real(y)
        idx = q.value_index(yq)
        assert np.all(y > q.lows[idx]) and np.all(y <= q.ups[idx])


class TestChannel:
    def test_fixed_seed_reproducible(self):
        cfg = small_cfg()
        a = draw_channel(cfg, 5)
        b = draw_channel(cfg, 5)
        assert np.array_equal(a.taps, b.taps)
        assert np.array_equal(a.fbb_permutation, b.fbb_permutation)

    def test_tap_power(self):
        cfg = small_cfg(n_r=2, n_t=2, taps_l=4)
        rng = np.random.default_rng(11)
        taps = np.concatenate([draw_channel(cfg, rng).taps.ravel() for _ in range(6250)])
        assert taps.size == 100_000
        assert np.mean(np.abs(taps) ** 2) == pytest.approx(1 / 4, rel=0.02)

    def test_single_tap_flat_spectrum(self):
        cfg = small_cfg(taps_l=1)
        ch = draw_channel(cfg, 3)
        assert np.allclose(ch.freq_response, ch.freq_response[:1], atol=1e-12)

    def test_freq_response_is_dft_of_taps(self):
        cfg = small_cfg()
        ch = draw_channel(cfg, 3)
        k = np.arange(cfg.n_c)
        for r in range(cfg.n_r):
            for t in range(cfg.n_t):
                padded = np.zeros(cfg.n_c, complex)
                padded[: cfg.taps_l] = ch.taps[r, t]
                dft = np.exp(-2j * np.pi * np.outer(k, k) / cfg.n_c) @ padded
                assert np.allclose(ch.freq_response[:, r, t], dft, atol=1e-10)

    def test_export_import_round_trip(self, tmp_path):
        cfg = small_cfg()
        ch = draw_channel(cfg, 9)
        path = tmp_path / "chan.npz"
        save_channel(ch, path)
        back = load_channel(path)
        assert np.array_equal(back.taps, ch.taps)
        assert np.array_equal(back.fbb_permutation, ch.fbb_permutation)
        assert np.allclose(back.freq_response, ch.freq_response)
        assert back.config_digest == ch.config_digest


class TestOperator:
    def test_zero_maps_to_zero(self):
        cfg = small_cfg()
        ch = draw_channel(cfg, 3)
        assert np.allclose(apply_A(ch, np.zeros(cfg.n, complex)), 0)
        assert np.allclose(apply_A_adjoint(ch, np.zeros(cfg.m, complex)), 0)

    def test_scalar_flat_channel_is_identity(self):
        # 1x1, L=1, |h|=1, identity permutation: A = F^H Lambda F_BB with
        # Lambda = h I, so |A x| = |x| and A reduces to h times a DFT pair
        cfg = SystemConfig(n_t=1, n_r=1, n_c=8, taps_l=1, adc_bits=("inf",), seed=0)
        ch = draw_channel(cfg, 3)
        taps = np.ones((1, 1, 1), complex)
        from qmimo.system import ChannelRealization

        ch = ChannelRealization(taps=taps,
                                freq_response=np.moveaxis(np.fft.fft(taps, 8, axis=-1), -1, 0),
                                fbb_permutation=np.arange(8), norm=1.0)
        x = np.random.default_rng(0).standard_normal(8) + 0j
        assert np.allclose(apply_A(ch, x), x, atol=1e-12)

    def test_matches_dense_construction(self):
        cfg = small_cfg()
        ch = draw_channel(cfg, 3)
        a = dense_sensing_matrix(ch)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(cfg.n) + 1j * rng.standard_normal(cfg.n)
        z = rng.standard_normal(cfg.m) + 1j * rng.standard_normal(cfg.m)
        assert np.linalg.norm(apply_A(ch, x) - a @ x) < 1e-10 * np.linalg.norm(a @ x)
        want = a.conj().T @ z
        assert np.linalg.norm(apply_A_adjoint(ch, z) - want) < 1e-10 * np.linalg.norm(want)

    def test_adjoint_identity(self):
        cfg = small_cfg(n_c=16)
        ch = draw_channel(cfg, 5)
        rng = np.random.default_rng(2)
        x = rng.standard_normal(cfg.n) + 1j * rng.standard_normal(cfg.n)
        z = rng.standard_normal(cfg.m) + 1j * rng.standard_normal(cfg.m)
        lhs = np.vdot(z, apply_A(ch, x))
        rhs = np.vdot(apply_A_adjoint(ch, z), x)
        assert abs(lhs - rhs) < 1e-10 * abs(lhs)

    def test_dimension_mismatch(self):
        cfg = small_cfg()
        ch = draw_channel(cfg, 3)
        with pytest.raises(ValueError):
            apply_A(ch, np.zeros(cfg.n + 1, complex))
        with pytest.raises(ValueError):
            apply_A_adjoint(ch, np.zeros(cfg.m - 1, complex))


class TestSpectrum:
    def test_flat_unit_channel(self):
        from qmimo.system import ChannelRealization

        taps = np.ones((1, 1, 1), complex)
        ch = ChannelRealization(taps=taps,
                                freq_response=np.moveaxis(np.fft.fft(taps, 8, axis=-1), -1, 0),
                                fbb_permutation=np.arange(8), norm=1.0)
        lam = spectrum(ch).eigenvalues
        assert np.allclose(lam, 1.0, atol=1e-12)

    def test_matches_dense_eigensolver(self):
        cfg = small_cfg()
        ch = draw_channel(cfg, 3)
        a = dense_sensing_matrix(ch)
        dense = np.sort(np.linalg.eigvalsh(a.conj().T @ a))
        assert np.allclose(spectrum(ch).eigenvalues, dense, atol=1e-8)

    def test_trace_identity(self):
        cfg = small_cfg(n_c=16)
        ch = draw_channel(cfg, 8)
        a = dense_sensing_matrix(ch)
        lam = spectrum(ch).eigenvalues
        assert lam.sum() == pytest.approx(np.trace(a.conj().T @ a).real, rel=1e-8)
        assert np.all(lam >= 0)
        assert realization_p_z(ch) == pytest.approx(lam.mean() * cfg.n / cfg.m, rel=1e-12)


class TestTransmit:
    def test_noiseless_unquantized_passthrough(self):
        cfg = small_cfg(snr_db=300.0, adc_bits=("inf", "inf"))
        ch = draw_channel(cfg, 3)
        x = np.random.default_rng(0).standard_normal(cfg.n) + 0j
        y, yq = transmit(cfg, ch, x, 1)
        assert np.allclose(yq, apply_A(ch, x), atol=1e-12)

    def test_one_bit_outputs_in_codebook(self):
        cfg = small_cfg(adc_bits=(1, 1))
        ch = draw_channel(cfg, 3)
        x = np.random.default_rng(0).standard_normal(cfg.n) + 0j
        _, yq = transmit(cfg, ch, x, 1)
        q = quantizer_for(cfg, 1, realization_p_z(ch))
        vals = set(np.round(q.codebook, 12))
        assert set(np.round(yq.real, 12)) <= vals
        assert set(np.round(yq.imag, 12)) <= vals

    def test_empirical_snr(self):
        # E|Ax|^2 / E|n|^2 over many draws approaches 1/sigma2
        cfg = SystemConfig(n_t=2, n_r=2, n_c=64, taps_l=4, snr_db=10.0,
                           adc_bits=("inf", "inf"), seed=0)
        rng = np.random.default_rng(4)
        sig = noise = 0.0
        from qmimo.constellation import draw_symbols

        for _ in range(300):
            ch = draw_channel(cfg, rng)
            x = draw_symbols("qpsk", cfg.n, rng)
            z = apply_A(ch, x)
            y, _ = transmit(cfg, ch, x, rng)
            sig += np.mean(np.abs(z) ** 2)
            noise += np.mean(np.abs(y - z) ** 2)
        assert sig / noise == pytest.approx(1 / cfg.sigma2, rel=0.03)

    def test_power_bookkeeping(self):
        # P_z from the spectrum equals the empirical mean of |Ax|^2
        cfg = SystemConfig(n_t=2, n_r=2, n_c=64, taps_l=4, adc_bits=("inf",) * 2, seed=0)
        ch = draw_channel(cfg, 12)
        p_z = realization_p_z(ch)
        rng = np.random.default_rng(5)
        from qmimo.constellation import draw_symbols

        power = np.mean([np.mean(np.abs(apply_A(ch, draw_symbols("qpsk", cfg.n, rng))) ** 2)
                         for _ in range(400)])
        assert power == pytest.approx(p_z, rel=0.03)


def test_operator_batch_matches_single():
    cfg = small_cfg(n_c=16)
    chans = [draw_channel(cfg, s) for s in (1, 2, 3)]
    op = ChannelOperator.from_channels(chans)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, cfg.n)) + 1j * rng.standard_normal((3, cfg.n))
    batched = op.apply(x)
    for i, ch in enumerate(chans):
        assert np.allclose(batched[i], apply_A(ch, x[i]), atol=1e-12)
