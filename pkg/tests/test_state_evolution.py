"""State-evolution recursion, scalar-channel maps, and their limit identities."""

import math

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats

from qmimo.constellation import constellation_points, hard_decision
from qmimo.gaussian import gauss_hermite
from qmimo.state_evolution import (mse_qpsk, mse_square_qam, se_alpha,
                                   se_initial_state, se_run, se_run_ensemble,
                                   se_step, ser_qpsk, ser_square_qam,
                                   spectrum_expectation)
from qmimo.system import (Spectrum, SystemConfig, draw_channel,
                          make_quantizer, spectrum)

mpmath.mp.dps = 40


class TestScalarMaps:
    def test_mse_qpsk_limits(self):
        assert mse_qpsk(0.0) == pytest.approx(1.0, abs=1e-12)
        assert mse_qpsk(1e6) < 1e-10

    def test_mse_qpsk_vs_adaptive_oracle(self):
        want = 1.0 - integrate.quad(
            lambda z: math.tanh(1.0 + z) * stats.norm.pdf(z), -12, 12)[0]
        assert mse_qpsk(1.0) == pytest.approx(want, abs=1e-9)

    def test_ser_qpsk_values(self):
        assert ser_qpsk(0.0) == pytest.approx(0.75)
        q2 = float(0.5 * mpmath.erfc(2 / mpmath.sqrt(2)))  # Q(2) via erfc oracle
        assert ser_qpsk(4.0) == pytest.approx(2 * q2 - q2 * q2, rel=1e-10)
        assert ser_qpsk(4.0) == pytest.approx(4.4983e-2, rel=1e-4)
        assert ser_qpsk(1e8) < 1e-12

    def test_square_qam_reduces_to_qpsk(self):
        for g in np.linspace(0, 20, 21):
            assert ser_square_qam(g, 4) == pytest.approx(ser_qpsk(g), abs=1e-12)

    def test_qam16_at_zero(self):
        assert ser_square_qam(0.0, 16) == pytest.approx(0.9375)

    def test_qam16_vs_scalar_channel_monte_carlo(self):
        # decoupled channel r = x + w, w ~ CN(0, 1/gamma)
        gamma = 10.0
        rng = np.random.default_rng(0)
        pts = constellation_points("16qam")
        x = pts[rng.integers(0, 16, 1_000_000)]
        w = (rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size)) * math.sqrt(0.5 / gamma)
        hard, _ = hard_decision(x + w, "16qam")
        ser_mc = np.mean(hard != x)
        want = ser_square_qam(gamma, 16)
        tol = 3 * math.sqrt(want * (1 - want) / x.size)
        assert abs(ser_mc - want) < tol

    def test_unsupported_order(self):
        with pytest.raises(ValueError):
            ser_square_qam(1.0, 32)

    def test_mse_square_qam_qpsk_consistency(self):
        # the PAM-enumeration route integrates a sharper function than the
        # logistic form, so agreement is quadrature-grade, not exact
        for g in (0.3, 1.0, 5.0):
            assert mse_square_qam(g, 4) == pytest.approx(mse_qpsk(g), rel=2e-3)

    def test_spectrum_expectation(self):
        sp = Spectrum(np.full(10, 2.5))
        assert spectrum_expectation(sp, lambda x: x) == pytest.approx(2.5)
        assert spectrum_expectation(sp, lambda x: np.ones_like(x)) == pytest.approx(1.0)


class TestSeAlpha:
    def test_matches_brute_force_integration(self):
        # adaptive quadrature of the codebook sum with plain cdf/pdf
        q = make_quantizer(1, 0.5, scale_override=2.0)
        v_1z, v_z, s2 = 1.0, 1.0, 1.0

        def integrand(u, lo, up):
            spread = math.sqrt(max(v_z - v_1z, 0.0) / 2)
            tau = math.sqrt((s2 + v_1z) / 2)
            z = spread * u
            mass = stats.norm.cdf((z - lo) / tau) - stats.norm.cdf((z - up) / tau)
            dmass = (stats.norm.pdf((z - lo) / tau) - stats.norm.pdf((z - up) / tau)) / tau
            return (dmass**2 / mass) * stats.norm.pdf(u) if mass > 0 else 0.0

        want = 0.5 * sum(
            integrate.quad(integrand, -10, 10, args=(lo, up), limit=300)[0]
            for lo, up in zip(q.lows, q.ups))
        got = se_alpha(v_1z, v_z, s2, q)
        assert got == pytest.approx(want, abs=1e-6)

    def test_first_iteration_degenerate_spread(self):
        # v_1z = v_z kills the outer integral; result equals the closed sum
        q = make_quantizer(2, 0.5)
        rule = gauss_hermite(64)
        a64 = se_alpha(0.9, 0.9, 0.3, q, rule)
        a2 = se_alpha(0.9, 0.9, 0.3, q, gauss_hermite(2))
        assert a64 == pytest.approx(a2, rel=1e-12)

    def test_fine_grid_matches_unquantized_limit(self):
        v_1z, v_z, s2 = 0.5, 1.0, 0.1
        step = math.sqrt((s2 + v_1z) / 2) / 24
        q = make_quantizer(8, 0.5, scale_override=step)
        assert se_alpha(v_1z, v_z, s2, q) == pytest.approx(1 / (s2 + v_1z), rel=0.01)

    def test_fine_grid_posterior_variance_matches_eq37_form(self):
        # v - alpha v^2 against the AWGN posterior variance
        v_1z, v_z, s2 = 0.5, 1.0, 0.1
        step = math.sqrt((s2 + v_1z) / 2) / 24
        q = make_quantizer(8, 0.5, scale_override=step)
        a = se_alpha(v_1z, v_z, s2, q)
        assert v_1z - a * v_1z**2 == pytest.approx(v_1z * s2 / (v_1z + s2), rel=0.01)


def _spectra(cfg, count, seed=1):
    rng = np.random.default_rng(seed)
    return [spectrum(draw_channel(cfg, rng)) for _ in range(count)]


class TestSeStep:
    def test_hand_traced_reference_step(self):
        # straight-line transcription of one recursion sweep, independent of
        # the library control flow
        cfg = SystemConfig(n_t=2, n_r=2, n_c=8, taps_l=4, snr_db=10.0,
                           adc_bits=(2, 2), seed=0)
        lam = np.array([0.2, 0.5, 0.9, 1.3, 1.7, 0.4, 1.1, 0.8,
                        0.3, 0.6, 1.0, 1.4, 0.7, 1.2, 0.35, 0.95])
        sp = Spectrum(lam)
        state = se_initial_state(sp, cfg)
        new, _, _ = se_step(state, sp, cfg)

        from qmimo.system import quantizer_for

        sigma2 = cfg.sigma2
        v_z = lam.mean()
        v0 = lam.mean() * cfg.n / cfg.m
        q = quantizer_for(cfg, 2, v_z * cfg.n / cfg.m)
        alpha = se_alpha(min(v0, v_z - 1e-12), v_z, sigma2, q)
        v_post = v0 - alpha * v0**2
        gamma_2z = 1 / v_post - 1 / v0
        q_x = np.mean(1 / (lam * gamma_2z + 1.0))
        gamma_1x = 1 / q_x - 1.0
        mse = mse_qpsk(gamma_1x)
        gamma_2x = 1 / mse - gamma_1x
        q_z = np.mean(lam / (lam * gamma_2z + gamma_2x)) * cfg.n / cfg.m
        gamma_1z = 1 / q_z - gamma_2z

        assert new.gamma_2z == pytest.approx(gamma_2z, rel=1e-10)
        assert new.gamma_1x == pytest.approx(gamma_1x, rel=1e-10)
        assert new.gamma_2x == pytest.approx(gamma_2x, rel=1e-8)
        assert new.gamma_1z == pytest.approx(gamma_1z, rel=1e-8)
        assert new.v_1z == pytest.approx(1 / gamma_1z, rel=1e-8)
        assert new.v_1z_post == pytest.approx(v_post, rel=1e-10)

    def test_single_group_share_identity(self):
        cfg = SystemConfig(n_t=2, n_r=2, n_c=8, taps_l=4, snr_db=10.0,
                           adc_bits=(2, 2), seed=0)
        sp = _spectra(cfg, 1)[0]
        state, _, _ = se_step(se_initial_state(sp, cfg), sp, cfg)
        assert state.v_1z_post == pytest.approx(state.v_1z_post_groups[2], rel=1e-12)

    def test_reciprocal_consistency(self):
        cfg = SystemConfig(n_t=2, n_r=2, n_c=16, taps_l=4, snr_db=10.0,
                           adc_bits=(1, 1), seed=0)
        sp = _spectra(cfg, 1)[0]
        state = se_initial_state(sp, cfg)
        for _ in range(5):
            state, _, _ = se_step(state, sp, cfg)
            assert state.v_1z * state.gamma_1z == pytest.approx(1.0, abs=1e-12)

    def test_initialization_contract(self):
        cfg = SystemConfig(n_t=2, n_r=4, n_c=16, taps_l=4, adc_bits=(1,) * 4, seed=0)
        sp = _spectra(cfg, 1)[0]
        st = se_initial_state(sp, cfg)
        assert st.v_1z == pytest.approx(sp.mean * cfg.n / cfg.m)
        assert st.gamma_2x == pytest.approx(1.0)


class TestSeRun:
    def test_unquantized_flat_spectrum_one_step_fixed_point(self):
        cfg = SystemConfig(n_t=2, n_r=2, n_c=16, taps_l=4,
                           adc_bits=("inf", "inf"), snr_db=10.0, seed=0)
        sp = Spectrum(np.full(cfg.n, 0.8))
        traj = se_run(cfg, sp)
        assert traj.states[0].gamma_1x == pytest.approx(0.8 / cfg.sigma2, rel=1e-9)
        assert traj.converged

    def test_unquantized_fixed_point_closed_form(self):
        cfg = SystemConfig(n_t=2, n_r=2, n_c=64, taps_l=4,
                           adc_bits=("inf", "inf"), snr_db=17.0, seed=0)
        for sp in _spectra(cfg, 3):
            traj = se_run(cfg, sp, max_iter=100)
            assert traj.final.gamma_1x == pytest.approx(sp.mean / cfg.sigma2, rel=1e-6)

    def test_contracting_mse_profile_at_10db(self):
        # the MSE profile is monotone with a geometrically shrinking tail;
        # the bulk of the drop happens in the first five sweeps
        cfg = SystemConfig(n_t=2, n_r=2, n_c=512, taps_l=4, snr_db=10.0,
                           adc_bits=(2, 2), seed=0)
        sp = _spectra(cfg, 1)[0]
        traj = se_run(cfg, sp, max_iter=12, tol=0.0)
        mse = np.array(traj.mse)
        assert np.all(np.diff(mse) < 1e-12)
        drop_first5 = mse[0] - mse[4]
        assert drop_first5 > 0.9 * (mse[0] - mse[-1])

    def test_mixed_monotone_in_highres_share(self):
        # swapping 1-bit chains for unquantized ones never hurts
        fixed = []
        for n_inf in range(0, 5):
            bits = (1,) * (4 - n_inf) + ("inf",) * n_inf
            cfg = SystemConfig(n_t=2, n_r=4, n_c=64, taps_l=4, snr_db=10.0,
                               adc_bits=bits, seed=0)
            sp = _spectra(cfg, 1, seed=5)[0]
            fixed.append(se_run(cfg, sp, max_iter=60).final.gamma_1x)
        assert all(b >= a * (1 - 1e-9) for a, b in zip(fixed, fixed[1:]))

    def test_ensemble_matches_per_spectrum_runs(self):
        cfg = SystemConfig(n_t=2, n_r=3, n_c=32, taps_l=4, snr_db=9.0,
                           adc_bits=(1, "inf", 3), seed=0)
        spectra = _spectra(cfg, 5, seed=8)
        mse_b, ser_b = se_run_ensemble(cfg, spectra, max_iter=40)
        for i, sp in enumerate(spectra):
            traj = se_run(cfg, sp, max_iter=40)
            assert traj.ser[-1] == pytest.approx(ser_b[i, -1], rel=1e-9)
            assert traj.mse[-1] == pytest.approx(mse_b[i, -1], rel=1e-9)

    def test_decoupling_ser_matches_scalar_channel_simulation(self):
        cfg = SystemConfig(n_t=2, n_r=2, n_c=64, taps_l=4, snr_db=10.0,
                           adc_bits=(2, 2), seed=0)
        sp = _spectra(cfg, 1, seed=2)[0]
        gamma = se_run(cfg, sp, max_iter=60).final.gamma_1x
        rng = np.random.default_rng(4)
        pts = constellation_points("qpsk")
        x = pts[rng.integers(0, 4, 400_000)]
        w = (rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size)) * math.sqrt(0.5 / gamma)
        hard, _ = hard_decision(x + w, "qpsk")
        ser_mc = float(np.mean(hard != x))
        want = ser_qpsk(gamma)
        assert abs(ser_mc - want) < 4 * math.sqrt(want * (1 - want) / x.size)
