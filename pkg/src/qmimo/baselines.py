"""Reference detectors: quantization-ignoring LMMSE and a GAMP recursion.

Both treat the same inputs as the main detector and reuse its per-subcarrier
fast path (LMMSE) and scalar quantizer posterior (GAMP output channel).  The
GAMP variant here is the standard sum-product recursion with uniform
variances and mild damping; it serves as an ordering baseline, not a tuned
competitor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constellation import symbol_posterior
from .detector import (PRECISION_CEIL, PRECISION_FLOOR, _build_group_data,
                       _operator_for, _quantized_posterior)
from .system import SystemConfig


@dataclass
class GampOptions:
    t_max: int = 25
    tol: float = 1e-6
    damping: float = 0.3


@dataclass
class GampState:
    """Mean/variance buffers of the GAMP recursion."""

    x_hat: np.ndarray
    tau_x: np.ndarray
    z_hat: np.ndarray
    tau_p: np.ndarray
    s_hat: np.ndarray
    tau_s: np.ndarray
    t: int = 0


def lmmse_detect(y_q, ch, cfg: SystemConfig):
    """x = (A^H A + sigma^2 I)^{-1} A^H y, ignoring the quantization.

    Uses the same per-subcarrier solves as the detector fast path.
    """
    op = _operator_for(ch)
    single = np.ndim(y_q) == 1
    y = np.atleast_2d(np.asarray(y_q, dtype=complex))
    batch = y.shape[0]
    ones = np.ones(batch)
    b = op.adjoint(y) / cfg.sigma2
    x = op.solve(ones / cfg.p_x, ones / cfg.sigma2, b)
    return x[0] if single else x


def _gamp_output_posterior(p, tau_p, y_q, groups, sigma2):
    """Quantizer-aware posterior of z given pseudo-prior CN(p, tau_p)."""
    batch, m_total = p.shape
    z_hat = np.empty_like(p)
    v_post = np.zeros(batch)
    for bits, comp, quantizer in groups:
        share = comp.size / m_total
        if quantizer is None:
            gain = tau_p[:, None] / (tau_p[:, None] + sigma2)
            z_hat[:, comp] = p[:, comp] + gain * (y_q[:, comp] - p[:, comp])
            v_post += share * tau_p * sigma2 / (tau_p + sigma2)
        else:
            step = quantizer.step if hasattr(quantizer, "step") else \
                np.asarray(quantizer, dtype=float)[:, None, None]
            zg, vg, _ = _quantized_posterior(
                p[:, comp], tau_p[:, None, None], y_q[:, comp], bits, step, sigma2)
            z_hat[:, comp] = zg
            v_post += share * vg
    return z_hat, v_post


def gamp_detect_batch(y_q, op, cfg: SystemConfig, opts: GampOptions | None = None):
    """Scalar-variance GAMP on a batch; returns (x_hat, converged mask)."""
    opts = opts or GampOptions()
    y = np.atleast_2d(np.asarray(y_q, dtype=complex))
    batch = y.shape[0]
    n, m = op.n, op.m
    sigma2 = cfg.sigma2
    groups = _build_group_data(cfg, op.p_z(cfg.p_x))
    rho = float(opts.damping)
    # mean squared sensing entry, tr(A^H A)/(M N), sets the variance scaling
    c_a = op.mean_eigenvalue / m

    st = GampState(
        x_hat=np.zeros((batch, n), dtype=complex),
        tau_x=np.full(batch, cfg.p_x),
        z_hat=np.zeros((batch, m), dtype=complex),
        tau_p=np.full(batch, cfg.p_x),
        s_hat=np.zeros((batch, m), dtype=complex),
        tau_s=np.full(batch, 1.0),
    )
    ok = np.ones(batch, dtype=bool)

    for t in range(1, opts.t_max + 1):
        st.t = t
        st.tau_p = np.clip(n * c_a * st.tau_x, PRECISION_FLOOR, PRECISION_CEIL)
        p = op.apply(st.x_hat) - st.tau_p[:, None] * st.s_hat
        st.z_hat, tau_z = _gamp_output_posterior(p, st.tau_p, y, groups, sigma2)
        s_new = (st.z_hat - p) / st.tau_p[:, None]
        st.tau_s = np.clip((1.0 - tau_z / st.tau_p) / st.tau_p,
                           PRECISION_FLOOR, PRECISION_CEIL)
        if st.t > 1:
            s_new = (1.0 - rho) * s_new + rho * st.s_hat
        st.s_hat = s_new
        tau_r = np.clip(1.0 / (m * c_a * st.tau_s), PRECISION_FLOOR, PRECISION_CEIL)
        r = st.x_hat + tau_r[:, None] * op.adjoint(st.s_hat)
        x_new, tau_x_new = symbol_posterior(r, tau_r, cfg.constellation)
        if st.t > 1:
            x_new = (1.0 - rho) * x_new + rho * st.x_hat
        delta = np.linalg.norm(x_new - st.x_hat, axis=1) / np.maximum(
            np.linalg.norm(x_new, axis=1), 1e-300)
        finite = np.isfinite(x_new).all(axis=1) & np.isfinite(tau_x_new)
        # a diverged trial keeps its last finite iterate
        st.x_hat = np.where(finite[:, None], x_new, st.x_hat)
        st.tau_x = np.where(finite, np.clip(tau_x_new, PRECISION_FLOOR, cfg.p_x),
                            st.tau_x)
        ok &= finite
        if st.t > 1 and np.all((delta < opts.tol) | ~finite):
            break

    return st.x_hat, ok


def gamp_detect(y_q, ch, cfg: SystemConfig, opts: GampOptions | None = None):
    """Single-realization GAMP detect; divergence returns the best iterate
    with a False flag."""
    op = _operator_for(ch)
    x, ok = gamp_detect_batch(np.asarray(y_q, dtype=complex)[None], op, cfg, opts)
    return x[0], bool(ok[0])
