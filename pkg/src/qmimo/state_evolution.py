"""Scalar state-evolution recursion predicting detector performance.

Tracks the per-iteration message precisions of the detector in the
large-system limit over a fixed eigenvalue spectrum of A^H A, and maps the
resulting equivalent scalar-channel SNR to MSE and SER.  The recursion is
deterministic, needs no Monte Carlo, and its fixed point reduces to the
known closed forms in the unquantized limit.

All updates use cancellation-free algebraic forms, e.g.
gamma_1x = E{lam g2z/(lam g2z + g2x)} / E{1/(lam g2z + g2x)}, which equals
1/q_x - gamma_2x exactly but stays accurate when gamma_2x is at the clamp
ceiling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .constellation import constellation_points
from .gaussian import QuadratureRule, _interval_ratios, gauss_hermite, interval_mass
from .system import Quantizer, Spectrum, SystemConfig, quantizer_for

log = logging.getLogger(__name__)

PRECISION_FLOOR = 1e-11
PRECISION_CEIL = 1e11
DEFAULT_QUAD_ORDER = 64


@dataclass
class SEState:
    """Scalar precisions and auxiliary variances at one iteration.

    In mixed-ADC mode the z-side quantities additionally carry one value
    per ADC-resolution group (keyed by bit width); the scalar fields then
    hold the group-share pooled values that enter the trace expectations.
    """

    v_1z: float
    gamma_1z: float
    gamma_2z: float
    gamma_1x: float
    gamma_2x: float
    q_x: float
    q_z: float
    alpha: dict = field(default_factory=dict)
    v_1z_post: float = 0.0
    v_1z_post_groups: dict = field(default_factory=dict)
    v_1z_groups: dict = field(default_factory=dict)
    gamma_2z_groups: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class SETrajectory:
    """Ordered SE states with derived per-iteration MSE and SER."""

    states: list
    mse: list
    ser: list
    converged: bool
    floored_bins: int = 0
    clamped: bool = False

    @property
    def final(self) -> SEState:
        return self.states[-1]


def se_alpha(v_1z: float, v_z: float, sigma2: float, quantizer: Quantizer,
             rule: QuadratureRule | None = None) -> float:
    """Fisher-information-like de-quantization gain of one ADC group.

    Evaluates, by Gauss-Hermite quadrature over the standardized prior mean,
    half the codebook sum of (d mass / d center)^2 / mass for bins of width
    set by the quantizer, with center spread sqrt((v_z - v_1z)/2) and
    in-bin uncertainty (sigma2 + v_1z)/2 per real dimension.  Near-empty
    bins contribute 0 (counted and logged at debug level).
    """
    alpha, n_floored = _se_alpha_counted(v_1z, v_z, sigma2, quantizer, rule)
    if n_floored:
        log.debug("se_alpha floored %d near-empty bin evaluations", n_floored)
    return alpha


def _se_alpha_counted(v_1z, v_z, sigma2, quantizer, rule=None):
    rule = rule or gauss_hermite(DEFAULT_QUAD_ORDER)
    spread = math.sqrt(max(v_z - v_1z, 0.0) / 2.0)
    tau = math.sqrt((sigma2 + v_1z) / 2.0)
    centers = spread * rule.nodes                       # (n_quad,)
    p = (centers[:, None] - quantizer.lows[None, :]) / tau
    q = (centers[:, None] - quantizer.ups[None, :]) / tau
    n1, _, ok = _interval_ratios(p, q)
    mass = np.maximum(interval_mass(p, q), 0.0)
    integrand = np.where(ok, n1 * n1 * mass, 0.0) / (tau * tau)
    bad = ~np.isfinite(integrand)
    n_floored = int(np.count_nonzero(~ok | bad))
    integrand = np.where(bad, 0.0, integrand)
    alpha = 0.5 * float(rule.weights @ integrand.sum(axis=1))
    return alpha, n_floored


def mse_qpsk(gamma_1x: float, rule: QuadratureRule | None = None) -> float:
    """MSE of the scalar-channel posterior for QPSK symbols.

    1 - int Dz tanh(g + sqrt(g) z), evaluated in the overflow-free logistic
    form 1 - tanh(u) = 2 expit(-2u).
    """
    from scipy.special import expit

    if gamma_1x < 0:
        raise ValueError("gamma_1x must be nonnegative")
    rule = rule or gauss_hermite(DEFAULT_QUAD_ORDER)
    u = gamma_1x + math.sqrt(gamma_1x) * rule.nodes
    return float(rule.weights @ (2.0 * expit(-2.0 * u)))


def mse_square_qam(gamma_1x: float, order: int,
                   rule: QuadratureRule | None = None) -> float:
    """Scalar-channel MSE for square QAM via per-axis PAM quadrature."""
    if order not in (4, 16, 64):
        raise ValueError(f"unsupported QAM order {order}")
    if gamma_1x <= 0:
        return 1.0
    rule = rule or gauss_hermite(DEFAULT_QUAD_ORDER)
    name = {4: "qpsk", 16: "16qam", 64: "64qam"}[order]
    levels = np.unique(constellation_points(name).real)
    sd = math.sqrt(1.0 / (2.0 * gamma_1x))             # per-axis noise std
    r = levels[:, None] + sd * rule.nodes[None, :]      # true level + noise
    logits = -((r[..., None] - levels) ** 2) / (2.0 * sd * sd)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    est = (w @ levels) / w.sum(axis=-1)
    per_axis = float(np.mean((levels[:, None] - est) ** 2 @ rule.weights))
    return 2.0 * per_axis


def mse_constellation(gamma_1x: float, name: str,
                      rule: QuadratureRule | None = None) -> float:
    if name.lower() == "qpsk":
        return mse_qpsk(gamma_1x, rule)
    return mse_square_qam(gamma_1x, {"16qam": 16, "64qam": 64}[name.lower()], rule)


def _q_func(x: float) -> float:
    from .gaussian import big_phi

    return float(big_phi(-x))


def ser_qpsk(gamma_1x: float) -> float:
    """2Q(sqrt(g)) - Q(sqrt(g))^2 on the decoupled scalar channel."""
    if gamma_1x < 0:
        raise ValueError("gamma_1x must be nonnegative")
    q = _q_func(math.sqrt(gamma_1x))
    return 2.0 * q - q * q


def ser_square_qam(gamma_1x: float, order: int) -> float:
    """Closed-form square-QAM AWGN symbol error rate; equals ser_qpsk at 4."""
    if order not in (4, 16, 64):
        raise ValueError(f"unsupported QAM order {order}")
    if gamma_1x < 0:
        raise ValueError("gamma_1x must be nonnegative")
    q = _q_func(math.sqrt(3.0 * gamma_1x / (order - 1)))
    inner = 1.0 - 2.0 * (1.0 - 1.0 / math.sqrt(order)) * q
    return 1.0 - inner * inner


def ser_constellation(gamma_1x: float, name: str) -> float:
    order = {"qpsk": 4, "16qam": 16, "64qam": 64}[name.lower()]
    return ser_square_qam(gamma_1x, order)


def spectrum_expectation(spectrum: Spectrum, f) -> float:
    """Empirical eigenvalue expectation (1/N) sum f(lambda_i)."""
    return float(np.mean(f(np.asarray(spectrum.eigenvalues, dtype=float))))


def _se_groups(cfg: SystemConfig, p_z: float | None = None):
    """(bits, share, quantizer or None) per ADC group."""
    out = []
    for bits, chains in cfg.adc_groups():
        q = None if math.isinf(bits) else quantizer_for(cfg, int(bits), p_z)
        out.append((bits, chains.size / cfg.n_r, q))
    return out


def se_step(state: SEState, spectrum: Spectrum, cfg: SystemConfig,
            rule: QuadratureRule | None = None) -> tuple[SEState, int, bool]:
    """One sweep of the recursion; returns (state, floored bins, clamped).

    Each ADC-resolution group carries its own z-side message pair; the
    trace expectations over the eigenvalue spectrum use the group-share
    pooled extrinsic precision (the exchangeable-rows reduction of the
    group-weighted linear stage).  With a single group this is exactly the
    scalar recursion.
    """
    rule = rule or gauss_hermite(DEFAULT_QUAD_ORDER)
    lam = np.asarray(spectrum.eigenvalues, dtype=float)
    sigma2 = cfg.sigma2
    beta = cfg.m / cfg.n
    v_z = float(lam.mean()) * cfg.p_x
    clamped = False
    floored = 0

    # the quantizer step tracks this spectrum's received power (AGC)
    groups = _se_groups(cfg, v_z / beta)
    alphas, v_posts, v_groups, g2z_groups = {}, {}, {}, {}
    gamma_2z_bar = 0.0
    v_post_bar = 0.0
    for bits, share, quantizer in groups:
        v = state.v_1z_groups.get(bits, state.v_1z)
        v = max(min(v, v_z - 1e-12), PRECISION_FLOOR)  # finite-size spectra can
        v_groups[bits] = v                              # violate the ordering
        if quantizer is None:
            a_g = 1.0 / (sigma2 + v)
        else:
            a_g, nf = _se_alpha_counted(v, v_z, sigma2, quantizer, rule)
            floored += nf
        a_g = min(a_g, (1.0 - 1e-12) / v)
        alphas[bits] = a_g
        v_posts[bits] = v * (1.0 - a_g * v)
        g2z = a_g / (1.0 - a_g * v)                     # 1/v_post - 1/v, stable
        if not (PRECISION_FLOOR <= g2z <= PRECISION_CEIL):
            g2z = float(np.clip(g2z, PRECISION_FLOOR, PRECISION_CEIL))
            clamped = True
        g2z_groups[bits] = g2z
        gamma_2z_bar += share * g2z
        v_post_bar += share * v_posts[bits]

    g2x_old = state.gamma_2x
    inv_x = 1.0 / (lam * gamma_2z_bar + g2x_old)
    q_x = float(inv_x.mean())
    gamma_1x = float((lam * gamma_2z_bar * inv_x).mean()) / q_x
    if not (PRECISION_FLOOR <= gamma_1x <= PRECISION_CEIL):
        gamma_1x = float(np.clip(gamma_1x, PRECISION_FLOOR, PRECISION_CEIL))
        clamped = True

    mse = mse_constellation(gamma_1x, cfg.constellation, rule)
    gamma_2x = 1.0 / max(mse, 1.0 / PRECISION_CEIL) - gamma_1x
    if not (PRECISION_FLOOR <= gamma_2x <= PRECISION_CEIL):
        gamma_2x = float(np.clip(gamma_2x, PRECISION_FLOOR, PRECISION_CEIL))
        clamped = True

    inv_z = 1.0 / (lam * gamma_2z_bar + gamma_2x)
    q_z = float((lam * inv_z).mean()) / beta            # (1/M) sum form
    v_groups_new = {}
    for bits, share, _ in groups:
        g1z_g = 1.0 / q_z - g2z_groups[bits]
        g1z_g = float(np.clip(g1z_g, PRECISION_FLOOR, PRECISION_CEIL))
        v_groups_new[bits] = 1.0 / g1z_g
    gamma_1z = ((1.0 - 1.0 / beta) + (gamma_2x / beta) * float(inv_z.mean())) / q_z
    if not (PRECISION_FLOOR <= gamma_1z <= PRECISION_CEIL):
        gamma_1z = float(np.clip(gamma_1z, PRECISION_FLOOR, PRECISION_CEIL))
        clamped = True

    new = SEState(
        v_1z=1.0 / gamma_1z,
        gamma_1z=gamma_1z,
        gamma_2z=gamma_2z_bar,
        gamma_1x=gamma_1x,
        gamma_2x=gamma_2x,
        q_x=q_x,
        q_z=q_z,
        alpha=alphas,
        v_1z_post=v_post_bar,
        v_1z_post_groups=v_posts,
        v_1z_groups=v_groups_new,
        gamma_2z_groups=g2z_groups,
        t=state.t + 1,
    )
    return new, floored, clamped


def se_initial_state(spectrum: Spectrum, cfg: SystemConfig) -> SEState:
    """v_1z^0 = (N/M) E{lambda}, gamma_2x^0 = 1/P_x."""
    v0 = float(np.mean(spectrum.eigenvalues)) * cfg.n / cfg.m
    return SEState(
        v_1z=v0, gamma_1z=1.0 / v0, gamma_2z=0.0,
        gamma_1x=PRECISION_FLOOR, gamma_2x=1.0 / cfg.p_x,
        q_x=cfg.p_x, q_z=v0,
        v_1z_groups={bits: v0 for bits, _, _ in _se_groups(cfg)},
        t=0,
    )


def se_run(cfg: SystemConfig, spectrum: Spectrum, max_iter: int = 50,
           tol: float = 1e-8, rule: QuadratureRule | None = None) -> SETrajectory:
    """Iterate the recursion from the stated initialization.

    Stops when the relative change of gamma_1x drops below tol; an
    oscillating run is returned with converged=False rather than raised.
    """
    rule = rule or gauss_hermite(DEFAULT_QUAD_ORDER)
    state = se_initial_state(spectrum, cfg)
    states, mses, sers = [], [], []
    floored = 0
    clamped = False
    converged = False
    for _ in range(max_iter):
        prev_g1x = state.gamma_1x
        state, nf, cl = se_step(state, spectrum, cfg, rule)
        floored += nf
        clamped |= cl
        states.append(state)
        mses.append(mse_constellation(state.gamma_1x, cfg.constellation, rule))
        sers.append(ser_constellation(state.gamma_1x, cfg.constellation))
        if state.t > 1 and abs(state.gamma_1x - prev_g1x) < tol * abs(prev_g1x):
            converged = True
            break
    return SETrajectory(states=states, mse=mses, ser=sers, converged=converged,
                        floored_bins=floored, clamped=clamped)


def se_run_ensemble(cfg: SystemConfig, spectra, max_iter: int = 50,
                    tol: float = 1e-8, rule: QuadratureRule | None = None):
    """Run the recursion over many spectra at once, vectorized.

    Semantically equivalent to calling se_run per spectrum with a shared
    iteration count; returns (per-iteration MSE, per-iteration SER) arrays
    of shape (n_spectra, n_iter), padded by carrying converged values
    forward.  Pure functions of the inputs; used by the SNR-sweep harness
    where per-spectrum trajectories dominate the run time.
    """
    from scipy.special import expit

    rule = rule or gauss_hermite(DEFAULT_QUAD_ORDER)
    lam = np.stack([np.asarray(s.eigenvalues, dtype=float) for s in spectra])
    n_spec = lam.shape[0]
    sigma2 = cfg.sigma2
    beta = cfg.m / cfg.n
    v_z = lam.mean(axis=1) * cfg.p_x                    # (R,)
    if cfg.constellation.lower() != "qpsk":
        trajs = [se_run(cfg, s, max_iter, tol, rule) for s in spectra]
        n_iter = max(len(t.mse) for t in trajs)
        mse = np.array([t.mse + [t.mse[-1]] * (n_iter - len(t.mse)) for t in trajs])
        ser = np.array([t.ser + [t.ser[-1]] * (n_iter - len(t.ser)) for t in trajs])
        return mse, ser

    groups = [(bits, share, int(bits) if not math.isinf(bits) else None)
              for bits, share, _ in _se_groups(cfg)]
    steps = {}
    for bits, share, ibits in groups:
        if ibits is not None:
            if cfg.quantizer_scale is not None:
                steps[bits] = np.full(n_spec, cfg.quantizer_scale)
            else:
                from .system import OPTIMAL_STEP
                steps[bits] = OPTIMAL_STEP[ibits] * np.sqrt(v_z / beta / 2.0)

    v0 = v_z / beta
    v_g = {bits: v0.copy() for bits, _, _ in groups}
    gamma_2x = np.full(n_spec, 1.0 / cfg.p_x)
    gamma_1x_prev = np.full(n_spec, np.nan)
    active = np.ones(n_spec, dtype=bool)
    mses, sers = [], []

    for it in range(max_iter):
        gamma_2z_bar = np.zeros(n_spec)
        g2z_g = {}
        for bits, share, ibits in groups:
            v = np.clip(v_g[bits], PRECISION_FLOOR, v_z - 1e-12)
            if ibits is None:
                a_g = 1.0 / (sigma2 + v)
            else:
                half = 1 << (ibits - 1)
                b = np.arange(1 - half, half + 1, dtype=float)
                code = (b - 0.5)[None, :] * steps[bits][:, None]
                lows = np.where(b > 1 - half, code - 0.5 * steps[bits][:, None], -np.inf)
                ups = np.where(b < half, code + 0.5 * steps[bits][:, None], np.inf)
                spread = np.sqrt(np.maximum(v_z - v, 0.0) / 2.0)
                tau = np.sqrt((sigma2 + v) / 2.0)
                centers = spread[:, None] * rule.nodes[None, :]
                p = (centers[:, None, :] - lows[:, :, None]) / tau[:, None, None]
                q = (centers[:, None, :] - ups[:, :, None]) / tau[:, None, None]
                n1, _, ok = _interval_ratios(p, q)
                mass = np.maximum(interval_mass(p, q), 0.0)
                integ = np.where(ok, n1 * n1 * mass, 0.0) / (tau * tau)[:, None, None]
                integ = np.where(np.isfinite(integ), integ, 0.0)
                a_g = 0.5 * (integ.sum(axis=1) @ rule.weights)
            a_g = np.minimum(a_g, (1.0 - 1e-12) / v)
            g2z = np.clip(a_g / (1.0 - a_g * v), PRECISION_FLOOR, PRECISION_CEIL)
            g2z_g[bits] = g2z
            gamma_2z_bar += share * g2z

        inv_x = 1.0 / (lam * gamma_2z_bar[:, None] + gamma_2x[:, None])
        q_x = inv_x.mean(axis=1)
        gamma_1x = (lam * gamma_2z_bar[:, None] * inv_x).mean(axis=1) / q_x
        gamma_1x = np.clip(gamma_1x, PRECISION_FLOOR, PRECISION_CEIL)

        u = gamma_1x[:, None] + np.sqrt(gamma_1x)[:, None] * rule.nodes[None, :]
        mse = (2.0 * expit(-2.0 * u)) @ rule.weights
        gamma_2x = np.clip(1.0 / np.maximum(mse, 1.0 / PRECISION_CEIL) - gamma_1x,
                           PRECISION_FLOOR, PRECISION_CEIL)

        inv_z = 1.0 / (lam * gamma_2z_bar[:, None] + gamma_2x[:, None])
        q_z = (lam * inv_z).mean(axis=1) / beta
        for bits, share, ibits in groups:
            g1z = np.clip(1.0 / q_z - g2z_g[bits], PRECISION_FLOOR, PRECISION_CEIL)
            v_g[bits] = np.where(active, 1.0 / g1z, v_g[bits])

        from .gaussian import big_phi

        q = big_phi(-np.sqrt(gamma_1x))
        ser = 2.0 * q - q * q
        if mses:
            mse = np.where(active, mse, mses[-1])
            ser = np.where(active, ser, sers[-1])
        mses.append(mse)
        sers.append(ser)

        done = np.abs(gamma_1x - gamma_1x_prev) < tol * np.abs(gamma_1x_prev)
        gamma_1x_prev = np.where(active, gamma_1x, gamma_1x_prev)
        if it > 0:
            active = active & ~done
        if not active.any():
            break

    return np.stack(mses, axis=1), np.stack(sers, axis=1)
