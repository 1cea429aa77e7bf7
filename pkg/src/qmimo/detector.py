"""GEC-SR data detector for the quantized MIMO-OFDM model.

Three posterior stages exchange extrinsic Gaussian messages in a circular
A -> C -> B -> C schedule: module A de-quantizes the observations, module B
applies the constellation prior, and module C enforces the linear constraint
z = A x.  All message variances are uniform scalars (the trace-averaging
contract), except that module A reports one posterior variance per
ADC-resolution group in mixed receivers, collapsed to the group-share
weighted average before re-entering module C so the FFT realization stays
diagonal.

A detect invocation owns its state; many invocations may run concurrently on
shared immutable channel/quantizer inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constellation import hard_decision, symbol_posterior
from .gaussian import _interval_ratios
from .system import (ChannelOperator, ChannelRealization, SystemConfig,
                     midrise_bounds, quantizer_for, quantizer_steps)

PRECISION_FLOOR = 1e-11
PRECISION_CEIL = 1e11


@dataclass
class DetectorOptions:
    """Iteration controls.

    damping is a robustness knob for difficult channels (0 = undamped,
    matching the fast default convergence); it blends extrinsic means and
    log-precisions with the previous sweep.
    """

    t_max: int = 10
    tol: float = 1e-6
    damping: float = 0.0


@dataclass
class DetectorDiagnostics:
    """Per-iteration traces of one detect run."""

    mse: list = field(default_factory=list)
    v_1x: list = field(default_factory=list)
    v_1x_post: list = field(default_factory=list)
    d_q2x: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    degenerate_bins: int = 0

    def csv_rows(self):
        """(iteration, v_1x, v_1x_post, mse) rows for serialization."""
        for i in range(len(self.v_1x)):
            mse = self.mse[i] if i < len(self.mse) else ""
            yield (i + 1, self.v_1x[i], self.v_1x_post[i], mse)


@dataclass
class DetectorState:
    """The eight message vectors/scalars plus posterior buffers."""

    r_1z: np.ndarray
    v_1z: np.ndarray
    r_2z: np.ndarray
    v_2z: np.ndarray
    r_1x: np.ndarray
    v_1x: np.ndarray
    r_2x: np.ndarray
    v_2x: np.ndarray
    z_1: np.ndarray | None = None
    x_1: np.ndarray | None = None
    x_2: np.ndarray | None = None
    z_2: np.ndarray | None = None
    v_1z_post: np.ndarray | None = None
    v_1x_post: np.ndarray | None = None
    d_q2x: np.ndarray | None = None
    d_q2z: np.ndarray | None = None
    t: int = 0


@dataclass
class BatchDetectResult:
    x_hat: np.ndarray
    iterations: int
    converged: np.ndarray
    per_iter_mse: np.ndarray | None
    per_iter_v1x: np.ndarray
    per_iter_v1x_post: np.ndarray
    per_iter_d_q2x: np.ndarray
    per_iter_delta: np.ndarray
    degenerate_bins: int
    final_state: DetectorState | None = None


def _as_batch_scalar(v, batch):
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v, (batch,)).astype(float) if v.ndim == 0 else v


def _truncated_posterior(m, v, lo, up, y_re, sigma2):
    """Real-dimension truncated-Gaussian posterior shared with GAMP.

    m, lo, up, y_re are (..., 2) real views; v broadcasts as the complex
    prior variance.  Returns per-dimension means/variances and the count of
    degenerate bins that fell back to an in-bin anchor with floor variance.
    """
    tau = np.sqrt((sigma2 + v) / 2.0)
    sign = np.sign(y_re)
    abs_lo = np.abs(lo)
    abs_up = np.abs(up)
    near = np.minimum(abs_lo, abs_up)
    far = np.maximum(abs_lo, abs_up)
    eta1 = (sign * m - near) / tau
    eta2 = (sign * m - far) / tau
    n1, n2, ok = _interval_ratios(eta1, eta2)

    gain = v / np.sqrt(2.0 * (sigma2 + v))
    z_hat = m + sign * gain * n1
    var = v / 2.0 - (v * v / (2.0 * (sigma2 + v))) * (n2 + n1 * n1)
    var = np.maximum(var, 0.5 * PRECISION_FLOOR)

    n_bad = int(ok.size - np.count_nonzero(ok))
    if n_bad:
        anchor = np.where(np.isinf(far), sign * (near + np.sqrt(v)), sign * (near + far) / 2.0)
        z_hat = np.where(ok, z_hat, anchor)
        var = np.where(ok, var, 0.5 * PRECISION_FLOOR)
    return z_hat, var, n_bad


def _quantized_posterior(r_c, v, y_c, bits, step, sigma2):
    """Complex-view quantized-bin posterior with broadcastable steps."""
    batch = r_c.shape[0]
    y_re = np.stack([y_c.real, y_c.imag], axis=-1)
    m = np.stack([r_c.real, r_c.imag], axis=-1)
    lo, up = midrise_bounds(y_re, bits, step)
    z_hat, var, n_bad = _truncated_posterior(m, v, lo, up, y_re, sigma2)
    mean = z_hat[..., 0] + 1j * z_hat[..., 1]
    v_post = 2.0 * var.reshape(batch, -1).mean(axis=1)
    return mean, v_post, n_bad


def module_a_quantized(r_1z, v_1z, y_q, quantizer, sigma2):
    """Posterior mean/variance of z inside known quantizer bins.

    Real and imaginary parts are two independent real channels.  The scalar
    variance returned is the average complex posterior variance (sum of both
    real dimensions), which converges to the AWGN value v*sigma2/(v+sigma2)
    in the fine-quantizer limit.
    """
    r_arr = np.atleast_2d(np.asarray(r_1z, dtype=complex))
    y_arr = np.atleast_2d(np.asarray(y_q, dtype=complex))
    batch = r_arr.shape[0]
    v = _as_batch_scalar(v_1z, batch)[:, None, None]
    mean, v_post, n_bad = _quantized_posterior(
        r_arr, v, y_arr, quantizer.bits, quantizer.step, sigma2)
    if np.ndim(r_1z) == 1:
        return mean[0], float(v_post[0]), n_bad
    return mean, v_post, n_bad


def module_a_unquantized(r_1z, v_1z, y, sigma2):
    """AWGN posterior for unquantized (infinite-resolution) chains."""
    r_arr = np.asarray(r_1z, dtype=complex)
    v = np.asarray(v_1z, dtype=float)
    v_b = v[..., None] if v.ndim < r_arr.ndim else v
    gain = v_b / (v_b + sigma2)
    z_hat = r_arr + gain * (np.asarray(y) - r_arr)
    v_post = v * sigma2 / (v + sigma2)
    return z_hat, v_post


def module_a_mixed(r_1z, v_1z, y_q, group_data, sigma2):
    """Dispatch module A per ADC-resolution group.

    v_1z carries either one scalar per batch entry (shared by all groups)
    or one per (batch entry, group).  Returns the posterior mean, the
    per-group posterior variances (batch, group), the group-share weighted
    scalar average, and the degenerate-bin count.
    """
    r_arr = np.atleast_2d(np.asarray(r_1z, dtype=complex))
    y_arr = np.atleast_2d(np.asarray(y_q, dtype=complex))
    batch, m_total = r_arr.shape
    v_in = np.asarray(v_1z, dtype=float)
    z_hat = np.empty_like(r_arr)
    v_groups, shares = [], []
    n_bad = 0
    for gi, (bits, comp, quantizer) in enumerate(group_data):
        shares.append(comp.size / m_total)
        v = _as_batch_scalar(v_in[:, gi] if v_in.ndim == 2 else v_in, batch)
        if quantizer is None:
            zg, vg = module_a_unquantized(r_arr[:, comp], v, y_arr[:, comp], sigma2)
        else:
            step = quantizer.step if hasattr(quantizer, "step") else \
                np.asarray(quantizer, dtype=float)[:, None, None]
            zg, vg, bad = _quantized_posterior(
                r_arr[:, comp], v[:, None, None], y_arr[:, comp], bits, step, sigma2)
            n_bad += bad
        z_hat[:, comp] = zg
        v_groups.append(np.broadcast_to(vg, (batch,)))
    if abs(sum(shares) - 1.0) > 1e-9:
        raise ValueError("ADC groups must cover every output component")
    v_groups = np.stack(v_groups, axis=1)
    v_scalar = v_groups @ np.asarray(shares)
    return z_hat, v_groups, v_scalar, n_bad


def extrinsic(post_mean, post_var, prior_mean, prior_var, cap=None):
    """Gaussian division: subtract precisions, re-weight means.

    Extrinsic precision is clamped to the [1e-11, 1e11] rails (negative
    values land on the floor); cap additionally bounds the extrinsic
    variance, which the detector sets to max(P_x, P_z).
    """
    post_var = np.asarray(post_var, dtype=float)
    prior_var = np.asarray(prior_var, dtype=float)
    prec = 1.0 / post_var - 1.0 / prior_var
    lo = PRECISION_FLOOR if cap is None else np.maximum(PRECISION_FLOOR, 1.0 / np.asarray(cap, dtype=float))
    prec = np.clip(prec, lo, PRECISION_CEIL)
    ext_var = 1.0 / prec
    nd = np.ndim(post_mean)
    v_post_b = post_var[..., None] if post_var.ndim < nd else post_var
    v_prior_b = prior_var[..., None] if prior_var.ndim < nd else prior_var
    v_ext_b = ext_var[..., None] if np.ndim(ext_var) < nd else ext_var
    ext_mean = v_ext_b * (post_mean / v_post_b - prior_mean / v_prior_b)
    return ext_mean, ext_var


def module_b(r_1x, v_1x, constellation):
    """Componentwise constellation posterior under the scalar channel."""
    mean, var = symbol_posterior(r_1x, v_1x, constellation)
    return mean, np.maximum(var, PRECISION_FLOOR)


def _operator_for(ch):
    if hasattr(ch, "solve"):
        return ch
    return ChannelOperator(ch.freq_response[None], ch.fbb_permutation[None], ch.norm)


def _module_c(op, r_2x, v_2x, r_2z, v_2z):
    """Both linear-space posteriors on an operator batch."""
    batch = r_2x.shape[0]
    g_x = 1.0 / _as_batch_scalar(v_2x, batch)
    g_z = 1.0 / _as_batch_scalar(v_2z, batch)
    b = g_x[:, None] * r_2x + g_z[:, None] * op.adjoint(r_2z)
    x_2 = op.solve(g_x, g_z, b)
    d_q2x = op.trace_qx(g_x, g_z)
    z_2 = op.apply(x_2)
    d_q2z = op.trace_qz(g_x, g_z)
    return x_2, d_q2x, z_2, d_q2z


def module_c_fast(r_2x, v_2x, r_2z, v_2z, ch):
    """Linear-space posterior via the per-subcarrier FFT realization.

    Identical results to module_c_exact at O(N log N + n_c n_t^3) per call.
    Accepts a ChannelRealization or a prebuilt operator.
    """
    op = _operator_for(ch)
    single = np.ndim(r_2x) == 1
    r_2x_b = np.atleast_2d(np.asarray(r_2x, dtype=complex))
    r_2z_b = np.atleast_2d(np.asarray(r_2z, dtype=complex))
    x_2, d_q2x, z_2, d_q2z = _module_c(op, r_2x_b, v_2x, r_2z_b, v_2z)
    if single:
        return x_2[0], float(d_q2x[0]), z_2[0], float(d_q2z[0])
    return x_2, d_q2x, z_2, d_q2z


def module_c_exact(r_2x, v_2x, r_2z, v_2z, a_dense):
    """Dense-solver reference for module C (test sizes only)."""
    a = np.asarray(a_dense)
    m, n = a.shape
    g_x = 1.0 / float(v_2x)
    g_z = 1.0 / float(v_2z)
    q = np.linalg.inv(g_x * np.eye(n) + g_z * (a.conj().T @ a))
    x_2 = q @ (g_x * np.asarray(r_2x) + g_z * (a.conj().T @ np.asarray(r_2z)))
    d_q2x = float(np.trace(q).real) / n
    z_2 = a @ x_2
    d_q2z = float(np.trace(a @ q @ a.conj().T).real) / m
    return x_2, d_q2x, z_2, d_q2z


def _build_group_data(cfg: SystemConfig, p_z=None):
    """(bits, component indices, quantizer-or-steps) per ADC group.

    With a per-trial P_z array the third slot holds the per-trial step
    vector (the shared AGC-tracked step); otherwise a Quantizer object.
    """
    groups = []
    for bits, chains in cfg.adc_groups():
        comp = (chains[:, None] * cfg.n_c + np.arange(cfg.n_c)).ravel()
        if math.isinf(bits):
            entry = None
        elif p_z is None or np.ndim(p_z) == 0:
            entry = quantizer_for(cfg, int(bits), p_z)
        else:
            entry = quantizer_steps(cfg, int(bits), p_z)
        groups.append((int(bits) if not math.isinf(bits) else bits, comp, entry))
    return groups


def detect_batch(y_q: np.ndarray, op, cfg: SystemConfig,
                 opts: DetectorOptions | None = None,
                 x_true: np.ndarray | None = None,
                 keep_state: bool = False) -> BatchDetectResult:
    """Run the detector on a batch of independent realizations.

    The z-side messages carry one variance per ADC-resolution group; with a
    single group this reduces to uniform scalars and module C runs on the
    precomputed eigendecomposition, otherwise module C re-diagonalizes the
    group-weighted per-subcarrier Grams each call (same FFT complexity
    class).  Trials that meet the tolerance are frozen in place, so results
    do not depend on how trials are grouped into batches or scheduled.
    """
    opts = opts or DetectorOptions()
    y_q = np.atleast_2d(np.asarray(y_q, dtype=complex))
    batch = y_q.shape[0]
    n, m = op.n, op.m
    sigma2 = cfg.sigma2
    rho = float(opts.damping)

    p_x = cfg.p_x
    p_z = op.p_z(p_x)
    cap = np.maximum(p_x, p_z)
    groups = _build_group_data(cfg, p_z)
    n_groups = len(groups)

    r_1z = np.zeros((batch, m), dtype=complex)
    v_1z = np.tile(p_z[:, None], (1, n_groups))
    r_2z = np.zeros((batch, m), dtype=complex)
    v_2z = np.tile(p_z[:, None], (1, n_groups))
    r_1x = np.zeros((batch, n), dtype=complex)
    v_1x = np.full(batch, p_x)
    r_2x = np.zeros((batch, n), dtype=complex)
    v_2x = np.full(batch, p_x)
    x_1 = np.zeros((batch, n), dtype=complex)

    active = np.ones(batch, dtype=bool)
    converged = np.zeros(batch, dtype=bool)
    per_mse = [] if x_true is not None else None
    per_v1x, per_v1x_post, per_dq2x, per_delta = [], [], [], []
    n_bad_total = 0
    iterations = 0

    def step(new, old, act, damp):
        if damp and rho > 0.0:
            if np.iscomplexobj(new):
                new = (1.0 - rho) * new + rho * old
            else:
                new = np.exp((1.0 - rho) * np.log(new) + rho * np.log(old))
        mask = act[:, None] if new.ndim == 2 else act
        return np.where(mask, new, old)

    def linear_stage(need_x_side):
        g_2x = 1.0 / v_2x
        if n_groups == 1:
            g_2z = 1.0 / v_2z[:, 0]
            b = g_2x[:, None] * r_2x + g_2z[:, None] * op.adjoint(r_2z)
            x_2 = op.solve(g_2x, g_2z, b)
            d_q2x = op.trace_qx(g_2x, g_2z)
            d_q2z = op.trace_qz(g_2x, g_2z)
        else:
            w = np.empty((batch, m))
            for gi, (_, comp, _) in enumerate(groups):
                w[:, comp] = (1.0 / v_2z[:, gi])[:, None]
            b = g_2x[:, None] * r_2x + op.adjoint(w * r_2z)
            x_2, d_q2x, d_q2z = op.solve_weighted(g_2x, w, b)
        return x_2, d_q2x, d_q2z

    for t in range(1, opts.t_max + 1):
        iterations = t
        act = active
        damp = t > 1

        # Module A: de-quantization posterior per ADC group, then the
        # per-group extrinsic messages toward the linear stage.
        z_1, v_post_g, v_post_bar, n_bad = module_a_mixed(r_1z, v_1z, y_q, groups, sigma2)
        n_bad_total += n_bad
        r_2z_new = np.empty_like(r_2z)
        v_2z_new = np.empty_like(v_2z)
        for gi, (_, comp, _) in enumerate(groups):
            rg, vg = extrinsic(z_1[:, comp], v_post_g[:, gi],
                               r_1z[:, comp], v_1z[:, gi], cap=cap)
            r_2z_new[:, comp] = rg
            v_2z_new[:, gi] = vg
        r_2z = step(r_2z_new, r_2z, act, damp)
        v_2z = step(v_2z_new, v_2z, act, damp)

        # Module C, x side.
        x_2, d_q2x, _ = linear_stage(True)
        r_1x_new, v_1x_new = extrinsic(x_2, d_q2x, r_2x, v_2x, cap=cap)
        r_1x = step(r_1x_new, r_1x, act, damp)
        v_1x = step(v_1x_new, v_1x, act, damp)

        # Module B: constellation posterior.
        x_1_new, v_1x_post = module_b(r_1x, v_1x, cfg.constellation)
        delta = np.linalg.norm(x_1_new - x_1, axis=1) / np.maximum(
            np.linalg.norm(x_1_new, axis=1), 1e-300)
        x_1 = np.where(act[:, None], x_1_new, x_1)

        per_v1x.append(v_1x.copy())
        per_v1x_post.append(np.where(act, v_1x_post, per_v1x_post[-1] if per_v1x_post else v_1x_post))
        per_dq2x.append(np.where(act, d_q2x, per_dq2x[-1] if per_dq2x else d_q2x))
        per_delta.append(np.where(act, delta, 0.0))
        if per_mse is not None:
            per_mse.append(np.mean(np.abs(x_1 - x_true) ** 2, axis=1))

        r_2x_new, v_2x_new = extrinsic(x_1, v_1x_post, r_1x, v_1x, cap=cap)
        r_2x = step(r_2x_new, r_2x, act, damp)
        v_2x = step(v_2x_new, v_2x, act, damp)

        # Module C, z side, with the refreshed x messages.
        x_2, _, d_q2z = linear_stage(False)
        z_2 = op.apply(x_2)
        r_1z_new = np.empty_like(r_1z)
        v_1z_new = np.empty_like(v_1z)
        for gi, (_, comp, _) in enumerate(groups):
            rg, vg = extrinsic(z_2[:, comp], d_q2z, r_2z[:, comp], v_2z[:, gi], cap=cap)
            r_1z_new[:, comp] = rg
            v_1z_new[:, gi] = vg
        r_1z = step(r_1z_new, r_1z, act, damp)
        v_1z = step(v_1z_new, v_1z, act, damp)

        newly_done = act & (delta < opts.tol) & (t > 1)
        converged |= newly_done
        active = active & ~newly_done
        if not active.any():
            break

    state = None
    if keep_state:
        state = DetectorState(
            r_1z=r_1z, v_1z=v_1z, r_2z=r_2z, v_2z=v_2z,
            r_1x=r_1x, v_1x=v_1x, r_2x=r_2x, v_2x=v_2x,
            z_1=z_1, x_1=x_1, x_2=x_2, z_2=z_2,
            v_1z_post=v_post_bar, v_1x_post=v_1x_post,
            d_q2x=d_q2x, d_q2z=d_q2z, t=iterations,
        )
    return BatchDetectResult(
        x_hat=x_1,
        iterations=iterations,
        converged=converged,
        per_iter_mse=np.array(per_mse) if per_mse is not None else None,
        per_iter_v1x=np.array(per_v1x),
        per_iter_v1x_post=np.array(per_v1x_post),
        per_iter_d_q2x=np.array(per_dq2x),
        per_iter_delta=np.array(per_delta),
        degenerate_bins=n_bad_total,
        final_state=state,
    )


def detect(y_q: np.ndarray, ch: ChannelRealization, cfg: SystemConfig,
           opts: DetectorOptions | None = None,
           x_true: np.ndarray | None = None):
    """Detect one block: returns (posterior mean, hard symbols, diagnostics).

    Non-convergence within t_max is not an error; the last iterate is
    returned with diagnostics.converged = False.  The run is deterministic
    given (y_q, ch, cfg, opts).
    """
    op = _operator_for(ch)
    res = detect_batch(np.asarray(y_q, dtype=complex)[None], op, cfg, opts,
                       None if x_true is None else np.asarray(x_true)[None])
    diags = DetectorDiagnostics(
        mse=[] if res.per_iter_mse is None else [float(v[0]) for v in res.per_iter_mse],
        v_1x=[float(v[0]) for v in res.per_iter_v1x],
        v_1x_post=[float(v[0]) for v in res.per_iter_v1x_post],
        d_q2x=[float(v[0]) for v in res.per_iter_d_q2x],
        delta=[float(v[0]) for v in res.per_iter_delta],
        iterations=res.iterations,
        converged=bool(res.converged[0]),
        degenerate_bins=res.degenerate_bins,
    )
    x_hat = res.x_hat[0]
    symbols, _ = hard_decision(x_hat, cfg.constellation)
    return x_hat, symbols, diags
