"""Quantized MIMO-OFDM system model.

Builds the equivalent frequency-domain sensing model: a DFT-precoded symbol
vector passes through per-subcarrier channel responses and per-RF-chain
midrise quantizers.  The sensing operator is never materialized; it is
applied with FFTs plus per-subcarrier matrix products, and its Gram spectrum
comes from the per-subcarrier Gram matrices (the DFT factors and the unitary
precoding permutation do not change singular values).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .constellation import bits_per_symbol, constellation_points, draw_symbols  # noqa: F401

INF_BITS = math.inf

# MSE-optimal uniform midrise step for a unit-variance Gaussian input,
# per quantizer bit width (classic Max quantizer values).
OPTIMAL_STEP = {1: 1.5956, 2: 0.9957, 3: 0.5860}


class ConfigError(ValueError):
    """Invalid system or experiment configuration."""


def _parse_bits(b):
    if b in ("inf", "oo", INF_BITS):
        return INF_BITS
    bi = int(b)
    if bi not in (1, 2, 3):
        raise ConfigError(f"ADC resolution must be 1, 2, 3 or inf, got {b!r}")
    return bi


@dataclass(frozen=True)
class SystemConfig:
    """Static description of one quantized MIMO-OFDM link.

    adc_bits lists the per-receive-chain resolution (1-3 bits or inf for an
    unquantized chain); a uniform list is a pure low-resolution receiver, a
    mixed list is a mixed-ADC receiver.  snr_db sets the average SNR
    1/sigma_N^2 under the unit-power, 1/sqrt(n_t)-normalized convention.
    """

    n_t: int
    n_r: int
    n_c: int
    taps_l: int = 4
    snr_db: float = 10.0
    constellation: str = "qpsk"
    adc_bits: tuple = None
    seed: int = 0
    quantizer_scale: float | None = None

    def __post_init__(self):
        if self.adc_bits is None:
            object.__setattr__(self, "adc_bits", (INF_BITS,) * self.n_r)
        object.__setattr__(self, "adc_bits", tuple(_parse_bits(b) for b in self.adc_bits))
        if self.n_t > self.n_r:
            raise ConfigError(f"need n_t <= n_r, got {self.n_t} > {self.n_r}")
        if self.n_c < 1 or (self.n_c & (self.n_c - 1)) != 0:
            raise ConfigError(f"n_c must be a power of two, got {self.n_c}")
        if not (1 <= self.taps_l <= self.n_c):
            raise ConfigError(f"need 1 <= taps_l <= n_c, got taps_l={self.taps_l}")
        if len(self.adc_bits) != self.n_r:
            raise ConfigError(f"adc_bits must list all {self.n_r} chains, got {len(self.adc_bits)}")
        bits_per_symbol(self.constellation)

    @property
    def m(self) -> int:
        return self.n_c * self.n_r

    @property
    def n(self) -> int:
        return self.n_c * self.n_t

    @property
    def sigma2(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)

    @property
    def p_x(self) -> float:
        return 1.0

    @property
    def p_z_nominal(self) -> float:
        """Ensemble-average transmit-side power of z = A x.

        With i.i.d. CN(0, 1/L) taps and the 1/sqrt(n_t) normalization,
        E[tr(A^H A)] = M exactly, so the nominal P_z equals P_x.
        """
        return self.p_x

    def adc_groups(self) -> list[tuple[float, np.ndarray]]:
        """(bits, chain index array) per distinct resolution, low bits first."""
        order = sorted(set(self.adc_bits), key=lambda b: (math.isinf(b), b))
        return [
            (b, np.flatnonzero([x == b for x in self.adc_bits]))
            for b in order
        ]

    def replace(self, **kw) -> "SystemConfig":
        from dataclasses import replace as _replace

        return _replace(self, **kw)

    def digest(self) -> str:
        payload = {k: (str(v) if isinstance(v, float) and math.isinf(v) else v)
                   for k, v in self.__dict__.items()}
        payload["adc_bits"] = [str(b) for b in self.adc_bits]
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Quantizer:
    """Uniform midrise quantizer on each real dimension.

    The 2^bits codebook values are (-1/2 + b) * step; the outermost bins are
    half-open to +-inf.  Consecutive bins partition the real line.
    """

    bits: int
    step: float
    codebook: np.ndarray = field(repr=False)
    lows: np.ndarray = field(repr=False)
    ups: np.ndarray = field(repr=False)

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def bin_index(self, x) -> np.ndarray:
        """Index of the bin containing x (bins are (low, up])."""
        b = np.ceil(np.asarray(x, dtype=float) / self.step)
        half = self.levels // 2
        return np.clip(b, 1 - half, half).astype(np.int64) + half - 1

    def quantize_real(self, x) -> np.ndarray:
        return self.codebook[self.bin_index(x)]

    def value_index(self, y_quantized) -> np.ndarray:
        """Codebook index of already-quantized values (validated)."""
        idx = np.rint(np.asarray(y_quantized, dtype=float) / self.step + 0.5).astype(np.int64)
        idx += self.levels // 2 - 1
        if np.any((idx < 0) | (idx >= self.levels)):
            raise ValueError("value not in quantizer codebook")
        if not np.allclose(self.codebook[idx], y_quantized, rtol=0, atol=1e-9 * self.step):
            raise ValueError("value not in quantizer codebook")
        return idx


def make_quantizer(bits: int, signal_power_per_real_dim: float,
                   scale_override: float | None = None) -> Quantizer:
    """Midrise quantizer with an MSE-optimal step for a Gaussian input.

    Without an override the step is c_bits * sqrt(signal_power_per_real_dim)
    with the unit-variance optimal constants (only 1-3 bits are tabulated);
    with an explicit override any width up to 12 bits is accepted, which the
    tests use to emulate fine high-resolution grids.
    """
    bits = int(bits)
    if scale_override is not None:
        if not (1 <= bits <= 12):
            raise ConfigError(f"unsupported bit width {bits}")
        step = float(scale_override)
    else:
        if bits not in OPTIMAL_STEP:
            raise ConfigError(f"unsupported bit width {bits}; tabulated steps cover 1-3 bits")
        if signal_power_per_real_dim <= 0:
            raise ConfigError("signal power must be positive")
        step = OPTIMAL_STEP[bits] * math.sqrt(signal_power_per_real_dim)
    half = (1 << bits) // 2
    b = np.arange(1 - half, half + 1, dtype=float)
    codebook = (b - 0.5) * step
    lows = np.where(b > 1 - half, codebook - 0.5 * step, -np.inf)
    ups = np.where(b < half, codebook + 0.5 * step, np.inf)
    return Quantizer(bits=bits, step=step, codebook=codebook, lows=lows, ups=ups)


def quantizer_for(cfg: SystemConfig, bits: int, p_z: float | None = None) -> Quantizer:
    """The shared per-chain quantizer of a system.

    The step tracks the realization's received power P_z (an AGC ahead of
    the ADC); all chains share it.  Without a realization, the ensemble
    value P_z = P_x applies.
    """
    p_z = cfg.p_z_nominal if p_z is None else float(p_z)
    return make_quantizer(bits, p_z / 2.0, cfg.quantizer_scale)


def realization_p_z(ch: ChannelRealization, p_x: float = 1.0) -> float:
    """P_z = P_x tr(A^H A)/M from the taps (Parseval, no eigensolve)."""
    return p_x * float(np.sum(np.abs(ch.taps) ** 2)) * ch.norm**2 / ch.n_r


def quantizer_steps(cfg: SystemConfig, bits: int, p_z) -> np.ndarray:
    """Vectorized per-realization steps for a batch of P_z values."""
    if cfg.quantizer_scale is not None:
        return np.full(np.shape(p_z), float(cfg.quantizer_scale))
    if bits not in OPTIMAL_STEP:
        raise ConfigError(f"unsupported bit width {bits}; tabulated steps cover 1-3 bits")
    return OPTIMAL_STEP[bits] * np.sqrt(np.asarray(p_z, dtype=float) / 2.0)


def midrise_quantize(y_re, bits: int, step) -> np.ndarray:
    """Vectorized midrise map with broadcastable (e.g. per-trial) steps."""
    half = (1 << bits) // 2
    b = np.clip(np.ceil(np.asarray(y_re) / step), 1 - half, half)
    return (b - 0.5) * step


def midrise_bounds(y_quantized, bits: int, step):
    """(low, up) bin thresholds of quantized values, broadcastable steps."""
    half = (1 << bits) // 2
    b = np.rint(np.asarray(y_quantized) / step + 0.5)
    value = (b - 0.5) * step
    low = np.where(b > 1 - half, value - 0.5 * step, -np.inf)
    up = np.where(b < half, value + 0.5 * step, np.inf)
    return low, up


def quantize(q: Quantizer, y: np.ndarray) -> np.ndarray:
    """Quantize real and imaginary parts separately."""
    y = np.asarray(y)
    if np.iscomplexobj(y):
        return q.quantize_real(y.real) + 1j * q.quantize_real(y.imag)
    return q.quantize_real(y)


def thresholds(q: Quantizer, y_quantized: float) -> tuple[float, float]:
    """Lower/upper bin thresholds of a codebook value (+-inf on outer bins)."""
    idx = q.value_index(y_quantized)
    return float(q.lows[idx]), float(q.ups[idx])


@dataclass(frozen=True)
class ChannelRealization:
    """One draw of the frequency-selective channel and precoding permutation.

    freq_response[k, r, t] is the length-n_c DFT of the (r, t) tap vector at
    subcarrier k; norm = 1/sqrt(n_t) is the sensing-matrix normalization.
    """

    taps: np.ndarray
    freq_response: np.ndarray
    fbb_permutation: np.ndarray
    norm: float
    config_digest: str = ""

    @property
    def n_r(self) -> int:
        return self.taps.shape[0]

    @property
    def n_t(self) -> int:
        return self.taps.shape[1]

    @property
    def n_c(self) -> int:
        return self.freq_response.shape[0]


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of A^H A (ascending), driving all trace expectations."""

    eigenvalues: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.eigenvalues.mean())


def draw_channel(cfg: SystemConfig, seed) -> ChannelRealization:
    """I.i.d. CN(0, 1/L) taps plus a uniform precoding row permutation."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = math.sqrt(0.5 / cfg.taps_l)
    shape = (cfg.n_r, cfg.n_t, cfg.taps_l)
    taps = scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    freq = np.fft.fft(taps, n=cfg.n_c, axis=-1)          # (n_r, n_t, n_c)
    freq = np.moveaxis(freq, -1, 0)                      # (n_c, n_r, n_t)
    perm = rng.permutation(cfg.n)
    return ChannelRealization(
        taps=taps, freq_response=freq, fbb_permutation=perm,
        norm=1.0 / math.sqrt(cfg.n_t), config_digest=cfg.digest(),
    )


def save_channel(ch: ChannelRealization, path) -> None:
    """Self-describing binary record for regression fixtures."""
    np.savez(path, taps=ch.taps, fbb_permutation=ch.fbb_permutation,
             n_c=ch.n_c, norm=ch.norm, config_digest=ch.config_digest)


def load_channel(path) -> ChannelRealization:
    with np.load(path, allow_pickle=False) as data:
        taps = data["taps"]
        n_c = int(data["n_c"])
        freq = np.moveaxis(np.fft.fft(taps, n=n_c, axis=-1), -1, 0)
        return ChannelRealization(
            taps=taps, freq_response=freq,
            fbb_permutation=data["fbb_permutation"],
            norm=float(data["norm"]),
            config_digest=str(data["config_digest"]),
        )


class ChannelOperator:
    """Batched matrix-free view of the sensing operator A = A~ F_BB.

    Holds B channel realizations; x/z arguments carry a leading batch axis.
    Applications cost O(N log N + n_c n_r n_t) via FFTs and per-subcarrier
    products; regularized solves reuse a one-time eigendecomposition of the
    per-subcarrier Gram matrices.  Instances are immutable after
    construction and safe to share across concurrent detector invocations.
    """

    def __init__(self, freq, perms, norm):
        self.freq = np.asarray(freq)                     # (B, n_c, n_r, n_t)
        self.perms = np.asarray(perms)                   # (B, N)
        self.norm = float(norm)
        self.batch, self.n_c, self.n_r, self.n_t = self.freq.shape
        self.n = self.n_c * self.n_t
        self.m = self.n_c * self.n_r
        self.h = self.freq * self.norm
        self.inv_perms = np.argsort(self.perms, axis=1)

    @classmethod
    def from_channels(cls, channels) -> "ChannelOperator":
        chs = list(channels)
        freq = np.stack([c.freq_response for c in chs])
        perms = np.stack([c.fbb_permutation for c in chs])
        return cls(freq, perms, chs[0].norm)

    @cached_property
    def _gram_eig(self):
        gram = np.einsum("bkrs,bkrt->bkst", self.h.conj(), self.h)
        return np.linalg.eigh(gram)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of A^H A, shape (B, n_c, n_t), clipped at 0."""
        return np.maximum(self._gram_eig[0], 0.0)

    @property
    def mean_eigenvalue(self) -> np.ndarray:
        return self.eigenvalues.reshape(self.batch, -1).mean(axis=1)

    def p_z(self, p_x: float = 1.0) -> np.ndarray:
        """Per-realization P_z = P_x tr(A^H A) / M."""
        return p_x * self.mean_eigenvalue * (self.n / self.m)

    def _precode(self, x):
        xf = np.fft.fft(x, axis=-1, norm="ortho")
        return np.take_along_axis(xf, self.perms, axis=-1)

    def _precode_adjoint(self, u):
        xf = np.take_along_axis(u, self.inv_perms, axis=-1)
        return np.fft.ifft(xf, axis=-1, norm="ortho")

    def apply(self, x: np.ndarray) -> np.ndarray:
        """z = A x for x of shape (B, N); returns (B, M)."""
        xbar = self._precode(x).reshape(self.batch, self.n_t, self.n_c)
        w = np.einsum("bkrt,btk->brk", self.h, xbar)
        y = np.fft.ifft(w, axis=-1, norm="ortho")
        return y.reshape(self.batch, self.m)

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        """A^H z for z of shape (B, M); returns (B, N)."""
        w = np.fft.fft(z.reshape(self.batch, self.n_r, self.n_c), axis=-1, norm="ortho")
        v = np.einsum("bkrt,brk->btk", self.h.conj(), w)
        return self._precode_adjoint(v.reshape(self.batch, self.n))

    def solve(self, gamma_x, gamma_z, b: np.ndarray) -> np.ndarray:
        """(gamma_x I + gamma_z A^H A)^{-1} b with per-batch scalar gammas."""
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1, 1)
        gz = np.asarray(gamma_z, dtype=float).reshape(self.batch, 1, 1)
        lam, vec = self._gram_eig
        u = self._precode(b).reshape(self.batch, self.n_t, self.n_c).transpose(0, 2, 1)
        coeff = np.einsum("bkts,bkt->bks", vec.conj(), u)
        coeff /= gx + np.maximum(lam, 0.0) * gz
        s = np.einsum("bkst,bkt->bks", vec, coeff)
        return self._precode_adjoint(s.transpose(0, 2, 1).reshape(self.batch, self.n))

    def trace_qx(self, gamma_x, gamma_z) -> np.ndarray:
        """(1/N) sum_i 1/(gamma_x + lambda_i gamma_z), per batch entry."""
        lam = self.eigenvalues.reshape(self.batch, -1)
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1)
        gz = np.asarray(gamma_z, dtype=float).reshape(self.batch, 1)
        return (1.0 / (gx + lam * gz)).mean(axis=1)

    def trace_qz(self, gamma_x, gamma_z) -> np.ndarray:
        """(1/M) sum_i lambda_i/(gamma_x + lambda_i gamma_z), per batch entry."""
        lam = self.eigenvalues.reshape(self.batch, -1)
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1)
        gz = np.asarray(gamma_z, dtype=float).reshape(self.batch, 1)
        return (lam / (gx + lam * gz)).sum(axis=1) / self.m

    def solve_weighted(self, gamma_x, component_weights, b):
        """Per-component-weighted regularized solve and both trace averages.

        Computes (gamma_x I + A^H Diag(w) A)^{-1} b plus tr(Q)/N and
        tr(A Q A^H)/M, for weights w that are constant within each receive
        chain (the per-ADC-group message precisions).  The weighted
        per-subcarrier Grams are re-diagonalized per call:
        O(N log N + n_c n_t^3).
        """
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1, 1)
        w = np.asarray(component_weights, dtype=float).reshape(self.batch, self.n_r, self.n_c)[:, :, 0]
        gram = np.einsum("bkrs,br,bkrt->bkst", self.h.conj(), w, self.h)
        mu, vec = np.linalg.eigh(gram)
        mu = np.maximum(mu, 0.0)
        u = self._precode(b).reshape(self.batch, self.n_t, self.n_c).transpose(0, 2, 1)
        coeff = np.einsum("bkts,bkt->bks", vec.conj(), u)
        coeff /= gx + mu
        s = np.einsum("bkst,bkt->bks", vec, coeff)
        x = self._precode_adjoint(s.transpose(0, 2, 1).reshape(self.batch, self.n))
        d_qx = (1.0 / (gx + mu)).reshape(self.batch, -1).mean(axis=1)
        # tr(A Q A^H) needs the unweighted Gram expressed in the weighted basis
        gram_u = np.einsum("bkrs,bkrt->bkst", self.h.conj(), self.h)
        rot = np.einsum("bkts,bkts->bks", vec.conj(),
                        np.einsum("bktu,bkus->bkts", gram_u, vec)).real
        d_qz = (rot / (gx + mu)).reshape(self.batch, -1).sum(axis=1) / self.m
        return x, d_qx, d_qz


class DenseOperator:
    """Dense/SVD realization of the same interface, for tests and the
    exact-path cross-check of the FFT realization."""

    def __init__(self, matrices: np.ndarray):
        self.a = np.asarray(matrices)                    # (B, M, N)
        self.batch, self.m, self.n = self.a.shape
        u, s, vh = np.linalg.svd(self.a, full_matrices=False)
        self._u, self._s, self._vh = u, s, vh

    @property
    def eigenvalues(self) -> np.ndarray:
        lam = np.zeros((self.batch, self.n))
        lam[:, : self._s.shape[1]] = self._s**2
        return lam

    @property
    def mean_eigenvalue(self) -> np.ndarray:
        return self.eigenvalues.mean(axis=1)

    def p_z(self, p_x: float = 1.0) -> np.ndarray:
        return p_x * self.mean_eigenvalue * (self.n / self.m)

    def apply(self, x):
        return np.einsum("bmn,bn->bm", self.a, x)

    def adjoint(self, z):
        return np.einsum("bmn,bm->bn", self.a.conj(), z)

    def solve(self, gamma_x, gamma_z, b):
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1)
        gz = np.asarray(gamma_z, dtype=float).reshape(self.batch, 1)
        coeff = np.einsum("bkn,bn->bk", self._vh, b)
        lam = self._s**2
        coeff = coeff / (gx + lam * gz)
        full = np.einsum("bkn,bk->bn", self._vh.conj(), coeff)
        if self._s.shape[1] < self.n:
            # component of b orthogonal to the row space sees only gamma_x I
            proj = np.einsum("bkn,bk->bn", self._vh.conj(),
                             np.einsum("bkn,bn->bk", self._vh, b))
            full = full + (b - proj) / gx
        return full

    def trace_qx(self, gamma_x, gamma_z):
        lam = self.eigenvalues
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1)
        gz = np.asarray(gamma_z, dtype=float).reshape(self.batch, 1)
        return (1.0 / (gx + lam * gz)).mean(axis=1)

    def trace_qz(self, gamma_x, gamma_z):
        lam = self.eigenvalues
        gx = np.asarray(gamma_x, dtype=float).reshape(self.batch, 1)
        gz = np.asarray(gamma_z, dtype=float).reshape(self.batch, 1)
        return (lam / (gx + lam * gz)).sum(axis=1) / self.m

    def solve_weighted(self, gamma_x, component_weights, b):
        gx = np.asarray(gamma_x, dtype=float)
        w = np.asarray(component_weights, dtype=float)
        eye = np.eye(self.n)
        gram_w = np.einsum("bmn,bm,bmk->bnk", self.a.conj(), w, self.a)
        gram_u = np.einsum("bmn,bmk->bnk", self.a.conj(), self.a)
        q = np.linalg.inv(gx[:, None, None] * eye + gram_w)
        x = np.einsum("bnk,bk->bn", q, b)
        d_qx = np.einsum("bnn->b", q).real / self.n
        d_qz = np.einsum("bnk,bkn->b", q, gram_u).real / self.m
        return x, d_qx, d_qz


def apply_A(ch: ChannelRealization, x: np.ndarray) -> np.ndarray:
    """A x without materializing A (permuted DFT, per-subcarrier products,
    per-chain inverse FFT)."""
    x = np.asarray(x, dtype=complex)
    n = ch.n_c * ch.n_t
    if x.shape != (n,):
        raise ValueError(f"expected x of length {n}, got {x.shape}")
    op = ChannelOperator(ch.freq_response[None], ch.fbb_permutation[None], ch.norm)
    return op.apply(x[None])[0]


def apply_A_adjoint(ch: ChannelRealization, z: np.ndarray) -> np.ndarray:
    """Exact adjoint of apply_A."""
    z = np.asarray(z, dtype=complex)
    m = ch.n_c * ch.n_r
    if z.shape != (m,):
        raise ValueError(f"expected z of length {m}, got {z.shape}")
    op = ChannelOperator(ch.freq_response[None], ch.fbb_permutation[None], ch.norm)
    return op.adjoint(z[None])[0]


def spectrum(ch: ChannelRealization) -> Spectrum:
    """Eigenvalues of A^H A from the per-subcarrier Gram matrices."""
    op = ChannelOperator(ch.freq_response[None], ch.fbb_permutation[None], ch.norm)
    return Spectrum(eigenvalues=np.sort(op.eigenvalues[0].ravel()))


def transmit(cfg: SystemConfig, ch: ChannelRealization, x: np.ndarray,
             noise_seed) -> tuple[np.ndarray, np.ndarray]:
    """y = A x + n and its per-chain quantization (inf chains pass through)."""
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
    y = apply_A(ch, x)
    sigma = math.sqrt(cfg.sigma2 / 2.0)
    y = y + sigma * (rng.standard_normal(cfg.m) + 1j * rng.standard_normal(cfg.m))
    y_q = y.copy()
    p_z = realization_p_z(ch, cfg.p_x)
    for bits, chains in cfg.adc_groups():
        if math.isinf(bits):
            continue
        q = quantizer_for(cfg, bits, p_z)
        comp = (chains[:, None] * cfg.n_c + np.arange(cfg.n_c)).ravel()
        y_q[comp] = quantize(q, y[comp])
    return y, y_q


def dense_sensing_matrix(ch: ChannelRealization) -> np.ndarray:
    """Materialized A for small instances (test oracle / exact path).

    Built directly from the defining block structure with explicit DFT
    matrices, independent of the FFT application path.
    """
    n_c, n_r, n_t = ch.n_c, ch.n_r, ch.n_t
    k = np.arange(n_c)
    f = np.exp(-2j * np.pi * np.outer(k, k) / n_c) / math.sqrt(n_c)
    blocks = np.empty((n_r * n_c, n_t * n_c), dtype=complex)
    for r in range(n_r):
        for t in range(n_t):
            blocks[r * n_c:(r + 1) * n_c, t * n_c:(t + 1) * n_c] = (
                f.conj().T @ np.diag(ch.freq_response[:, r, t]) * ch.norm
            )
    n = n_t * n_c
    kk = np.arange(n)
    f_n = np.exp(-2j * np.pi * np.outer(kk, kk) / n) / math.sqrt(n)
    f_bb = f_n[ch.fbb_permutation, :]
    return blocks @ f_bb
