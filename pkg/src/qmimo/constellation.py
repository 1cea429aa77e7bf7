"""Unit-energy constellations with Gray labeling, symbol draws and decisions."""

from __future__ import annotations

import math

import numpy as np

# Per-axis amplitude levels indexed by the Gray-coded axis label, so that
# adjacent levels differ in exactly one bit.  Axis label g (an integer built
# from the axis bits, MSB first) maps to _GRAY_LEVELS[n_axis_bits][g].
_GRAY_LEVELS = {
    1: np.array([1.0, -1.0]),                      # 0 -> +1, 1 -> -1
    2: np.array([-3.0, -1.0, 3.0, 1.0]),           # 00,01,10,11 -> -3,-1,+3,+1
    3: np.array([-7.0, -5.0, -1.0, -3.0, 7.0, 5.0, 1.0, 3.0]),
}

_NAMES = {"qpsk": 2, "16qam": 4, "64qam": 6}


def bits_per_symbol(name: str) -> int:
    try:
        return _NAMES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown constellation {name!r}; use one of {sorted(_NAMES)}") from None


def constellation_points(name: str) -> np.ndarray:
    """Complex points in canonical (bit-label) index order, E|s|^2 = 1.

    Index k carries the Gray-labeled bits of the symbol, I-axis bits first:
    k = (i_label << bits_per_axis) | q_label.
    """
    mu = bits_per_symbol(name)
    half = mu // 2
    levels = _GRAY_LEVELS[half]
    k = np.arange(1 << mu)
    i_label = k >> half
    q_label = k & ((1 << half) - 1)
    pts = levels[i_label] + 1j * levels[q_label]
    return pts / math.sqrt(float(np.mean(np.abs(pts) ** 2)))


def symbol_bits(name: str, indices: np.ndarray) -> np.ndarray:
    """Gray-coded bits (MSB first) for canonical constellation indices."""
    mu = bits_per_symbol(name)
    shifts = np.arange(mu - 1, -1, -1)
    return (np.asarray(indices)[..., None] >> shifts) & 1


def draw_symbols(name: str, count: int, seed) -> np.ndarray:
    """Equiprobable unit-energy symbols; deterministic for a fixed seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = constellation_points(name)
    return pts[rng.integers(0, pts.size, size=count)]


def hard_decision(x_hat: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-distance symbols and their Gray bits.

    Ties break toward the lexicographically smallest constellation index
    (np.argmin picks the first minimum).
    """
    pts = constellation_points(name)
    x_hat = np.asarray(x_hat)
    d2 = np.abs(x_hat[..., None] - pts) ** 2
    idx = np.argmin(d2, axis=-1)
    return pts[idx], symbol_bits(name, idx)


def symbol_posterior(r: np.ndarray, v, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise posterior mean/variance of a symbol in Gaussian noise.

    Model: r = x + w with w ~ CN(0, v) and x equiprobable on the
    constellation; v is a scalar (or one scalar per leading batch entry).
    Returns (posterior means shaped like r, average posterior variance per
    batch entry).
    """
    pts = constellation_points(name)
    r = np.asarray(r, dtype=complex)
    v = np.asarray(v, dtype=float)
    v_b = v.reshape(v.shape + (1,) * (r.ndim - v.ndim + 1)) if v.ndim else v
    logits = -(np.abs(r[..., None] - pts) ** 2) / v_b
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    mean = w @ pts
    second = w @ (np.abs(pts) ** 2)
    var = np.maximum(second - np.abs(mean) ** 2, 0.0)
    return mean, var.mean(axis=-1)
