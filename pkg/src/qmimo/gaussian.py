"""Numerically stable scalar Gaussian special functions and quadrature.

These primitives back both the detector posteriors and the state-evolution
integrals.  Everything here is a pure function of its arguments and safe to
call concurrently.

The interval ratios are evaluated with a scaled-complementary-error-function
(erfcx) factorization so that they stay finite and accurate when both
endpoints lie deep in one Gaussian tail (|a|, |b| well beyond 38, where the
raw tail mass underflows float64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e
from scipy import special

SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class DegenerateIntervalError(ArithmeticError):
    """Interval mass underflowed to zero after tail-safe rescaling.

    Signals an effectively impossible quantizer bin under the current
    message; callers clamp rather than propagate.
    """


def phi(z):
    """Standard normal density, vectorized."""
    z = np.asarray(z, dtype=float)
    out = np.exp(-0.5 * z * z) / SQRT_2PI
    return out if out.ndim else float(out)


def big_phi(z):
    """Standard normal CDF, accurate in the far left tail.

    For z < 0 uses Phi(z) = erfcx(-z/sqrt(2)) * exp(-z^2/2) / 2, which keeps
    the result nonzero down to the float64 subnormal range (z = -38) instead
    of underflowing near z = -37.5 like the direct erfc evaluation.
    """
    z = np.asarray(z, dtype=float)
    neg = z < 0.0
    out = np.empty_like(z)
    out[~neg] = special.ndtr(z[~neg])
    zn = z[neg]
    with np.errstate(over="ignore"):
        out[neg] = 0.5 * special.erfcx(-zn / math.sqrt(2.0)) * np.exp(-0.5 * zn * zn)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule normalized for the standard normal measure.

    Weights sum to 1, nodes are symmetric about 0, and the rule integrates
    polynomials up to degree 2n-1 exactly against phi(z) dz.
    """

    nodes: np.ndarray
    weights: np.ndarray
    kind: str = "gauss-hermite-for-standard-normal"

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


def gauss_hermite(n: int) -> QuadratureRule:
    """Quadrature rule of order n for integrals against the N(0,1) measure."""
    if not (2 <= int(n) <= 256):
        raise ValueError(f"unsupported quadrature order {n}; need 2 <= n <= 256")
    nodes, weights = hermite_e.hermegauss(int(n))
    return QuadratureRule(nodes=nodes, weights=weights / SQRT_2PI)


def _interval_ratios(a, b):
    """Tail-safe ratios over the interval [b, a] of the standard normal.

    Returns (n1, n2, ok) with
        n1 = (phi(a) - phi(b)) / (Phi(a) - Phi(b))
        n2 = (a phi(a) - b phi(b)) / (Phi(a) - Phi(b))
    elementwise, a >= b assumed, infinities allowed (a*phi(a) -> 0 at +-inf).
    ok is False where the interval mass vanishes even after rescaling.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    n1 = np.zeros(a.shape, dtype=float)
    n2 = np.zeros(a.shape, dtype=float)
    ok = np.ones(a.shape, dtype=bool)

    right = b >= 0.0
    left = a <= 0.0
    # Intervals touching 0 from one side belong to exactly one tail branch.
    straddle = ~(right | left)

    for sel, flip in ((right, False), (left, True)):
        if not np.any(sel):
            continue
        if flip:
            hi, lo = -b[sel], -a[sel]
        else:
            hi, lo = a[sel], b[sel]
        # hi >= lo >= 0; factor exp(-lo^2/2) out of every term.
        e_lo = special.erfcx(lo / math.sqrt(2.0))
        e_hi = np.where(np.isinf(hi), 0.0, special.erfcx(np.minimum(hi, 1e308) / math.sqrt(2.0)))
        with np.errstate(invalid="ignore", over="ignore"):
            delta = 0.5 * (hi - lo) * (hi + lo)
            t = np.where(np.isinf(hi), 0.0, np.exp(-np.minimum(delta, 746.0)))
            denom = e_lo - t * e_hi
            hit = np.where(np.isinf(hi), 0.0, hi * t)
            good = (denom > 0.0) & np.isfinite(denom)
            with np.errstate(divide="ignore"):
                r1 = _SQRT_2_OVER_PI * (t - 1.0) / denom
                r2 = _SQRT_2_OVER_PI * (hit - lo) / denom
        n1[sel] = np.where(good, -r1 if flip else r1, 0.0)
        n2[sel] = np.where(good, r2, 0.0)
        ok[sel] = good

    if np.any(straddle):
        hi, lo = a[straddle], b[straddle]
        mass = special.ndtr(hi) - special.ndtr(lo)
        hi_f = np.where(np.isinf(hi), 0.0, hi)
        lo_f = np.where(np.isinf(lo), 0.0, lo)
        p_hi = np.where(np.isinf(hi), 0.0, phi(hi_f))
        p_lo = np.where(np.isinf(lo), 0.0, phi(lo_f))
        good = mass > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            n1[straddle] = np.where(good, (p_hi - p_lo) / mass, 0.0)
            n2[straddle] = np.where(good, (hi_f * p_hi - lo_f * p_lo) / mass, 0.0)
        ok[straddle] = good

    return n1, n2, ok


def gaussian_ratio(a: float, b: float) -> tuple[float, float]:
    """Ratios ((phi(a)-phi(b))/mass, (a phi(a)-b phi(b))/mass) for a >= b.

    mass = Phi(a) - Phi(b); a*phi(a) is taken as 0 at a = +-inf.  Raises
    DegenerateIntervalError when the mass underflows to zero even in the
    rescaled tail form (an impossible quantizer bin for the caller to clamp).
    """
    if not a >= b:
        raise ValueError(f"need a >= b, got a={a}, b={b}")
    n1, n2, ok = _interval_ratios(a, b)
    if not ok:
        raise DegenerateIntervalError(f"interval [{b}, {a}] carries no probability mass")
    return float(n1), float(n2)


def interval_mass(a, b):
    """Phi(a) - Phi(b), elementwise; may underflow to 0 deep in a tail."""
    return big_phi(a) - big_phi(b)
