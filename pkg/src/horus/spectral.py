"""Dense real-matrix spectral primitives and small statistical utilities.

Everything here is a pure function on immutable inputs; the heavy lifting
(thin SVD) is delegated to LAPACK via numpy. Spectral entropy and the top-k
energy ratio are computed on the normalized singular-value distribution and
are therefore invariant to positive rescaling and to zero-padding of the
source matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Spectrum",
    "thin_svd",
    "spectral_entropy",
    "topk_energy_ratio",
    "first_right_singular_vector",
    "percentile",
    "inverse_normal_cdf",
]


@dataclass(frozen=True)
class Spectrum:
    """Singular values of a real matrix, sorted non-increasing.

    ``nominal_rank`` is the number of retained values, i.e. min(rows, cols)
    of the source matrix, not the numerical rank.
    """

    values: np.ndarray = field(repr=False)
    nominal_rank: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or len(vals) != self.nominal_rank:
            raise ValueError(
                f"spectrum length {len(vals)} != nominal_rank {self.nominal_rank}"
            )
        if self.nominal_rank < 1:
            raise ValueError("nominal_rank must be positive")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("singular values must be finite and non-negative")
        if np.any(np.diff(vals) > 0):
            raise ValueError("singular values must be sorted non-increasing")

    @property
    def total(self) -> float:
        return float(self.values.sum())


def _as_finite_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def thin_svd(m) -> tuple[np.ndarray, Spectrum, np.ndarray]:
    """Thin SVD of a p x q real matrix.

    Returns ``(U, spectrum, V)`` with ``U`` of shape (p, t), ``V`` of shape
    (q, t), t = min(p, q), both with orthonormal columns, such that
    ``U @ diag(s) @ V.T`` reconstructs ``m``.
    """
    m = _as_finite_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u, Spectrum(s, len(s)), vt.T


def spectral_entropy(s: Spectrum) -> float:
    """Shannon entropy (natural log) of the normalized singular values.

    Zero-valued modes contribute nothing (0 * ln 0 := 0). An all-zero
    spectrum returns 0 by convention: a dead update carries no dispersion.
    """
    total = s.total
    if total <= 0.0:
        return 0.0
    p = s.values / total
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def topk_energy_ratio(s: Spectrum, k: int) -> float:
    """Fraction of total singular-value mass carried by the k largest values.

    ``k`` is clamped to the nominal rank. An all-zero spectrum returns 1 by
    convention (maximally concentrated).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(int(k), s.nominal_rank)
    total = s.total
    if total <= 0.0:
        return 1.0
    return float(s.values[:k].sum() / total)


def first_right_singular_vector(m) -> tuple[np.ndarray, bool]:
    """Right singular vector of the largest singular value, as a unit vector.

    The sign is canonicalized so the entry of largest magnitude is positive.
    A zero matrix has no principal direction; it returns the first standard
    basis vector together with ``degenerate=True``.
    """
    m = _as_finite_matrix(m)
    if not m.any():
        v = np.zeros(m.shape[1])
        v[0] = 1.0
        return v, True
    _, _, vt = np.linalg.svd(m, full_matrices=False)
    v = vt[0].copy()
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v, False


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile on the ascending sort.

    The fractional rank is (n - 1) * p / 100; the result interpolates
    between the floor and ceil order statistics.
    """
    xs = np.sort(np.asarray(values, dtype=float))
    if xs.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"p must be in [0, 100], got {p}")
    rank = (xs.size - 1) * p / 100.0
    lo = math.floor(rank)
    hi = math.ceil(rank)
    frac = rank - lo
    return float(xs[lo] + frac * (xs[hi] - xs[lo]))


# Rational approximation coefficients (Acklam's algorithm for the inverse
# standard normal CDF), refined below by one Halley step on erfc.
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)
_ICDF_P_LOW = 0.02425


def inverse_normal_cdf(q: float) -> float:
    """Quantile function of the standard normal distribution.

    Accurate to well below 1e-9 in CDF terms over (0, 1).
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be in the open interval (0, 1), got {q}")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if q < _ICDF_P_LOW:
        u = math.sqrt(-2.0 * math.log(q))
        x = ((((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5])
             / ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0))
    elif q > 1.0 - _ICDF_P_LOW:
        u = math.sqrt(-2.0 * math.log(1.0 - q))
        x = -((((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5])
              / ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0))
    else:
        u = q - 0.5
        t = u * u
        x = ((((((a[0] * t + a[1]) * t + a[2]) * t + a[3]) * t + a[4]) * t + a[5]) * u
             / (((((b[0] * t + b[1]) * t + b[2]) * t + b[3]) * t + b[4]) * t + 1.0))
    # One Halley refinement step against the exact CDF.
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - q
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)
