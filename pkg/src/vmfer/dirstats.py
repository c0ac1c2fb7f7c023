"""Directional statistics on the unit hypersphere.

Density, normalizing constant and sampling for the von Mises-Fisher
distribution, plus the resultant-length statistics used to score how much a
bundle of gradient directions agrees.

Directions are plain 1-D float arrays; :func:`as_unit_vector` validates them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, DomainError, EmptyInputError

UNIT_TOL = 1e-9
DEGENERATE_R = 1e-12
R_CLAMP = 1.0 - 1e-6
SERIES_RTOL = 1e-16
SERIES_MAX_TERMS = 1_000_000


def as_unit_vector(components, tol: float = UNIT_TOL) -> np.ndarray:
    """Return ``components`` as a float array, checking it has unit norm."""
    x = np.asarray(components, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 1:
        raise DomainError(f"unit vector must be 1-D with p >= 1, got shape {x.shape}")
    norm = float(np.linalg.norm(x))
    if abs(norm - 1.0) > tol:
        raise DomainError(f"vector norm {norm!r} differs from 1 by more than {tol}")
    return x


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DomainError("cannot normalize the zero vector")
    return v / n


@dataclass(frozen=True)
class VmfStats:
    """Summary of a bundle of directions.

    ``mean_direction`` is None when the bundle cancels out (R below 1e-12).
    """

    resultant_length: float
    mean_direction: Optional[np.ndarray]
    concentration: float
    sample_count: int


def _stack(dirs: Sequence) -> np.ndarray:
    if len(dirs) == 0:
        raise EmptyInputError("resultant of an empty list of directions")
    dims = {np.shape(d) for d in dirs}
    if len(dims) != 1:
        raise DimensionMismatchError(f"directions have mixed shapes {sorted(dims)}")
    X = np.asarray(dirs, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError("each direction must be a 1-D vector")
    return X


def resultant(dirs: Sequence) -> tuple[float, Optional[np.ndarray]]:
    """Mean resultant length R and mean direction of a set of unit vectors.

    >>> R, mu = resultant([[1.0, 0.0], [0.0, 1.0]])
    >>> round(R, 6), np.round(mu, 6).tolist()
    (0.707107, [0.707107, 0.707107])
    """
    X = _stack(dirs)
    xbar = X.sum(axis=0) / X.shape[0]
    R = float(np.sqrt(np.dot(xbar, xbar)))
    if R < DEGENERATE_R:
        return R, None
    return R, xbar / R


def banerjee_khat(R: float, p: int) -> float:
    """Banerjee et al. approximation to the concentration, R(p - R^2)/(1 - R^2).

    R is clamped to ``1 - 1e-6`` from above so the estimate stays finite.
    """
    if not (R >= 0.0) or p < 1:
        raise DomainError(f"banerjee_khat needs R >= 0 and p >= 1, got R={R!r}, p={p!r}")
    R = min(float(R), R_CLAMP)
    R2 = R * R
    return R * (p - R2) / (1.0 - R2)


def estimate_vmf(dirs: Sequence) -> VmfStats:
    X = _stack(dirs)
    R, mu = resultant(X)
    khat = banerjee_khat(R, X.shape[1]) if R >= DEGENERATE_R else 0.0
    return VmfStats(R, mu, khat, X.shape[0])


def _log_series_sum(nu: float, k: float) -> float:
    """log of sum_m (k^2/4)^m / (Gamma(m + nu + 1) m!).

    Terms are accumulated in log space. Summation stops once a term past the
    peak drops below ``SERIES_RTOL`` times the partial sum.
    """
    acc = -math.lgamma(nu + 1.0)
    if k == 0.0:
        return acc
    log_q = 2.0 * math.log(k / 2.0)
    log_rtol = math.log(SERIES_RTOL)
    prev = acc
    for m in range(1, SERIES_MAX_TERMS):
        lt = m * log_q - math.lgamma(m + nu + 1.0) - math.lgamma(m + 1.0)
        hi, lo = (acc, lt) if acc >= lt else (lt, acc)
        acc = hi + math.log1p(math.exp(lo - hi))
        if lt < prev and lt - acc < log_rtol:
            break
        prev = lt
    return acc


def log_bessel_iv(nu: float, k: float) -> float:
    """log I_nu(k) for k > 0 from the power series of the modified Bessel function."""
    if not math.isfinite(k) or k <= 0.0:
        raise DomainError(f"log_bessel_iv needs finite k > 0, got {k!r}")
    return nu * math.log(k / 2.0) + _log_series_sum(nu, k)


def log_vmf_normalizer(p: int, k: float) -> float:
    """log C_p(k) with C_p(k) = k^(p/2-1) / ((2 pi)^(p/2) I_(p/2-1)(k)).

    The k^nu factor is cancelled against the leading (k/2)^nu of the series,
    so k = 0 gives the uniform density 1/|S^(p-1)| without a special case.
    """
    if p < 1:
        raise DomainError(f"dimension must be >= 1, got {p}")
    if not math.isfinite(k) or k < 0.0:
        raise DomainError(f"concentration must be finite and >= 0, got {k!r}")
    nu = p / 2.0 - 1.0
    return nu * math.log(2.0) - (p / 2.0) * math.log(2.0 * math.pi) - _log_series_sum(nu, k)


def vmf_log_density(x, mu, k: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if x.shape != mu.shape or x.ndim != 1:
        raise DimensionMismatchError(f"x{x.shape} and mu{mu.shape} differ")
    if not math.isfinite(k):
        raise DomainError(f"non-finite concentration {k!r}")
    return log_vmf_normalizer(x.shape[0], k) + k * float(np.dot(mu, x))


def _wood_w(k: float, p: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample the component along the mean direction (Wood 1994)."""
    d = p - 1
    b = d / (math.sqrt(4.0 * k * k + d * d) + 2.0 * k)
    x0 = (1.0 - b) / (1.0 + b)
    c = k * x0 + d * math.log(1.0 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(16, int(1.2 * (n - filled)))
        z = rng.beta(d / 2.0, d / 2.0, size=m)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(m)
        with np.errstate(divide="ignore"):
            ok = k * w + d * np.log(1.0 - x0 * w) - c >= np.log(u)
        acc = w[ok][: n - filled]
        out[filled:filled + acc.shape[0]] = acc
        filled += acc.shape[0]
    return out


def sample_vmf(mu, k: float, n: int, rng=None) -> np.ndarray:
    """Draw ``n`` directions from vMF(k, mu), returned as an (n, p) array.

    ``rng`` is a seed or a :class:`numpy.random.Generator`.
    """
    mu = as_unit_vector(mu)
    if not math.isfinite(k) or k < 0.0:
        raise DomainError(f"concentration must be finite and >= 0, got {k!r}")
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(rng)
    p = mu.shape[0]
    if p == 1:
        # two-point sphere: P(x = mu) = e^k / (e^k + e^-k)
        plus = rng.random(n) < 1.0 / (1.0 + math.exp(-2.0 * k))
        return np.where(plus, 1.0, -1.0)[:, None] * mu
    w = _wood_w(k, p, n, rng)
    v = rng.standard_normal((n, p))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = w[:, None] * mu + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def angle_between(u, v) -> float:
    """Angle between two directions in degrees, in [0, 180]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"u{u.shape} and v{v.shape} differ")
    c = float(np.dot(u, v)) / float(np.linalg.norm(u) * np.linalg.norm(v))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def angles_between(U, V) -> np.ndarray:
    """Row-wise :func:`angle_between` for two (m, p) arrays of nonzero vectors."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    c = np.einsum("ij,ij->i", U, V) / (np.linalg.norm(U, axis=1) * np.linalg.norm(V, axis=1))
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def two_vector_identity_check(u, v) -> tuple[float, float]:
    """Resultant length of a pair next to the cosine of half their angle.

    For two unit vectors the two numbers coincide.
    """
    R, _ = resultant([u, v])
    theta = math.radians(angle_between(u, v))
    return R, math.cos(theta / 2.0)
