"""Spectral moments of the pilot Gram matrix and rectangular free cumulants.

Moments m_{2k} are the k-th moments of the eigenvalue distribution of
P P^H (equivalently the even moments of the singular value distribution of
P).  They can be estimated matrix-free by Gaussian probing: starting from
c_0 ~ CN(0, I_L), alternately applying P^H (odd steps) and P (even steps)
gives ||c_k||^2 = c_0^H (P P^H)^k c_0, an unbiased estimate of L * m_{2k}.

Cumulants come from the moment generating series: with
M(z) = sum_k m_{2k} z^k and A(z) = z (c M(z) + 1)(M(z) + 1), where c is
the row/column aspect of P,

    kappa_2 = m_2,
    kappa_{2k} = m_{2k} - [z^k] sum_{j=1}^{k-1} kappa_{2j} A(z)^j.

The series arithmetic runs on moments normalized by m_2 (cumulants are
homogeneous: kappa_{2k} scales as m_2^k), which keeps coefficients inside
double range out to high order.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import NumericError


@dataclass
class SpectralProfile:
    moments: np.ndarray     # m_{2k}, k = 1..k_max (index k-1)
    cumulants: np.ndarray   # kappa_{2k}, same indexing
    aspect: float
    n_probes: int

    def moment(self, k):
        return self.moments[k - 1]

    def cumulant(self, k):
        """kappa_{2k}; orders beyond k_max are treated as zero."""
        return self.cumulants[k - 1] if k <= len(self.cumulants) else 0.0


DEFAULT_PROBES = 16


def eig_moments_oracle(P, k_max):
    """Dense-eigendecomposition moments, the reference for the probe estimator."""
    evals = np.linalg.eigvalsh(P @ P.conj().T)
    if not np.all(np.isfinite(evals)):
        raise NumericError("non-finite eigenvalues in moment oracle")
    powers = np.arange(1, k_max + 1)
    return np.mean(evals[None, :] ** powers[:, None], axis=1)


def probe_moments(P, k_max, n_probes, rng):
    """Matrix-free moment estimates by alternating-product Gaussian probing."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    L = P.shape[0]
    acc = np.zeros(k_max)
    for _ in range(n_probes):
        c = rngmod.complex_normal(rng, L)
        for k in range(1, k_max + 1):
            c = P.conj().T @ c if k % 2 == 1 else P @ c
            acc[k - 1] += np.linalg.norm(c) ** 2 / L
    return acc / n_probes


def _series_mul(a, b):
    """Product of truncated power series (coefficient arrays of equal length)."""
    k = len(a)
    return np.convolve(a, b)[:k]


def cumulants_from_moments(moments, aspect):
    """Rectangular free cumulants from the even moments (index k-1 holds order 2k)."""
    moments = np.asarray(moments, dtype=float)
    k_max = len(moments)
    if k_max < 1:
        raise ValueError("need at least the second moment")
    scale = moments[0]
    if scale <= 0:
        raise NumericError("second moment must be positive")
    m_norm = moments / scale ** np.arange(1, k_max + 1)

    # Series hold coefficients of z^0..z^k_max; M(z) has zero constant term.
    mz = np.zeros(k_max + 1)
    mz[1:] = m_norm
    one = np.zeros(k_max + 1)
    one[0] = 1.0
    az = np.roll(_series_mul(aspect * mz + one, mz + one), 1)  # z * (...)
    az[0] = 0.0

    kappa = np.zeros(k_max)
    kappa[0] = m_norm[0]
    a_pow = az.copy()  # A(z)^j, maintained incrementally
    correction = np.zeros(k_max + 1)
    for k in range(2, k_max + 1):
        # correction accumulates sum_{j<k} kappa_{2j} A^j lazily: when the
        # loop reaches k, powers up to k-1 have been folded in.
        correction = correction + kappa[k - 2] * a_pow
        a_pow = _series_mul(a_pow, az)
        kappa[k - 1] = m_norm[k - 1] - correction[k]
    return kappa * scale ** np.arange(1, k_max + 1)


def moments_from_cumulants(cumulants, aspect):
    """Forward moment-cumulant relation (fixed point of the same series identity).

    Used as the round-trip check on cumulants_from_moments: re-expands the
    series with the recovered cumulants and returns the implied moments.
    """
    cumulants = np.asarray(cumulants, dtype=float)
    k_max = len(cumulants)
    scale = cumulants[0]
    if scale <= 0:
        raise NumericError("kappa_2 must be positive")
    k_norm = cumulants / scale ** np.arange(1, k_max + 1)

    m_norm = np.zeros(k_max)
    one = np.zeros(k_max + 1)
    one[0] = 1.0
    for k in range(1, k_max + 1):
        mz = np.zeros(k_max + 1)
        mz[1:] = m_norm
        az = np.roll(_series_mul(aspect * mz + one, mz + one), 1)
        az[0] = 0.0
        total = np.zeros(k_max + 1)
        a_pow = one.copy()
        for j in range(1, k + 1):
            a_pow = _series_mul(a_pow, az)
            total = total + k_norm[j - 1] * a_pow
        m_norm[k - 1] = total[k]
    return m_norm * scale ** np.arange(1, k_max + 1)


def spectral_profile(P, k_max, rng=None, n_probes=DEFAULT_PROBES, method="probe"):
    """Estimate moments (probe or eig) and derive the cumulant sequence."""
    if method == "probe":
        if rng is None:
            raise ValueError("probe method needs an rng")
        moments = probe_moments(P, k_max, n_probes, rng)
    elif method == "eig":
        moments = eig_moments_oracle(P, k_max)
    else:
        raise ValueError(f"unknown moment method {method!r}")
    aspect = P.shape[0] / P.shape[1]
    return SpectralProfile(moments=moments,
                           cumulants=cumulants_from_moments(moments, aspect),
                           aspect=aspect, n_probes=n_probes if method == "probe" else 0)
