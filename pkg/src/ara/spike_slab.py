"""Spike-and-slab sections: scalar-channel posteriors and decision rules.

Each user owns one section of max_delay+1 coefficients of which at most one
is nonzero (active at one particular delay).  Under an AWGN pseudo-
observation r = h + sqrt(tau2) z the posterior factorizes per section into
a reweighted mixture of a point mass at zero and per-delay Gaussian slabs.

All exponentials are evaluated in the log domain: the exponents scale with
|r|^2 / tau2^2 and overflow the naive form at realistic SNR.
"""

import numpy as np

from .errors import NumericError

EPS_CLIP = 1e-8  # keeps prior ratios away from {0, 1} so evidence ratios stay finite


def prior_init(n_active, n_users, max_delay):
    """Flat initial sparsity ratios: activity rate split over the delay candidates."""
    if n_active > n_users:
        raise ValueError("n_active cannot exceed n_users")
    lam = n_active / n_users
    omega = np.full((n_users, max_delay + 1), lam / (max_delay + 1))
    return clip_omega(omega)


def clip_omega(omega):
    """Clip ratios into [EPS_CLIP, 1-EPS_CLIP] and keep each row's sum <= 1-EPS_CLIP."""
    omega = np.clip(omega, EPS_CLIP, 1.0 - EPS_CLIP)
    row = omega.sum(axis=-1, keepdims=True)
    scale = np.where(row > 1.0 - EPS_CLIP, (1.0 - EPS_CLIP) / row, 1.0)
    return np.clip(omega * scale, EPS_CLIP, 1.0 - EPS_CLIP)


class PosteriorStats:
    """Per-entry posterior quantities of the sectioned spike-and-slab model.

    pi:        posterior sparsity ratios
    mean:      posterior means (pi * slab_mean)
    var:       posterior variances
    slab_mean: conditional mean given the entry is the active one
    slab_var:  conditional variance given the entry is the active one
    """

    __slots__ = ("pi", "mean", "var", "slab_mean", "slab_var")

    def __init__(self, pi, mean, var, slab_mean, slab_var):
        self.pi = pi
        self.mean = mean
        self.var = var
        self.slab_mean = slab_mean
        self.slab_var = slab_var


def posterior_stats(r, tau2, omega, beta):
    """Posterior statistics for pseudo-observations r = h + sqrt(tau2) z.

    Parameters
    ----------
    r : (N, T+1, M) complex pseudo-observations (sections along axis 1)
    tau2 : scalar or (M,) observation noise variance, > 0
    omega : (N, T+1) prior sparsity ratios
    beta : (N,) slab power per user

    Returns PosteriorStats of matching (N, T+1, M) shape.
    """
    r = np.asarray(r)
    if r.ndim != 3:
        raise ValueError("r must have shape (n_users, max_delay+1, n_antennas)")
    tau2 = np.asarray(tau2, dtype=float)
    if np.any(tau2 <= 0):
        raise NumericError("tau2 must be positive in posterior_stats")
    tau2 = np.broadcast_to(tau2, (r.shape[2],))[None, None, :]
    omega = clip_omega(np.asarray(omega, dtype=float))[:, :, None]
    beta = np.asarray(beta, dtype=float)[:, None, None]

    slab_mean = beta * r / (tau2 + beta)
    slab_var = np.broadcast_to(tau2 * beta / (tau2 + beta), r.shape)

    # Evidence exponents a_t = beta |r_t|^2 / (tau2 (beta + tau2)); the
    # mixture weights are softmax over [spike, slabs] in the log domain.
    expo = beta * (r.real**2 + r.imag**2) / (tau2 * (beta + tau2))
    log_slab = np.log(omega) + expo
    log_spike = np.log1p(-omega.sum(axis=1)) + np.log1p(beta[:, 0, :] / tau2[:, 0, :])
    top = np.maximum(log_slab.max(axis=1), log_spike)
    norm = np.exp(log_spike - top) + np.exp(log_slab - top[:, None, :]).sum(axis=1)
    pi = np.exp(log_slab - top[:, None, :]) / norm[:, None, :]

    mean = pi * slab_mean
    var = pi * (np.abs(slab_mean) ** 2 + slab_var) - np.abs(mean) ** 2
    return PosteriorStats(pi=pi, mean=mean, var=np.maximum(var, 0.0),
                          slab_mean=slab_mean, slab_var=slab_var)


def posterior_stats_section(r_sec, tau2, omega_row, beta_n):
    """Single-section convenience wrapper: r_sec is a (T+1,) vector."""
    stats = posterior_stats(np.asarray(r_sec)[None, :, None], tau2,
                            np.asarray(omega_row)[None, :], np.atleast_1d(beta_n))
    return PosteriorStats(*(getattr(stats, f)[0, :, 0] for f in PosteriorStats.__slots__))


def common_sparsity_update(pi):
    """Share the support across antennas: average posterior ratios over the antenna axis."""
    pi = np.asarray(pi)
    if pi.ndim != 3 or pi.shape[2] < 1:
        raise ValueError("pi must have shape (n_users, max_delay+1, n_antennas)")
    return clip_omega(pi.mean(axis=2))


def hard_decision(omega, threshold):
    """Threshold summed ratios into an active set; delay = argmax ratio (smallest wins ties).

    Returns (active_users, delays) with delays aligned to active_users.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    omega = np.asarray(omega)
    active = np.flatnonzero(omega.sum(axis=1) >= threshold)
    delays = omega[active].argmax(axis=1)
    return active, delays
