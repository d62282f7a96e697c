"""Conventional AMP receiver used as the comparison baseline.

Classic matched-filter AMP per antenna: residual with a single-memory
Onsager term, pseudo-observations denoised by the shared spike-and-slab
posterior, effective noise tracked by the residual energy, and the same
cross-antenna sparsity sharing and decision rules as the other receivers.
Tuned for i.i.d. sensing matrices; the delay-expanded pilots violate that
assumption, which is exactly the regime the other receivers address.
"""

import numpy as np

from . import spike_slab
from .errors import NumericError
from .results import ReceiverOutput

TAU_FLOOR = 1e-12
DIVERGENCE_FACTOR = 1e6   # tau2 growth beyond this times the start flags divergence


def run_amp(Y, pilots, config, beta, counter=None, keep_history=False):
    """Joint activity/delay detection and channel estimation, baseline AMP."""
    P = pilots.expanded
    L, n = P.shape
    N, M = config.n_users, config.n_antennas
    n_sec = config.max_delay + 1

    scale = float(np.mean(beta))
    beta_n = np.asarray(beta, dtype=float) / scale
    Yn = np.asarray(Y, dtype=complex) / np.sqrt(scale)

    x_hat = np.zeros((n, M), dtype=complex)
    z = np.zeros((L, M), dtype=complex)
    onsager = np.zeros(M)
    omega = spike_slab.prior_init(config.n_active, N, config.max_delay)
    pi = None
    tau2_init = None
    diagnostics = []
    history = [] if keep_history else None
    diverged = False

    iteration = 0
    while iteration < config.max_iters:
        iteration += 1
        z = Yn - P @ x_hat + onsager[None, :] * z
        tau2 = np.maximum(np.sum(np.abs(z) ** 2, axis=0) / L, TAU_FLOOR)
        if tau2_init is None:
            tau2_init = tau2.copy()
        if np.any(tau2 > DIVERGENCE_FACTOR * tau2_init):
            diverged = True
            break
        pseudo = x_hat + P.conj().T @ z
        if pi is not None:
            omega = spike_slab.common_sparsity_update(pi)
        stats = spike_slab.posterior_stats(pseudo.reshape(N, n_sec, M), tau2,
                                           omega, beta_n)
        if not np.all(np.isfinite(stats.mean)):
            raise NumericError("non-finite denoiser output", iteration)
        pi = stats.pi
        x_new = stats.mean.reshape(n, M)
        psi_bar = stats.var.mean(axis=(0, 1))
        onsager = (n / L) * (psi_bar / tau2)
        if counter is not None:
            counter.cmul(2 * n * L * M)      # the two pilot matvecs
            counter.rcmul(L * M)             # Onsager term
            counter.rmul((12 * n + 2 * L + n) * M)  # denoiser + residual energy + ratios
            counter.end_iteration()

        den = np.sum(np.abs(x_hat) ** 2)
        change = np.inf if den == 0 else float(np.sum(np.abs(x_new - x_hat) ** 2) / den)
        x_hat = x_new
        diagnostics.append({"iteration": iteration, "residual_change": change,
                            "tau2": scale * tau2.copy()})
        if keep_history:
            history.append({"x_hat": x_hat.copy(), "z": z.copy(),
                            "pseudo": pseudo.copy(), "tau2": tau2.copy(),
                            "onsager_gain": (psi_bar / tau2).copy()})
        if change <= config.tol:
            break

    if pi is None:  # diverged before the first denoise
        pi = np.broadcast_to(omega[:, :, None], (N, n_sec, M)).copy()
    omega_final = spike_slab.common_sparsity_update(pi)
    active, delays = spike_slab.hard_decision(omega_final, config.threshold)
    out = ReceiverOutput(H_hat=np.sqrt(scale) * x_hat, omega=omega_final,
                         active=active, delays=delays, iterations=iteration,
                         diagnostics=diagnostics, diverged=diverged)
    if keep_history:
        out.history = history
    return out
