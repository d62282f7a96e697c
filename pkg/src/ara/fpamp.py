"""Memory message-passing receiver driven by rectangular free cumulants.

Instead of an LMMSE stage, this receiver corrects plain matched-filter
iterations with memory (Onsager) terms whose coefficients come from the
free cumulants of the pilot matrix, and runs denoisers that use the whole
iterate history.  A deterministic state-evolution recursion tracks, per
antenna, the gain vector `mu` of the true signal inside the h-iterates,
the covariance `noise_cov` of their effective noise, and the covariance
`meas_cov` of the measurement-domain iterates.

Naming of the tracked matrices:
    df_mat    average derivatives of the signal denoiser w.r.t. each iterate
    dg_mat    average derivatives of the measurement denoiser
    sig_corr  correlations of the denoised signal iterates (plus signal power)
    obs_corr  correlations of the measurement-domain iterates
All four carry one leading antenna axis inside the receiver loop.
"""

import numpy as np

from . import freeprob, spike_slab
from .errors import NumericError
from .results import ReceiverOutput

SOLVE_JITTER = 1e-10   # relative jitter on Hermitian solve failure, one retry
# Largest negative eigenvalue (relative to trace) clipped to zero by the PSD
# repair; beyond it the state is declared broken.  Finite-size estimation
# noise at a few hundred coordinates produces dips around 1e-4 of the trace,
# so the gate sits well above rounding error but far below blow-up scale.
PSD_TOL = 1e-2
SIGNAL_MARGIN = 1e-3   # tracked signal power stays this far above iterate energy
DEAD_OUTPUT = 1e-18    # measurement-denoiser energy (vs y) treated as converged
# The tracked covariances are empirical averages with O(1/sqrt(dim)) entry
# noise; conditioning solves against them get a ridge at that statistical
# scale so near-singular blocks cannot amplify estimation noise without
# bound.  `dim` is the number of samples behind the matrix (L or (T+1)N).
RIDGE_SCALE = 0.05
ABORT_FACTOR = 1e2     # measurement-residual growth treated as divergence


def _solve_psd(mats, rhs, n_samples=None):
    """Batched Hermitian solve (vector right-hand sides) with one jittered retry.

    When `n_samples` is given the system gets a ridge at the sampling-noise
    scale of an empirical covariance built from that many samples.
    """
    mats = np.asarray(mats)
    rhs = np.asarray(rhs)
    k = mats.shape[-1]
    if n_samples:
        tr = np.trace(mats, axis1=-2, axis2=-1).real
        ridge = np.asarray(RIDGE_SCALE / np.sqrt(n_samples) * tr / k)
        mats = mats + ridge[..., None, None] * np.eye(k)
    try:
        return np.linalg.solve(mats, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        tr = np.trace(mats, axis1=-2, axis2=-1).real
        jit = np.asarray(SOLVE_JITTER * np.maximum(tr, 1.0) / k)
        try:
            return np.linalg.solve(mats + jit[..., None, None] * np.eye(k),
                                    rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular conditioning block despite jitter") from exc


def _psd_repair(mats):
    """Hermitize and clip negative eigenvalues to zero.

    Empirical averaging plus the cumulant-weighted recursions leave dips on
    the order of the finite-size estimation noise; runs whose state truly
    degenerates are caught by the observable-consistency monitors in the
    main loop, not here.
    """
    mats = 0.5 * (mats + np.conj(np.swapaxes(mats, -1, -2)))
    evals, vecs = np.linalg.eigh(mats)
    if np.all(evals >= 0):
        return mats
    evals = np.maximum(evals, 0.0)
    return vecs @ (evals[..., None] * np.conj(np.swapaxes(vecs, -1, -2)))


def _row_series(row0, prod, kappa, j_max, counter=None, truncate=False):
    """sum_{j=0}^{j_max} kappa[j] * row0 @ prod^j, evaluated row-by-row.

    row0: (..., k) row vectors, prod: (..., k, k); kappa[j] holds the
    cumulant of order 2(j+1).
    """
    row = row0
    acc = kappa[0] * row
    j_max = min(j_max, len(kappa) - 1)  # absent high-order cumulants are zero
    batch = int(np.prod(row0.shape[:-1], dtype=int))
    min_term = np.linalg.norm(kappa[0] * row)
    for j in range(1, j_max + 1):
        row = np.einsum("...j,...jk->...k", row, prod)
        term = kappa[j] * row
        term_norm = np.linalg.norm(term)
        if truncate and j >= 2 and term_norm > min_term:
            break  # smallest-term truncation of a boundary-divergent series
        min_term = min(min_term, term_norm) if term_norm > 0 else min_term
        acc = acc + term
        if counter is not None:
            counter.cmul(batch * row0.shape[-1] ** 2)
    return acc


def _mixed_moment_sum(base, mid, left, kappa, j_max, counter=None, truncate=False):
    """sum_j kappa[j] * Xi_j for the state-covariance recursions.

    Xi_0 = base and for j >= 1
        Xi_j = sum_{k=0}^{j}   left^k base (left^H)^{j-k}
             + sum_{k=0}^{j-1} left^k mid  (left^H)^{j-1-k},
    evaluated with two coupled two-matmul recurrences per order.
    """
    lh = np.conj(np.swapaxes(left, -1, -2))
    acc = kappa[0] * base
    r_cur = base          # sum_k left^k base left^H^(j-k)
    g_cur = base          # base (left^H)^j
    s_cur = None          # sum_k left^k mid left^H^(j-1-k)
    h_cur = mid           # mid (left^H)^(j-1)
    k = base.shape[-1]
    j_max = min(j_max, len(kappa) - 1)
    batch = int(np.prod(base.shape[:-2], dtype=int))
    min_term = np.linalg.norm(kappa[0] * base)
    for j in range(1, j_max + 1):
        g_cur = g_cur @ lh
        r_cur = left @ r_cur + g_cur
        if j == 1:
            s_cur = mid
        else:
            h_cur = h_cur @ lh
            s_cur = left @ s_cur + h_cur
        term = kappa[j] * (r_cur + s_cur)
        term_norm = np.linalg.norm(term)
        if truncate and j >= 2 and term_norm > min_term:
            break  # smallest-term truncation of a boundary-divergent series
        min_term = min(min_term, term_norm) if term_norm > 0 else min_term
        acc = acc + term
        if counter is not None:
            counter.cmul(batch * 4 * k**3)
    return acc


def _pad(mat, extra=1):
    """Zero-pad a (..., k, k) stack to (..., k+extra, k+extra) (top-left block)."""
    k = mat.shape[-1]
    out = np.zeros(mat.shape[:-2] + (k + extra, k + extra), dtype=mat.dtype)
    out[..., :k, :k] = mat
    return out


def prior_signal_power(beta, activity_rate, n_sections):
    """Ensemble per-coordinate second moment of the expanded channel vector."""
    return activity_rate * float(np.mean(beta)) / n_sections


def estimate_signal_power(Y, noise_var_eff, kappa2):
    """Data-driven per-coordinate signal power from the received energy.

    The received per-entry energy satisfies E|y|^2 = kappa2 * E[H^2] +
    noise_var_eff, so this matches the realized active-set power, where the
    ensemble prior can be far off under heavy-tailed path loss.
    """
    energy = float(np.mean(np.abs(Y) ** 2))
    return max((energy - noise_var_eff) / kappa2, 1e-300)


def onsager_coeffs(df_mat, dg_mat, kappa, aspect, i):
    """Memory-correction coefficient rows for iteration i.

    df_mat, dg_mat: (i+1, i+1) derivative-average matrices.  Returns
    (alpha, gamma): alpha has length i (weights on past measurement-domain
    iterates), gamma length i-1 (weights on past denoised signals).
    """
    kap = np.asarray(kappa, dtype=float)
    alpha_row = _row_series(df_mat[-1], dg_mat @ df_mat, kap, i + 1)
    gamma_row = aspect * _row_series(dg_mat[-1], df_mat @ dg_mat, kap, i)
    return alpha_row[1:i + 1], gamma_row[1:i]


def empirical_correlations(ht_hist, s_hist, signal_power):
    """Correlation matrices of the iterate histories.

    ht_hist: (i, n) denoised-signal iterates, s_hist: (j, L) measurement
    iterates; signal_power is the prior per-coordinate second moment.
    Returns (sig_corr (i+1, i+1), obs_corr (j+1, j+1)), Hermitian.
    """
    ht = np.asarray(ht_hist)
    s = np.asarray(s_hist)
    i, n = ht.shape if ht.size else (0, 1)
    sig = np.zeros((i + 1, i + 1), dtype=complex)
    sig[0, 0] = signal_power
    if i:
        gram = np.conj(ht) @ ht.T / n
        sig[1:, 1:] = gram
        # MMSE orthogonality: the signal/estimate correlation equals the
        # estimate energy, so the first row reuses the diagonal.
        sig[0, 1:] = np.diag(gram).real
        sig[1:, 0] = np.diag(gram).real
    j, L = s.shape
    obs = np.zeros((j + 1, j + 1), dtype=complex)
    obs[1:, 1:] = np.conj(s) @ s.T / L
    herm = lambda x: 0.5 * (x + np.conj(x.T))
    return herm(sig), herm(obs)


def sigma_evolve(df_mat, dg_mat, sig_corr, obs_corr, kappa, counter=None,
                 truncate=False):
    """Covariance of [signal-domain projection, measurement iterates]."""
    kap = np.asarray(kappa, dtype=float)
    size = df_mat.shape[-1]
    left = df_mat @ dg_mat
    mid = df_mat @ obs_corr @ np.conj(np.swapaxes(df_mat, -1, -2))
    if counter is not None:
        counter.cmul(int(np.prod(df_mat.shape[:-2], dtype=int)) * 3 * size**3)
    return _mixed_moment_sum(sig_corr, mid, left, kap, 2 * size - 1, counter,
                             truncate)


def omega_evolve(df_pad, dg_mat, sig_pad, obs_corr, kappa, aspect, counter=None,
                 truncate=False):
    """Effective-noise covariance of the h-iterates (padded recursion).

    Inputs are (i+2)-sized: df_pad / sig_pad are the zero-padded current
    matrices (their unknown last rows do not enter).  Returns the
    (i+1)-sized covariance (trailing principal block of the padded one).
    """
    kap = np.asarray(kappa, dtype=float)
    size = dg_mat.shape[-1]
    left = dg_mat @ df_pad
    mid = dg_mat @ sig_pad @ np.conj(np.swapaxes(dg_mat, -1, -2))
    if counter is not None:
        counter.cmul(int(np.prod(dg_mat.shape[:-2], dtype=int)) * 3 * size**3)
    full = aspect * _mixed_moment_sum(obs_corr, mid, left, kap, 2 * size - 2,
                                      counter, truncate)
    return full[..., 1:, 1:]


def mu_evolve(df_pad, dg_mat, kappa, aspect, counter=None, truncate=False):
    """Next signal-gain entry: corner of the cumulant-weighted gain series."""
    kap = np.asarray(kappa, dtype=float)
    size = dg_mat.shape[-1]
    row = _row_series(dg_mat[..., -1, :], df_pad @ dg_mat, kap, size - 1,
                      counter, truncate)
    return aspect * row[..., 0]


def se_update(df_mat, dg_mat, sig_corr, obs_corr, kappa, aspect, i):
    """One full state-evolution step at iteration i (single antenna).

    df_mat/sig_corr are (i+1)-sized, dg_mat/obs_corr (i+2)-sized (the
    latter two already include the newest measurement-denoiser row).
    Returns (meas_cov (i+1), noise_cov (i+1), mu_next scalar).
    """
    kap = np.asarray(kappa, dtype=float)
    meas = sigma_evolve(df_mat, dg_mat[:i + 1, :i + 1], sig_corr,
                        obs_corr[:i + 1, :i + 1], kap)
    noise = omega_evolve(_pad(df_mat), dg_mat, _pad(sig_corr), obs_corr, kap, aspect)
    mu_next = mu_evolve(_pad(df_mat), dg_mat, kap, aspect)
    return meas, noise, complex(mu_next)


def f_denoiser(h_hist, mu, noise_cov, omega, beta, counter=None):
    """History-MMSE signal denoiser for one antenna.

    h_hist: (i, n) iterates, mu: (i,) gains, noise_cov: (i, i).  Combines
    the history into a per-coordinate sufficient statistic, applies the
    sectioned spike-and-slab posterior, and returns (h_tilde (n,),
    pi (N, T+1), deriv_row (i,)) where deriv_row holds the average
    derivative of the output w.r.t. each input iterate.
    """
    h_hist = np.atleast_2d(np.asarray(h_hist))
    i, n = h_hist.shape
    w = _solve_psd(np.asarray(noise_cov, dtype=complex).reshape(i, i),
                   np.asarray(mu, dtype=complex).reshape(i))
    quad = np.vdot(np.asarray(mu).reshape(i), w).real   # mu^H Omega^-1 mu
    stat = np.einsum("j,jn->n", np.conj(w), h_hist)     # per-coordinate statistic
    n_users, n_sec = omega.shape
    beta = np.asarray(beta, dtype=float)
    f_gain = 1.0 / beta + quad                          # per-user precision
    if counter is not None:
        counter.cmul(i * n + i**3 // 3 + i**2)
        counter.rmul(8 * n)

    stat_sec = stat.reshape(n_users, n_sec)
    f_col = f_gain[:, None]
    omega_c = spike_slab.clip_omega(omega)
    log_slab = np.log(omega_c) - np.log(beta[:, None] * f_col) \
        + (stat_sec.real**2 + stat_sec.imag**2) / f_col
    log_spike = np.log1p(-omega_c.sum(axis=1))
    top = np.maximum(log_slab.max(axis=1), log_spike)
    norm = np.exp(log_spike - top) + np.exp(log_slab - top[:, None]).sum(axis=1)
    pi = np.exp(log_slab - top[:, None]) / norm[:, None]

    slab_mean = stat_sec / f_col
    h_tilde = (pi * slab_mean).reshape(n)
    # d h~ / d h^(k) = factor * (Omega^-1 mu)_k^* with the per-coordinate
    # factor below (Wirtinger convention, slab evidence in |stat|^2 form).
    factor = pi / f_col * ((1.0 - pi) * (stat_sec.real**2 + stat_sec.imag**2) / f_col + 1.0)
    deriv_row = factor.mean() * np.conj(w)
    return h_tilde, pi, deriv_row


def g_denoiser(r_hist, y, meas_cov, noise_var_eff, kappa2, signal_power, counter=None):
    """Measurement-domain denoiser: conditional-mean difference of the
    signal-domain projection given (history, y) versus history alone.

    Returns (s_next (L,), dg scalar, dr (i,)) with dg the average
    derivative w.r.t. the projection (through the y slot) and dr the
    derivatives w.r.t. each r-iterate.
    """
    r_hist = np.atleast_2d(np.asarray(r_hist)) if len(r_hist) else np.zeros((0, len(y)))
    i = r_hist.shape[0]
    if i == 0:
        return np.asarray(y, dtype=complex).copy(), 1.0, np.zeros(0, dtype=complex)

    meas_cov = np.asarray(meas_cov, dtype=complex).reshape(i + 1, i + 1)
    corner = kappa2 * signal_power + noise_var_eff
    full = np.zeros((i + 2, i + 2), dtype=complex)
    full[:i + 1, :i + 1] = meas_cov
    full[:i + 1, i + 1] = meas_cov[:, 0]
    full[i + 1, :i + 1] = np.conj(meas_cov[:, 0])
    full[i + 1, i + 1] = corner

    a = np.conj(_solve_psd(full[1:, 1:], full[1:, 0]))        # weights on [r..., y]
    b = np.conj(_solve_psd(meas_cov[1:, 1:], meas_cov[1:, 0]))  # weights on [r...]
    s_next = np.einsum("j,jl->l", a[:i] - b, r_hist) + a[i] * np.asarray(y)
    if counter is not None:
        counter.cmul((2 * i + 1) * len(y) + 2 * (i**3 // 3 + i**2))
    return s_next, complex(a[i]), a[:i] - b


def _stack_dg(rows, size, n_ant):
    """Assemble the (M, size, size) measurement-derivative matrix from rows."""
    out = np.zeros((n_ant, size, size), dtype=complex)
    for j, row in enumerate(rows[:size - 1], start=1):
        out[:, j, :row.shape[1]] = row
    return out


def _stack_df(rows, size, n_ant):
    """Assemble the (M, size, size) signal-derivative matrix (first col zero)."""
    out = np.zeros((n_ant, size, size), dtype=complex)
    for j, row in enumerate(rows[:size - 1], start=1):
        out[:, j, 1:1 + row.shape[1]] = row
    return out


def run_fpamp(Y, pilots, config, beta, profile=None, counter=None,
              keep_history=False, trace=None, signal_power=None):
    """Full receiver: joint activity/delay detection and channel estimation.

    `profile` is the precomputed SpectralProfile of the expanded pilots
    (estimated here when omitted).  `signal_power` overrides the
    received-energy estimate of the per-coordinate channel power (on the
    normalized scale).  `trace`, when a list, receives one dict per
    iteration and antenna with the tracked state quantities.

    The run has two phases sharing one iteration budget.  The memory phase
    performs the full cumulant-driven updates (new matched-filter iterate,
    history denoiser, Onsager-corrected measurement update, state-evolution
    step); it ends when its tracked model either converges or runs out of
    extractable measurement information, which at small dimensions happens
    after a handful of rounds because the empirical covariances carry
    O(1/sqrt(L)) noise.  The polish phase then continues from the current
    estimate with residual matched-filter rounds (single-memory correction,
    same sectioned posterior, same cross-antenna sparsity sharing) until
    the estimate stops moving; these rounds re-measure the evidence against
    y every time, which is what keeps sharpening weak-user detection.
    """
    from . import rng as rngmod

    P = pilots.expanded
    L, n = P.shape
    N, M = config.n_users, config.n_antennas
    n_sec = config.max_delay + 1
    aspect = pilots.aspect

    k_max = 2 * config.max_iters + 4
    if profile is None:
        profile = freeprob.spectral_profile(
            P, k_max, rng=rngmod.substream(config.seed, rngmod.PROBES))
    kap = np.asarray(profile.cumulants, dtype=float)
    if len(kap) < k_max:
        kap = np.concatenate([kap, np.zeros(k_max - len(kap))])

    scale = float(np.mean(beta))
    beta_n = np.asarray(beta, dtype=float) / scale
    Yn = np.asarray(Y, dtype=complex) / np.sqrt(scale)
    nv = config.noise_var_eff / scale
    if signal_power is None:
        signal_power = estimate_signal_power(Yn, nv, kap[0])

    s_hist = [Yn.copy()]                      # measurement-domain iterates (L, M)
    h_hist = [P.conj().T @ Yn]                # matched-filter iterates (n, M)
    ht_hist = []                              # denoised signal iterates (n, M)
    r_hist = []                               # measurement-domain outputs (L, M)
    f_rows, g_rows = [], [np.ones((M, 1), dtype=complex)]

    mu = np.full((M, 1), aspect * kap[0], dtype=complex)
    noise_cov = (kap[0] * np.einsum("lm,lm->m", np.conj(Yn), Yn).real / n
                 + aspect * kap[1] * signal_power).reshape(M, 1, 1).astype(complex)
    meas_cov = np.full((M, 1, 1), kap[0] * signal_power, dtype=complex)

    omega = spike_slab.prior_init(config.n_active, N, config.max_delay)
    pi = None
    h_tilde = None
    ht_prev = None
    diagnostics = []
    history = {"h": [], "ht": [], "mu": [], "noise_cov": [],
               "meas_cov": []} if keep_history else None
    best = {"residual": np.inf, "ht": None, "pi": None, "iteration": 0}
    mass_cap = 3.0 * max(config.n_active, 1)
    diverged = False
    iteration = 0

    def record(change, phase):
        diagnostics.append({"iteration": iteration, "residual_change": change,
                            "phase": phase})
        if counter is not None:
            counter.end_iteration()
        if trace is not None:
            for m in range(M):
                trace.append({"iteration": iteration, "antenna": m,
                              "sigma_diag": np.diag(meas_cov[m]).real * scale,
                              "mu": mu[m].copy(), "residual": change})
        if keep_history:
            history["h"].append(h_hist[-1].copy())
            history["ht"].append(h_tilde.copy())
            history["mu"].append(mu.copy())
            history["noise_cov"].append(noise_cov.copy())
            history["meas_cov"].append(meas_cov.copy())

    # Memory phase -------------------------------------------------------
    while iteration < config.max_iters:
        iteration += 1
        i = len(ht_hist) + 1
        try:
            dg_mat = _stack_dg(g_rows, i + 1, M)
            df_part = _stack_df(f_rows, i + 1, M)   # last row unknown: zero, unused
            gamma_rows = aspect * _row_series(dg_mat[:, -1, :],
                                              df_part @ dg_mat, kap, i,
                                              counter, truncate=True)
            if i > 1:
                corr = np.einsum("mj,jnm->nm", gamma_rows[:, 1:i],
                                 np.array(ht_hist))
                h_hist.append(P.conj().T @ s_hist[-1] - corr)
                if counter is not None:
                    counter.cmul(M * (n * L + (i - 1) * n))
            elif counter is not None:
                counter.cmul(M * n * L)

            if pi is not None:
                omega = spike_slab.common_sparsity_update(pi)
            h_stack = np.array(h_hist)              # (i, n, M)
            w = _solve_psd(noise_cov, mu, n_samples=L)   # (M, i)
            quad = np.maximum(np.einsum("mi,mi->m", np.conj(mu), w).real, 0.0)
            stat = np.einsum("mi,inm->nm", np.conj(w), h_stack)
            f_gain = 1.0 / beta_n[:, None] + quad[None, :]      # (N, M)
            stat_sec = stat.reshape(N, n_sec, M)
            omega_c = spike_slab.clip_omega(omega)[:, :, None]
            energy = (stat_sec.real**2 + stat_sec.imag**2) / f_gain[:, None, :]
            log_slab = np.log(omega_c) \
                - np.log(beta_n[:, None, None] * f_gain[:, None, :]) + energy
            log_spike = np.log1p(-omega_c.sum(axis=1)) + np.zeros((N, M))
            top = np.maximum(log_slab.max(axis=1), log_spike)
            normz = np.exp(log_spike - top) \
                + np.exp(log_slab - top[:, None, :]).sum(axis=1)
            pi = np.exp(log_slab - top[:, None, :]) / normz[:, None, :]
            h_tilde = (pi * stat_sec / f_gain[:, None, :]).reshape(n, M)
            factor = pi / f_gain[:, None, :] * ((1.0 - pi) * energy + 1.0)
            f_rows.append(factor.mean(axis=(0, 1))[:, None] * np.conj(w))
            ht_hist.append(h_tilde)
            if counter is not None:
                counter.cmul(M * (i * n + i**3 // 3 + i**2))
                counter.rmul(M * 8 * n)
            if not np.all(np.isfinite(h_tilde)):
                raise NumericError("non-finite signal denoiser output",
                                   iteration)

            df_mat = _stack_df(f_rows, i + 1, M)
            alpha_rows = _row_series(df_mat[:, -1, :], dg_mat @ df_mat,
                                     kap, i + 1, counter, truncate=True)
            alpha = alpha_rows[:, 1:i + 1]          # (M, i)
            s_stack = np.array(s_hist)              # (i, L, M)
            r_new = P @ h_tilde - np.einsum("mj,jlm->lm", alpha, s_stack)
            r_hist.append(r_new)
            if counter is not None:
                counter.cmul(M * (n * L + i * L))

            ht_stack = np.array(ht_hist)
            # Consistency floor: the tracked signal second moment may never
            # fall below the energy of an MMSE iterate, else the implied
            # correlation with the truth exceeds one.
            q_max = float(np.max(np.mean(np.abs(ht_stack) ** 2, axis=1)))
            signal_power = max(signal_power, (1.0 + SIGNAL_MARGIN) * q_max)
            sig_corr, obs_corr = _batched_correlations(ht_stack, s_stack,
                                                       signal_power)
            meas_cov = _psd_repair(sigma_evolve(df_mat, dg_mat, sig_corr,
                                                obs_corr, kap, counter,
                                                truncate=True))

            r_stack = np.array(r_hist)              # (i, L, M)
            s_next, dg_new, dr_new, cond_var = _g_step(
                r_stack, Yn, meas_cov, nv, kap[0], signal_power, counter)
            s_energy = np.mean(np.abs(s_next) ** 2)
            dead = s_energy <= DEAD_OUTPUT * np.mean(np.abs(Yn) ** 2)
            # innovation energy above the tracked signal-projection variance
            # means the conditioning blocks are noise-dominated
            overshoot = s_energy > 2.0 * meas_cov[:, 0, 0].real.max()
            exhausted = dead or overshoot or np.any(cond_var <= 0)
            if not exhausted:
                s_hist.append(s_next)
                g_rows.append(np.concatenate([dg_new[:, None], dr_new],
                                             axis=1))
                dg_big = _stack_dg(g_rows, i + 2, M)
                df_pad = _pad(df_mat)
                mu_next = mu_evolve(df_pad, dg_big, kap, aspect, counter,
                                    truncate=True)
                mu = np.concatenate([mu, mu_next[:, None]], axis=1)
                s_stack2 = np.array(s_hist)
                _, obs_big = _batched_correlations(ht_stack, s_stack2,
                                                   signal_power)
                noise_cov = _psd_repair(omega_evolve(
                    df_pad, dg_big, _pad(sig_corr), obs_big, kap, aspect,
                    counter, truncate=True))
        except NumericError:
            if h_tilde is None:
                raise
            diagnostics.append({"iteration": iteration,
                                "residual_change": np.nan,
                                "numeric_stop": True})
            if counter is not None:
                counter.end_iteration()
            break

        mass = float(pi.sum() / M)
        residual = float(np.sum(np.abs(Yn - P @ h_tilde) ** 2))
        if mass <= mass_cap and residual <= ABORT_FACTOR * best["residual"]:
            best = {"residual": min(residual, best["residual"]),
                    "ht": h_tilde.copy(), "pi": pi.copy(),
                    "iteration": iteration}
        else:
            diagnostics.append({"iteration": iteration,
                                "residual_change": np.nan,
                                "sanity_stop": True})
            if counter is not None:
                counter.end_iteration()
            diverged = best["ht"] is None
            break

        if ht_prev is not None:
            den = np.sum(np.abs(ht_prev) ** 2)
            change = np.inf if den == 0 else float(
                np.sum(np.abs(h_tilde - ht_prev) ** 2) / den)
        else:
            change = np.inf
        ht_prev = h_tilde
        record(change, "memory")
        if change <= config.tol or exhausted:
            break

    # Polish phase ---------------------------------------------------------
    if best["ht"] is not None:
        h_tilde, pi = best["ht"], best["pi"]
        z = np.zeros((L, M), dtype=complex)
        eta = np.zeros(M)
        ht_prev = h_tilde
        while iteration < config.max_iters:
            iteration += 1
            z = Yn - P @ h_tilde + (n / L) * eta[None, :] * z
            tau2 = np.maximum(np.sum(np.abs(z) ** 2, axis=0) / L, 1e-300)
            pseudo = h_tilde + P.conj().T @ z
            omega = spike_slab.common_sparsity_update(pi)
            stats = spike_slab.posterior_stats(pseudo.reshape(N, n_sec, M),
                                               tau2, omega, beta_n)
            pi = stats.pi
            h_tilde = stats.mean.reshape(n, M)
            eta = stats.var.mean(axis=(0, 1)) / tau2
            if counter is not None:
                counter.cmul(M * 2 * n * L)
                counter.rmul(M * (13 * n + 2 * L))

            mass = float(pi.sum() / M)
            residual = float(np.sum(np.abs(Yn - P @ h_tilde) ** 2))
            sane = np.all(np.isfinite(h_tilde)) and mass <= mass_cap \
                and residual <= ABORT_FACTOR * best["residual"]
            if not sane:
                diagnostics.append({"iteration": iteration,
                                    "residual_change": np.nan,
                                    "sanity_stop": True})
                if counter is not None:
                    counter.end_iteration()
                break
            best = {"residual": min(residual, best["residual"]),
                    "ht": h_tilde.copy(), "pi": pi.copy(),
                    "iteration": iteration}
            den = np.sum(np.abs(ht_prev) ** 2)
            change = np.inf if den == 0 else float(
                np.sum(np.abs(h_tilde - ht_prev) ** 2) / den)
            ht_prev = h_tilde
            record(change, "polish")
            if change <= config.tol:
                break

    final_ht = best["ht"] if best["ht"] is not None else h_tilde
    final_pi = best["pi"] if best["pi"] is not None else pi
    omega_final = spike_slab.common_sparsity_update(final_pi)
    active, delays = spike_slab.hard_decision(omega_final, config.threshold)
    out = ReceiverOutput(H_hat=np.sqrt(scale) * final_ht,
                         omega=omega_final, active=active, delays=delays,
                         iterations=iteration, diagnostics=diagnostics,
                         diverged=diverged)
    out.best_iteration = best["iteration"]
    if keep_history:
        out.history = history
        out.scale = scale
    return out


def _batched_correlations(ht_stack, s_stack, signal_power):
    """empirical_correlations with a trailing antenna axis."""
    i = ht_stack.shape[0]
    j = s_stack.shape[0]
    M = s_stack.shape[2]
    n = ht_stack.shape[1] if i else 1
    L = s_stack.shape[1]
    sig = np.zeros((M, i + 1, i + 1), dtype=complex)
    sig[:, 0, 0] = signal_power
    if i:
        gram = np.einsum("inm,knm->mik", np.conj(ht_stack), ht_stack) / n
        sig[:, 1:, 1:] = gram
        diag = np.einsum("mii->mi", gram).real
        sig[:, 0, 1:] = diag
        sig[:, 1:, 0] = diag
    obs = np.zeros((M, j + 1, j + 1), dtype=complex)
    obs[:, 1:, 1:] = np.einsum("ilm,klm->mik", np.conj(s_stack), s_stack) / L
    herm = lambda x: 0.5 * (x + np.conj(np.swapaxes(x, -1, -2)))
    return herm(sig), herm(obs)


def _g_step(r_stack, Yn, meas_cov, noise_var_eff, kappa2, signal_power, counter=None):
    """Batched measurement denoiser across antennas.

    Also returns the tracked conditional variance of the signal projection
    given the r-history; once it reaches zero the measurement carries no
    information the model can still use, so callers should stop.
    """
    i, L, M = r_stack.shape
    corner = kappa2 * signal_power + noise_var_eff
    full = np.zeros((M, i + 2, i + 2), dtype=complex)
    full[:, :i + 1, :i + 1] = meas_cov
    full[:, :i + 1, i + 1] = meas_cov[:, :, 0]
    full[:, i + 1, :i + 1] = np.conj(meas_cov[:, :, 0])
    full[:, i + 1, i + 1] = corner
    b = np.conj(_solve_psd(meas_cov[:, 1:, 1:], meas_cov[:, 1:, 0],
                           n_samples=L))                              # (M, i)
    cond_var = meas_cov[:, 0, 0].real - np.einsum(
        "mj,mj->m", b, meas_cov[:, 1:, 0]).real
    a = np.conj(_solve_psd(full[:, 1:, 1:], full[:, 1:, 0],
                           n_samples=L))                              # (M, i+1)
    s_next = np.einsum("mj,jlm->lm", a[:, :i] - b, r_stack) + a[:, i][None, :] * Yn
    if counter is not None:
        counter.cmul(M * ((2 * i + 1) * L + 2 * (i**3 // 3 + i**2)))
    return s_next, a[:, i], a[:, :i] - b, cond_var
