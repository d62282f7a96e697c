"""Pilot construction, scenario generation and the received-signal model.

The sensing operator is the delay-expanded pilot matrix: every user
contributes max_delay+1 columns, one per candidate synchronization delay,
each a zero-padded shift of the user's base pilot.  Column (n, t) lives at
index n*(T+1)+t.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigError

PATHLOSS_INTERCEPT_DB = -128.1   # at 1 km
PATHLOSS_SLOPE_DB = 36.7         # per decade of distance


@dataclass
class ExpandedPilot:
    base: np.ndarray       # (pilot_len, n_users) complex
    expanded: np.ndarray   # (L, (T+1)*n_users) complex
    aspect: float          # L / ((T+1)*n_users)

    @property
    def frame_len(self):
        return self.expanded.shape[0]

    @property
    def expanded_dim(self):
        return self.expanded.shape[1]


@dataclass
class Scenario:
    activity: np.ndarray    # (N,) bool
    delays: np.ndarray      # (N,) int, -1 for inactive users
    distances: np.ndarray   # (N,) km
    pathloss: np.ndarray    # (N,) linear power gain
    channels: np.ndarray    # (N, M) complex, per-user antenna vectors
    indicator: np.ndarray   # (N, T+1) bool, joint activity/delay flags
    H: np.ndarray           # ((T+1)N, M) expanded effective channel matrix

    @property
    def active_set(self):
        return np.flatnonzero(self.activity)


@dataclass
class ReceivedSignal:
    Y: np.ndarray           # (L, M) normalized received pilot signal
    noise_var_eff: float    # per-entry variance of the normalized noise


def gen_pilots(config, rng):
    """Draw the base pilot matrix, i.i.d. complex Gaussian entries of variance 1/pilot_len."""
    if config.pilot_len < 1 or config.n_users < 1:
        raise ConfigError("pilot dimensions must be positive")
    return rngmod.complex_normal(rng, (config.pilot_len, config.n_users),
                                 var=1.0 / config.pilot_len)


def expand_pilots(base, max_delay):
    """Build the delay-expanded pilot matrix from the base pilots.

    Column (n, t) is the base column n shifted down by t rows, padded with
    t leading and max_delay - t trailing zeros.
    """
    if max_delay < 0:
        raise ConfigError("max_delay must be >= 0")
    pilot_len, n_users = base.shape
    n_shifts = max_delay + 1
    frame_len = pilot_len + max_delay
    expanded = np.zeros((frame_len, n_shifts * n_users), dtype=complex)
    for t in range(n_shifts):
        expanded[t:t + pilot_len, t::n_shifts] = base
    return ExpandedPilot(base=base, expanded=expanded,
                         aspect=frame_len / (n_shifts * n_users))


def pathloss_db(distance_km):
    return PATHLOSS_INTERCEPT_DB - PATHLOSS_SLOPE_DB * np.log10(distance_km)


def draw_distances(config, rng):
    """Distances uniform over the annulus area between the two cell radii."""
    u = rng.random(config.n_users)
    r_min2, r_max2 = config.cell_radius_min ** 2, config.cell_radius_max ** 2
    return np.sqrt(u * (r_max2 - r_min2) + r_min2)


def gen_scenario(config, rng, distances=None):
    """Draw activity, delays, positions and channels; assemble H.

    Active users are a uniform without-replacement sample of size n_active
    (independent Bernoulli(n_active/n_users) when bernoulli_activity is
    set).  Pass `distances` to reuse frozen user positions.
    """
    N, M, T = config.n_users, config.n_antennas, config.max_delay
    if config.n_active > N:
        raise ConfigError("n_active cannot exceed n_users")

    activity = np.zeros(N, dtype=bool)
    if config.bernoulli_activity:
        activity = rng.random(N) < config.activity_rate
    else:
        activity[rng.choice(N, size=config.n_active, replace=False)] = True

    delays = np.full(N, -1, dtype=int)
    delays[activity] = rng.integers(0, T + 1, size=int(activity.sum()))

    if distances is None:
        distances = draw_distances(config, rng)
    pathloss = 10.0 ** (pathloss_db(distances) / 10.0)

    channels = rngmod.complex_normal(rng, (N, M)) * np.sqrt(pathloss)[:, None]

    indicator = np.zeros((N, T + 1), dtype=bool)
    indicator[activity, delays[activity]] = True

    H = np.zeros(((T + 1) * N, M), dtype=complex)
    rows = np.flatnonzero(activity) * (T + 1) + delays[activity]
    H[rows] = channels[activity]

    return Scenario(activity=activity, delays=delays, distances=distances,
                    pathloss=pathloss, channels=channels, indicator=indicator, H=H)


def synthesize(scenario, pilots, config, rng):
    """Normalized received pilot signal Y = P H + noise.

    The noise is the physical receiver noise divided by sqrt(tx_power * L),
    i.e. per-entry variance noise_power / (tx_power * L).
    """
    noise_var = config.noise_var_eff
    L, M = pilots.frame_len, config.n_antennas
    noise = rngmod.complex_normal(rng, (L, M), var=noise_var) if noise_var > 0 else 0.0
    Y = pilots.expanded @ scenario.H + noise
    return ReceivedSignal(Y=Y, noise_var_eff=noise_var)


# Fixture format for frozen pilots / scenarios ---------------------------
#
# Binary, little-endian.  Header: magic "ARA1", uint32 ndim, uint32 dims.
# Payload: column-major interleaved real/imag float64 pairs.

FIXTURE_MAGIC = b"ARA1"


def save_fixture(path, array):
    """Write a complex array in the frozen-fixture wire format."""
    arr = np.asarray(array, dtype=complex)
    with open(path, "wb") as fh:
        fh.write(FIXTURE_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        flat = arr.flatten(order="F")
        inter = np.empty(2 * flat.size, dtype="<f8")
        inter[0::2] = flat.real
        inter[1::2] = flat.imag
        fh.write(inter.tobytes())


def load_fixture(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIXTURE_MAGIC:
            raise ValueError(f"not a fixture file (magic {magic!r})")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        inter = np.frombuffer(fh.read(), dtype="<f8")
    flat = inter[0::2] + 1j * inter[1::2]
    return flat.reshape(shape, order="F")
