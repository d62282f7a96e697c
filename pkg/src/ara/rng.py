"""Counter-based random streams with per-purpose substreams.

All data generation randomness flows through here.  Each purpose (pilots,
scenario, noise, spectral probes) gets an independent Philox substream
derived from the master seed, so components are reproducible in isolation
and trial i's draws never depend on how many trials ran before it.
"""

import numpy as np

# Substream purposes; values are part of the reproducibility contract.
PILOTS = 0
SCENARIO = 1
NOISE = 2
PROBES = 3


def substream(seed, *path):
    """Generator for (seed, *path); identical arguments give identical streams.

    `path` is a tuple of small non-negative ints, typically
    (purpose,) or (purpose, trial_index).
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def complex_normal(rng, shape, var=1.0):
    """Circularly-symmetric complex Gaussian draws with per-entry variance `var`."""
    scale = np.sqrt(var / 2.0)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * scale
