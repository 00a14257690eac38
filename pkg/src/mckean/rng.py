"""Counter-based noise streams for particle simulations.

All Brownian increments are drawn from the "philox-ndtri/v1" scheme: a
Philox4x64 counter generator keyed from ``(seed, *tags)`` produces uniforms
in a fixed ``(particle, step, coordinate)`` layout which are mapped to
normals through the inverse CDF.  Element ``[i, k, j]`` of the returned
array is a pure function of the key and its position, so streams are
reproducible, independent across tags and safe to re-derive per particle
block in parallel workers.
"""

import numpy as np
from scipy.special import ndtri

NOISE_SCHEME = "philox-ndtri/v1"

_TINY = np.nextafter(0.0, 1.0)


def stream_key(seed, *tags):
    """128-bit Philox key derived deterministically from a seed and tags."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(t) for t in tags))
    return ss.generate_state(2, np.uint64)


def standard_normals(seed, shape, *tags):
    """Standard normal array in the fixed layout of the named scheme."""
    gen = np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))
    u = gen.random(shape)
    # random() lands in [0, 1); shield ndtri from an exact zero.
    return ndtri(np.maximum(u, _TINY))


def brownian_increments(seed, n_particles, n_steps, dim, dt, *tags):
    """Increments dB ~ N(0, dt I) of shape (n_particles, n_steps, dim)."""
    z = standard_normals(seed, (n_particles, n_steps, dim), *tags)
    return np.sqrt(dt) * z
