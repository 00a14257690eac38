"""Fused inner loops of the space-time convolutions.

Each routine accumulates one (backward time, forward time) pair's spatial
contraction into ``out`` without materialising the kernel matrix.  Entries
beyond ``_NSIG`` standard deviations of the local Gaussian are skipped
(relative mass below 3e-18, under the double-precision floor of the sums).
Parallel iterations own disjoint output slots, so results are
deterministic.
"""

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

# the built-in work queue is always present and keeps runs environment-
# independent (TBB/OMP probing otherwise warns on older system libraries)
_numba_config.THREADING_LAYER = "workqueue"

_NSIG = 9.0


@njit(cache=True, parallel=True)
def forward_pair_contract(ys, h_x, mshift, avar, bv, av, src, wu, w_time, out):
    """out[r, m] += w_time * sum_l src[r, l] wu[l] H(u_l -> zeta_m).

    H is the engine kernel ((b(u) - b(zeta)) d/du + (a(u) - a(zeta))/2
    d2/du2 applied to the Gaussian with mean shift mshift[m] and variance
    avar[m], both frozen at zeta_m); ys is the uniform grid of both u and
    zeta.
    """
    n = ys.shape[0]
    n_src = src.shape[0]
    y0 = ys[0]
    for mcol in prange(n):
        am = avar[mcol]
        inv = 1.0 / am
        sd = np.sqrt(am)
        norm = 1.0 / np.sqrt(2.0 * np.pi * am)
        bm = bv[mcol]
        acm = av[mcol]
        zc = ys[mcol] - mshift[mcol]
        lo = int(np.floor((zc - _NSIG * sd - y0) / h_x))
        hi = int(np.ceil((zc + _NSIG * sd - y0) / h_x))
        if lo < 0:
            lo = 0
        if hi > n - 1:
            hi = n - 1
        accs = np.zeros(n_src)
        for l in range(lo, hi + 1):
            dz = zc - ys[l]
            z2 = dz * dz * inv
            pdf = np.exp(-0.5 * z2) * norm
            h = ((bv[l] - bm) * dz * inv
                 + 0.5 * (av[l] - acm) * (z2 - 1.0) * inv) * pdf
            whl = wu[l] * h
            for r in range(n_src):
                accs[r] += src[r, l] * whl
        for r in range(n_src):
            out[r, mcol] += w_time * accs[r]


@njit(cache=True, parallel=True)
def backward_pair_contract(ys, h_x, mshift, avar, bv, av, g, wu, w_time, out,
                           band_half):
    """out[l] += w_time * sum_m H(u=ys[l] -> zeta=ys[m]) wu[m] g[m]."""
    n = ys.shape[0]
    y0 = ys[0]
    cut = _NSIG * _NSIG
    for l in prange(n):
        ul = ys[l]
        bl = bv[l]
        al = av[l]
        lo = int(np.floor((ul - band_half - y0) / h_x))
        hi = int(np.ceil((ul + band_half - y0) / h_x))
        if lo < 0:
            lo = 0
        if hi > n - 1:
            hi = n - 1
        acc = 0.0
        for m in range(lo, hi + 1):
            am = avar[m]
            inv = 1.0 / am
            dz = ys[m] - ul - mshift[m]
            z2 = dz * dz * inv
            if z2 > cut:
                continue
            pdf = np.exp(-0.5 * z2) / np.sqrt(2.0 * np.pi * am)
            h = ((bl - bv[m]) * dz * inv
                 + 0.5 * (al - av[m]) * (z2 - 1.0) * inv) * pdf
            acc += wu[m] * g[m] * h
        out[l] += w_time * acc


@njit(cache=True, parallel=True)
def gauss_pair_contract(us, ys, h_x, mshift, avar, g, wu, w_time, out,
                        band_half):
    """out[i] += w_time * sum_m N(ys[m] - us[i] - mshift[m]; avar[m]) wu[m] g[m]."""
    n = ys.shape[0]
    y0 = ys[0]
    cut = _NSIG * _NSIG
    for i in prange(us.shape[0]):
        ui = us[i]
        lo = int(np.floor((ui - band_half - y0) / h_x))
        hi = int(np.ceil((ui + band_half - y0) / h_x))
        if lo < 0:
            lo = 0
        if hi > n - 1:
            hi = n - 1
        acc = 0.0
        for m in range(lo, hi + 1):
            am = avar[m]
            dz = ys[m] - ui - mshift[m]
            z2 = dz * dz / am
            if z2 > cut:
                continue
            acc += wu[m] * g[m] * np.exp(-0.5 * z2) / np.sqrt(2.0 * np.pi * am)
        out[i] += w_time * acc
