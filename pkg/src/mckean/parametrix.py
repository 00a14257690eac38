"""Parametrix series for the transition density of the linearized flow (d=1).

The density from (t, x) to (s, y) is represented as the frozen Gaussian
plus space-time convolutions with the smoothing kernel

    H(s', y'; s, y) = (b(s', y', w1(s')) - b(s', y, w1(s'))) dp~/dy'
                    + 1/2 (a(s', y', w2(s')) - a(s', y, w2(s'))) d2p~/dy'^2,

the true-minus-frozen generator gap applied to the Gaussian p~ frozen at
the forward point y (a = sigma^2); this orientation makes the plain
expansion converge to the density, and only magnitudes enter the bounds,
so :func:`kernel_H` may expose the opposite, frozen-minus-true closed
form.  Writing (f * g)(t, x; s, y) = int_t^s int f(t, x; r, u)
g(r, u; s, y) du dr, the order-k correction is p~ * H^{*k}, which this
module evaluates by time-marching Volterra iterations on a shared
space-time grid:

  * the time mesh is graded toward both interval endpoints with exponent
    2/gamma, and each inner time integral treats its integrable endpoint
    singularities (power exponents gamma/2 - 1 and k gamma/2 - 1) with a
    closed product-rule panel (:func:`singular_time_weights`);
  * spatial integrals ride the uniform grid except where a Gaussian factor
    is narrower than a few grid steps, in which case they switch to
    Gauss-Hermite nodes of the sharp factor (with a density-ratio reweight
    when the frozen point rides the integration variable);
  * the order-0 factor at the backward time collapses to a point
    evaluation of H (the frozen density is an exact delta there).

Iterated-kernel tables with a fixed forward point (s, y) are produced by
the same machinery marching in the other direction; they feed the kernel
bound checks and the two-step density composition test.
"""

from dataclasses import dataclass
import numpy as np
from scipy.special import gammaln, roots_hermite

from . import csvio
from ._kernels import (forward_pair_contract, backward_pair_contract,
                       gauss_pair_contract)
from .frozen import majorant_values

_N_GH = 40
_SHARP_FACTOR = 3.0
_TAIL_RELATIVE_CUTOFF = 1e-3


class GridResolutionError(ValueError):
    """Grid cannot resolve the requested convolutions to tolerance."""


class UnsupportedDimensionError(ValueError):
    """The series machinery is one-dimensional."""


def _require_1d(coeffs):
    if coeffs.dim != 1:
        raise UnsupportedDimensionError("parametrix machinery requires d=1")


# ---------------------------------------------------------------------------
# constants of the iterated-kernel bounds
# ---------------------------------------------------------------------------

def beta_function(a, b):
    """Beta function through the log-Gamma identity."""
    return float(np.exp(gammaln(a) + gammaln(b) - gammaln(a + b)))


def _log_beta(a, b):
    return gammaln(a) + gammaln(b) - gammaln(a + b)


@dataclass(frozen=True)
class ParametrixConstants:
    """C_k = C^k prod_{r=1}^{k-1} beta(r gamma/2, gamma/2), in log space."""

    C: float
    gamma: float
    k_max: int
    log_values: np.ndarray  # log C_k for k = 1..k_max

    @property
    def values(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_values)

    def value(self, k):
        return float(np.exp(self.log_values[k - 1]))

    def log_value(self, k):
        return float(self.log_values[k - 1])

    def to_csv(self, path):
        K = int(np.ceil(2.0 / self.gamma))
        ks = np.arange(1, self.k_max + 1)
        asym = np.array([
            constants_asymptotic(self.C, self.gamma, int(k)) if k >= K else np.nan
            for k in ks])
        csvio.write_csv(path, ["k", "value", "asymptotic"],
                        np.column_stack([ks, self.values, asym]))


def constants(C, gamma, k_max):
    """Iterated-kernel constants via the beta-function recursion."""
    if not (C > 0 and 0 < gamma <= 1 and k_max >= 1):
        raise ValueError("require C > 0, gamma in (0, 1], k_max >= 1")
    logs = np.empty(k_max)
    logs[0] = np.log(C)
    for k in range(1, k_max):
        logs[k] = np.log(C) + logs[k - 1] + _log_beta(k * gamma / 2.0, gamma / 2.0)
    return ParametrixConstants(C=C, gamma=gamma, k_max=k_max, log_values=logs)


def asymptotic_threshold(gamma):
    """Smallest order at which the closed-form envelope applies."""
    return int(np.ceil(2.0 / gamma))


def constants_asymptotic(C, gamma, k, log=False):
    """Closed-form envelope C(K) C^k 4^k / (gamma^k (k!)^(gamma/2)), k >= K.

    The anchor constant C(K) is chosen so the envelope equals the recursion
    value exactly at k = K = ceil(2/gamma); past K it replaces each beta
    factor by its bound 4/(gamma k^(gamma/2)), hence upper-bounds the
    recursion.
    """
    K = asymptotic_threshold(gamma)
    if k < K:
        raise ValueError(f"asymptotic form applies for k >= {K}, got {k}")
    log_fact_K = gammaln(K + 1.0)
    log_anchor = (K * np.log(gamma) - K * np.log(4.0) + (gamma / 2.0) * log_fact_K
                  + sum(_log_beta(l * gamma / 2.0, gamma / 2.0) for l in range(1, K)))
    log_val = (log_anchor + k * np.log(C) + k * np.log(4.0) - k * np.log(gamma)
               - (gamma / 2.0) * gammaln(k + 1.0))
    return float(log_val) if log else float(np.exp(log_val))


# ---------------------------------------------------------------------------
# grid and singular quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform spatial nodes and a doubly graded time mesh on [t, s]."""

    times: np.ndarray
    ys: np.ndarray
    h_x: float
    gamma: float

    @property
    def n_time(self):
        return len(self.times)

    @property
    def n_space(self):
        return len(self.ys)

    @classmethod
    def build(cls, t, x_center, s, lam, gamma, n_time=65, points_per_std=40,
              extent_stds=8.0):
        """Grid for densities from (t, x_center) to horizon s.

        Spatial extent x_center +- extent_stds * sqrt(lam (s - t)) with step
        sqrt(lam (s - t)) / points_per_std; the default 8 standard
        deviations keep the neglected Gaussian tail below 1e-10.  Time nodes
        cluster at both endpoints with grading exponent 2/gamma.
        """
        if not s > t:
            raise ValueError("requires s > t")
        if extent_stds < 6.8:
            raise GridResolutionError(
                f"extent {extent_stds} std devs leaves a Gaussian tail above 1e-10")
        if n_time < 9:
            raise GridResolutionError("need at least 9 time nodes")
        std = np.sqrt(lam * (s - t))
        h_x = std / points_per_std
        n_half = int(round(extent_stds * points_per_std))
        ys = x_center + h_x * np.arange(-n_half, n_half + 1)
        times = t + (s - t) * graded_unit_mesh(n_time, max(2.0 / gamma, 2.0))
        return cls(times=times, ys=ys, h_x=float(h_x), gamma=float(gamma))


def graded_unit_mesh(n, exponent):
    """n nodes on [0, 1] clustered at both endpoints with the given power."""
    u = np.linspace(0.0, 1.0, n)
    out = np.where(u <= 0.5,
                   0.5 * (2.0 * u) ** exponent,
                   1.0 - 0.5 * (2.0 * (1.0 - u)) ** exponent)
    out[0], out[-1] = 0.0, 1.0
    return out


def _power_panel_weights(x, q, w, reverse=False):
    """Product-integration weights for int G(r) x^(q-1) dx on [0, x[-1]].

    ``x`` holds increasing distances from the singular endpoint (x[0] = 0);
    G is taken piecewise linear between samples f_i x_i^(1-q).  On the
    panel touching the endpoint (whose sample is unusable) G is linearly
    extrapolated from the two nearest usable nodes, so the rule stays
    second order even when most of the power weight sits in that panel.
    ``w`` is accumulated in place; ``reverse`` maps positions back when the
    singular endpoint is the right one.
    """
    n = len(x)
    if n < 2:
        return
    idx = (lambda i: n - 1 - i) if reverse else (lambda i: i)
    i0 = np.power(x[1:], q) - np.power(x[:-1], q)
    i0 /= q
    i1 = np.power(x[1:], q + 1.0) - np.power(x[:-1], q + 1.0)
    i1 /= (q + 1.0)
    i1 -= x[:-1] * i0
    h = np.diff(x)
    if n >= 3 and x[2] - x[1] >= 0.5 * x[1]:
        # int_0^{x1} (G1 + (G2-G1)(x-x1)/(x2-x1)) x^(q-1) dx; extrapolating
        # is safe only when the slope baseline is comparable to the panel
        slope_term = x[1] ** (q + 1.0) / (q * (q + 1.0) * (x[2] - x[1]))
        w[idx(1)] += x[1] ** (1.0 - q) * (x[1] ** q / q + slope_term)
        w[idx(2)] -= x[2] ** (1.0 - q) * slope_term
    else:
        w[idx(1)] += x[1] ** (1.0 - q) * i0[0]
    for i in range(1, n - 1):
        g_lo = x[i] ** (1.0 - q)
        g_hi = x[i + 1] ** (1.0 - q)
        frac = i1[i] / h[i]
        w[idx(i)] += g_lo * (i0[i] - frac)
        w[idx(i + 1)] += g_hi * frac


def singular_time_weights(nodes, q_left=None, q_right=None):
    """Quadrature weights for integrands with integrable endpoint powers.

    Approximates int_{nodes[0]}^{nodes[-1]} f(r) dr for f behaving like
    (r - a)^(q_left - 1) near the left endpoint and (b - r)^(q_right - 1)
    near the right one (pass None for a regular endpoint).  Each singular
    half uses product integration: the power weight is integrated exactly
    against the piecewise-linear remainder, whose value at the singular
    node itself is never used (that node gets weight zero).  Regular
    stretches fall back to the trapezoid rule, which the product rule
    reproduces exactly at q = 1.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    w = np.zeros(n)
    if n < 2:
        return w
    a, b = nodes[0], nodes[-1]
    if q_left is None and q_right is None:
        d = np.diff(nodes)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return w
    if q_left is not None and q_right is not None:
        mid = n // 2
        _power_panel_weights(nodes[:mid + 1] - a, q_left, w[:mid + 1])
        _power_panel_weights((b - nodes[mid:])[::-1], q_right, w[mid:],
                             reverse=True)
        return w
    if q_left is not None:
        _power_panel_weights(nodes - a, q_left, w)
        return w
    _power_panel_weights((b - nodes)[::-1], q_right, w, reverse=True)
    return w


# ---------------------------------------------------------------------------
# precomputed coefficient tables on a grid
# ---------------------------------------------------------------------------

class _FlowTables:
    """Coefficient values and cumulative time integrals on a grid.

    cum_b[i, m] and cum_a[i, m] hold int_{t0}^{times[i]} of b and sigma^2
    frozen at ys[m], accumulated by trapezoid on the union of the grid and
    flow nodes, so that moments over [times[i], times[j]] are differences.
    """

    def __init__(self, coeffs, flow, grid):
        _require_1d(coeffs)
        self.coeffs = coeffs
        self.flow = flow
        self.grid = grid
        t0, t1 = grid.times[0], grid.times[-1]
        if not flow.covers(t0, t1):
            from .simulator import CoverageError
            raise CoverageError(
                f"flow [{flow.times[0]}, {flow.times[-1]}] does not cover "
                f"grid [{t0}, {t1}]")
        inner = flow.times[(flow.times > t0) & (flow.times < t1)]
        union = np.unique(np.concatenate([grid.times, inner]))
        self._union = union
        self._grid_idx = np.searchsorted(union, grid.times)
        w1u, w2u = flow.interp(union)
        self._w1u, self._w2u = w1u, w2u

        ys = grid.ys
        bu = self._b_values(union, ys, w1u)          # (n_union, n_x)
        au = self._a_values(union, ys, w2u)
        self.cum_b = self._cumtrapz(bu, union)[self._grid_idx]
        self.cum_a = self._cumtrapz(au, union)[self._grid_idx]
        w1g, w2g = flow.interp(grid.times)
        self.w1 = w1g
        self.w2 = w2g
        self.bvals = self._b_values(grid.times, ys, w1g)
        self.avals = self._a_values(grid.times, ys, w2g)
        self.zero_kernel = bool(
            np.all(self.bvals == self.bvals[:, :1])
            and np.all(self.avals == self.avals[:, :1]))

    def _b_values(self, times, pts, w):
        x = np.asarray(pts, dtype=float)[None, :, None]
        t = np.asarray(times, dtype=float)[:, None]
        w = np.asarray(w, dtype=float)[:, None]
        return np.broadcast_to(  # tolerate coefficients that collapse axes
            self.coeffs.b(t, np.broadcast_to(x, (len(times), len(pts), 1)), w),
            (len(times), len(pts), 1))[:, :, 0]

    def _a_values(self, times, pts, w):
        x = np.asarray(pts, dtype=float)[None, :, None]
        t = np.asarray(times, dtype=float)[:, None]
        w = np.asarray(w, dtype=float)[:, None]
        sig = self.coeffs.sigma(
            t, np.broadcast_to(x, (len(times), len(pts), 1)), w)
        return np.broadcast_to(sig, (len(times), len(pts), 1, 1))[:, :, 0, 0] ** 2

    @staticmethod
    def _cumtrapz(vals, nodes):
        out = np.zeros_like(vals)
        panels = 0.5 * (vals[1:] + vals[:-1]) * np.diff(nodes)[:, None]
        np.cumsum(panels, axis=0, out=out[1:])
        return out

    def moments_between(self, i, j):
        """(m, a) over [times[i], times[j]] frozen at every grid node."""
        return (self.cum_b[j] - self.cum_b[i], self.cum_a[j] - self.cum_a[i])

    def moments_at(self, i, j, pts):
        """(m, a) over [times[i], times[j]] at arbitrary freeze points.

        Interpolates the cumulative tables in the freeze coordinate; the
        spatial step resolves the coefficients' profile, so this matches
        the direct quadrature to O(h_x) at Holder kinks and O(h_x^2)
        elsewhere, at negligible cost.
        """
        pts = np.asarray(pts, dtype=float).ravel()
        ys = self.grid.ys
        m = np.interp(pts, ys, self.cum_b[j] - self.cum_b[i])
        a = np.interp(pts, ys, self.cum_a[j] - self.cum_a[i])
        return m, a

    def coef_at(self, i, pts):
        """(b, sigma^2) at time node i on arbitrary points."""
        pts = np.asarray(pts, dtype=float).ravel()
        t = self.grid.times[i]
        b = self.coeffs.b(t, pts[:, None], self.w1[i])[:, 0]
        a = self.coeffs.sigma(t, pts[:, None], self.w2[i])[:, 0, 0] ** 2
        return b, a


def _gauss_pdf(dz, a):
    return np.exp(-0.5 * dz * dz / a) / np.sqrt(2.0 * np.pi * a)


def _h_engine(b_back, b_fwd, a_back, a_fwd, dz, a):
    """Engine kernel: (true - frozen) generator gap applied to the Gaussian.

    dz = forward point - backward point - m, with (m, a) frozen at the
    forward point.  This is the orientation whose plain (non-alternating)
    space-time convolutions sum to the density; the pointwise
    :func:`kernel_H` exposes the opposite, frozen-minus-true form, whose
    magnitude (all the bounds use only magnitudes) is identical.
    """
    pdf = _gauss_pdf(dz, a)
    return ((b_back - b_fwd) * (dz / a) * pdf
            + 0.5 * (a_back - a_fwd) * ((dz * dz / a - 1.0) / a) * pdf)


def _h_matrix(tab, ib, jf):
    """H(times[ib], ys ; times[jf], ys): backward rows, forward columns."""
    m, a = tab.moments_between(ib, jf)
    bv, av = tab.bvals[ib], tab.avals[ib]
    dz = tab.grid.ys[None, :] - tab.grid.ys[:, None] - m[None, :]
    return _h_engine(bv[:, None], bv[None, :], av[:, None], av[None, :],
                     dz, a[None, :])


def _h_rows(tab, ib, back_pts, jf):
    """H(times[ib], back_pts ; times[jf], ys): arbitrary backward points."""
    m, a = tab.moments_between(ib, jf)
    b_pts, a_pts = tab.coef_at(ib, back_pts)
    back = np.asarray(back_pts, dtype=float).ravel()
    dz = tab.grid.ys[None, :] - back[:, None] - m[None, :]
    return _h_engine(b_pts[:, None], tab.bvals[ib][None, :],
                     a_pts[:, None], tab.avals[ib][None, :], dz, a[None, :])


def _h_cols(tab, ib, jf, fwd_pts):
    """H(times[ib], ys ; times[jf], fwd_pts): arbitrary forward points."""
    fwd = np.asarray(fwd_pts, dtype=float).ravel()
    m, a = tab.moments_at(ib, jf, fwd)
    b_pts, a_pts = tab.coef_at(ib, fwd)
    dz = fwd[None, :] - tab.grid.ys[:, None] - m[None, :]
    return _h_engine(tab.bvals[ib][:, None], b_pts[None, :],
                     tab.avals[ib][:, None], a_pts[None, :], dz, a[None, :])


def _space_weights(ys):
    w = np.full(len(ys), ys[1] - ys[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _sharp(lam, dt, h_x):
    return lam * dt < (_SHARP_FACTOR * h_x) ** 2


# ---------------------------------------------------------------------------
# forward march: density field from a fixed backward point
# ---------------------------------------------------------------------------

def _frozen_rows(tab, x, idx=None):
    """Order-0 field p~^{zeta}(t0, x; times[i], zeta) on the grid."""
    n_t = tab.grid.n_time
    rows = np.zeros((n_t, tab.grid.n_space))
    indices = range(1, n_t) if idx is None else idx
    for i in indices:
        m, a = tab.moments_between(0, i)
        rows[i] = _gauss_pdf(tab.grid.ys - x - m, a)
    return rows


def _frozen_at(tab, x, i, pts):
    """p~^{u}(t0, x; times[i], u) at arbitrary points u."""
    m, a = tab.moments_at(0, i, pts)
    return _gauss_pdf(np.asarray(pts, dtype=float).ravel() - x - m, a)


@dataclass(frozen=True)
class ParametrixField:
    """Per-order density fields p~ * H^{*k}(t, x_b; times[i], ys).

    ``per_order`` has shape (K+1, B, n_time, n_space) for B backward
    points; order 0 is the frozen Gaussian itself.  ``kernel_prefactor``,
    ``majorant_rate`` and ``frozen_prefactor`` are the constants fitted on
    probe nodes for the tail envelope.
    """

    grid: SpaceTimeGrid
    t: float
    xs: np.ndarray
    s: float
    K: int
    per_order: np.ndarray
    zero_kernel: bool
    kernel_prefactor: float
    majorant_rate: float
    frozen_prefactor: float

    def density(self, b=0):
        return self.per_order[:, b].sum(axis=0)

    def terminal_orders(self, b=0):
        return self.per_order[:, b, -1, :]

    def normalization(self, b=0):
        return float(np.trapezoid(self.density(b)[-1], self.grid.ys))

    def tail_bound_at(self, y, b=0):
        """Envelope for the truncated orders, summed until relatively small."""
        if self.zero_kernel or self.kernel_prefactor == 0.0:
            return 0.0
        c = self.majorant_rate
        dt = self.s - self.t
        gamma = self.grid.gamma
        envelope = (self.frozen_prefactor * np.sqrt(np.pi * c)
                    * majorant_values(c, dt, (y - self.xs[b]) ** 2))
        total = 0.0
        k = self.K + 1
        cons = constants(self.kernel_prefactor, gamma, self.K + 60)
        while k <= cons.k_max:
            term = cons.value(k) * dt ** (k * gamma / 2.0) * (2.0 / (k * gamma)) * envelope
            total += term
            if term < _TAIL_RELATIVE_CUTOFF * total:
                break
            k += 1
        return float(total)

    def series_at(self, y, b=0, tab=None):
        per = np.empty(self.K + 1)
        if tab is None:
            per[0] = float(np.interp(y, self.grid.ys, self.per_order[0, b, -1]))
        else:
            per[0] = float(_frozen_at(tab, self.xs[b], self.grid.n_time - 1, [y])[0])
        for k in range(1, self.K + 1):
            per[k] = float(np.interp(y, self.grid.ys, self.per_order[k, b, -1]))
        return SeriesResult(value=float(per.sum()), per_order=per,
                            tail_bound=self.tail_bound_at(y, b), K=self.K,
                            t=self.t, x=float(self.xs[b]), s=self.s, y=float(y))

    def bin_integrals(self, edges, b=0):
        dens = self.density(b)[-1]
        cum = np.concatenate([[0.0], np.cumsum(
            0.5 * (dens[1:] + dens[:-1]) * np.diff(self.grid.ys))])
        at = np.interp(edges, self.grid.ys, cum)
        return np.diff(at)


@dataclass(frozen=True)
class SeriesResult:
    """Truncated series value with per-order contributions and tail envelope."""

    value: float
    per_order: np.ndarray
    tail_bound: float
    K: int
    t: float = 0.0
    x: float = 0.0
    s: float = 1.0
    y: float = 0.0

    def __post_init__(self):
        if self.tail_bound < 0:
            raise ValueError("tail_bound must be nonnegative")

    def rows(self):
        return [[k, self.t, self.x, self.s, self.y, self.per_order[k]]
                for k in range(self.K + 1)]

    def to_csv(self, path):
        csvio.write_csv(path, ["k", "s_prime", "y_prime", "s", "y", "value"],
                        np.array(self.rows()))


def _gh_nodes(n=_N_GH):
    x, w = roots_hermite(n)
    return x, w / np.sqrt(np.pi)


def _fit_prefactors(tab, xs, lam):
    """Kernel and order-0 domination constants on probe node pairs."""
    grid = tab.grid
    n_t = grid.n_time
    c = 1.0 / (4.0 * lam)
    gamma = grid.gamma
    probe_pairs = []
    for frac_i, frac_j in ((0.0, 0.3), (0.0, 0.9), (0.2, 0.5), (0.3, 0.95),
                           (0.5, 0.8), (0.6, 0.99)):
        i = int(frac_i * (n_t - 1))
        j = int(frac_j * (n_t - 1))
        if j > i:
            probe_pairs.append((i, j))
    c_kernel = 0.0
    for i, j in probe_pairs:
        dt = grid.times[j] - grid.times[i]
        hm = np.abs(_h_matrix(tab, i, j))
        dist2 = (grid.ys[None, :] - grid.ys[:, None]) ** 2
        maj = majorant_values(c, dt, dist2) * dt ** (gamma / 2.0 - 1.0)
        ok = maj > 1e-10 * np.max(maj)
        c_kernel = max(c_kernel, float(np.max(hm[ok] / maj[ok])))
    c_frozen = 1.0
    for _, j in probe_pairs:
        dt = grid.times[j] - grid.times[0]
        for x in np.atleast_1d(xs):
            row = _frozen_at(tab, x, j, grid.ys)
            maj = majorant_values(c, dt, (grid.ys - x) ** 2)
            ok = maj > 1e-10 * np.max(maj)
            c_frozen = max(c_frozen, float(np.max(row[ok] / maj[ok])))
    return c_kernel, c, c_frozen


def density_field(coeffs, flow, t, xs, s, K=3, grid=None, n_gh=_N_GH):
    """March the per-order density fields from backward points xs to s."""
    _require_1d(coeffs)
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    lam = coeffs.profile.lam
    if grid is None:
        grid = SpaceTimeGrid.build(t, float(np.mean(xs)), s, lam,
                                   coeffs.profile.gamma_a)
    if abs(grid.times[0] - t) > 1e-12 or abs(grid.times[-1] - s) > 1e-12:
        raise GridResolutionError("grid time span must match [t, s]")
    tab = _FlowTables(coeffs, flow, grid)
    n_t, n_x = grid.n_time, grid.n_space
    B = len(xs)
    per = np.zeros((K + 1, B, n_t, n_x))
    for b in range(B):
        per[0, b] = _frozen_rows(tab, xs[b])

    if tab.zero_kernel or K == 0:
        pref = (0.0, 1.0 / (4.0 * lam), 1.0)
        if not tab.zero_kernel:
            pref = _fit_prefactors(tab, xs, lam)
        return ParametrixField(grid=grid, t=t, xs=xs, s=s, K=K, per_order=per,
                               zero_kernel=tab.zero_kernel,
                               kernel_prefactor=pref[0], majorant_rate=pref[1],
                               frozen_prefactor=pref[2])

    gh_x, gh_w = _gh_nodes(n_gh)
    wu = _space_weights(grid.ys)
    q_sing = grid.gamma / 2.0
    times = grid.times
    ys = grid.ys

    for j in range(1, n_t):
        wts = singular_time_weights(times[:j + 1], q_left=None, q_right=q_sing)
        acc = np.zeros((K, B, n_x))
        acc_flat = acc.reshape(K * B, n_x)
        for i in range(j):
            w_ij = wts[i]
            if w_ij == 0.0:
                continue
            target_sharp = _sharp(lam, times[j] - times[i], grid.h_x)
            source_sharp = i > 0 and _sharp(lam, times[i] - t, grid.h_x)
            if i == 0:
                # order-0 source is an exact point mass at the start
                for b in range(B):
                    acc[0, b] += w_ij * _h_rows(tab, 0, [xs[b]], j)[0]
            elif source_sharp:
                # order-0 source narrower than the grid: Gauss-Hermite nodes
                # of a reference Gaussian frozen at the start, reweighted
                for b in range(B):
                    mu_b, var_b = (arr[0] for arr in tab.moments_at(0, i, [xs[b]]))
                    mean = xs[b] + mu_b
                    u_q = mean + np.sqrt(2.0 * var_b) * gh_x
                    ref = _gauss_pdf(u_q - mean, var_b)
                    ratio = _frozen_at(tab, xs[b], i, u_q) / ref
                    acc[0, b] += w_ij * ((gh_w * ratio) @ _h_rows(tab, i, u_q, j))
                if K > 1:
                    m, a = tab.moments_between(i, j)
                    src = np.ascontiguousarray(
                        per[1:K, :, i, :].reshape((K - 1) * B, n_x))
                    forward_pair_contract(
                        ys, grid.h_x, m, a, tab.bvals[i], tab.avals[i],
                        src, wu, w_ij, acc_flat[B:])
            elif target_sharp:
                # kernel narrower than the grid: integrate all sources on
                # Gauss-Hermite nodes of its Gaussian factor
                m, a = tab.moments_between(i, j)
                sig = np.sqrt(a)
                u_q = (ys - m)[None, :] + np.sqrt(2.0) * sig[None, :] * gh_x[:, None]
                dz_q = ys[None, :] - u_q - m[None, :]
                b_q, a_q = tab.coef_at(i, u_q)
                b_q = b_q.reshape(u_q.shape)
                a_q = a_q.reshape(u_q.shape)
                factor = (b_q - tab.bvals[i][None, :]) * (dz_q / a[None, :]) \
                    + 0.5 * (a_q - tab.avals[i][None, :]) \
                    * ((dz_q * dz_q / a[None, :] - 1.0) / a[None, :])
                for b in range(B):
                    for k in range(1, K + 1):
                        fq = np.interp(u_q.ravel(), ys,
                                       per[k - 1, b, i]).reshape(u_q.shape)
                        acc[k - 1, b] += w_ij * (gh_w @ (factor * fq))
            else:
                m, a = tab.moments_between(i, j)
                src = np.ascontiguousarray(per[:K, :, i, :].reshape(K * B, n_x))
                forward_pair_contract(ys, grid.h_x, m, a, tab.bvals[i],
                                      tab.avals[i], src, wu, w_ij, acc_flat)
        per[1:, :, j, :] = acc

    pref = _fit_prefactors(tab, xs, lam)
    return ParametrixField(grid=grid, t=t, xs=xs, s=s, K=K, per_order=per,
                           zero_kernel=False, kernel_prefactor=pref[0],
                           majorant_rate=pref[1], frozen_prefactor=pref[2])


# ---------------------------------------------------------------------------
# public single-point operations
# ---------------------------------------------------------------------------

def kernel_H(coeffs, flow, s_prime, y_prime, s, y):
    """Smoothing kernel at a point (d = 1):

        (b(s', y, w1) - b(s', y', w1)) dp~/dy'
      + 1/2 (a(s', y, w2) - a(s', y', w2)) d2p~/dy'^2,

    the frozen-minus-true generator gap applied to the Gaussian frozen at
    the forward point y.  The series engine convolves the opposite
    orientation (see :func:`_h_engine`); all bounds use magnitudes only.
    """
    _require_1d(coeffs)
    from .frozen import frozen_moments
    if not s_prime < s:
        raise ValueError("requires s_prime < s")
    params = frozen_moments(coeffs, flow, [y], s_prime, s)
    m, a = float(params.m[0]), float(params.a[0, 0])
    w1, w2 = flow.interp(s_prime)
    pts = np.array([[y], [y_prime]])
    bvals = coeffs.b(s_prime, pts, w1)[:, 0]
    sig = coeffs.sigma(s_prime, pts, w2)[:, 0, 0]
    dz = y - y_prime - m
    pdf = float(_gauss_pdf(dz, a))
    return float((bvals[0] - bvals[1]) * (dz / a) * pdf
                 + 0.5 * (sig[0] ** 2 - sig[1] ** 2)
                 * ((dz * dz / a - 1.0) / a) * pdf)


def make_kernel_sampler(coeffs, flow):
    """Vectorised kernel evaluator carrying its coefficient context."""
    return _KernelSampler(coeffs, flow)


class _KernelSampler:
    def __init__(self, coeffs, flow):
        _require_1d(coeffs)
        self.coeffs = coeffs
        self.flow = flow

    def __call__(self, s_prime, y_prime, s, y):
        """Kernel values on the outer product of backward points y' and
        forward points y, in the orientation of :func:`kernel_H`."""
        yp = np.asarray(y_prime, dtype=float).ravel()
        yf = np.asarray(y, dtype=float).ravel()
        from .frozen import frozen_moments
        w1, w2 = self.flow.interp(s_prime)
        b_f = self.coeffs.b(s_prime, yf[:, None], w1)[:, 0]
        a_f = self.coeffs.sigma(s_prime, yf[:, None], w2)[:, 0, 0] ** 2
        b_b = self.coeffs.b(s_prime, yp[:, None], w1)[:, 0]
        a_b = self.coeffs.sigma(s_prime, yp[:, None], w2)[:, 0, 0] ** 2
        m = np.empty(len(yf))
        a = np.empty(len(yf))
        for idx, xi in enumerate(yf):
            p = frozen_moments(self.coeffs, self.flow, [xi], s_prime, s)
            m[idx] = p.m[0]
            a[idx] = p.a[0, 0]
        dz = yf[None, :] - yp[:, None] - m[None, :]
        pdf = _gauss_pdf(dz, a[None, :])
        return ((b_f[None, :] - b_b[:, None]) * (dz / a[None, :]) * pdf
                + 0.5 * (a_f[None, :] - a_b[:, None])
                * ((dz * dz / a[None, :] - 1.0) / a[None, :]) * pdf)


@dataclass(frozen=True)
class KernelTable:
    """Sampled iterated kernel H^{*k}(times[i], ys ; s, y), forward point fixed.

    The final time row and the one before it are not computable from the
    marching quadrature (no panels remain) and are stored as zero; bound
    checks exclude them.
    """

    grid: SpaceTimeGrid
    s: float
    y: float
    k: int
    values: np.ndarray

    def checkable_rows(self):
        return range(0, self.grid.n_time - 2)

    def to_csv(self, path):
        n_t, n_x = self.values.shape
        rows = np.empty((n_t * n_x, 6))
        rows[:, 0] = self.k
        rows[:, 1] = np.repeat(self.grid.times, n_x)
        rows[:, 2] = np.tile(self.grid.ys, n_t)
        rows[:, 3] = self.s
        rows[:, 4] = self.y
        rows[:, 5] = self.values.ravel()
        csvio.write_csv(path, ["k", "s_prime", "y_prime", "s", "y", "value"], rows)


def kernel_table_first(coeffs, flow, s, y, grid):
    """H^{*1} sampled on the grid with forward point (s, y)."""
    sampler = make_kernel_sampler(coeffs, flow)
    tab = _FlowTables(coeffs, flow, grid)
    n_t = grid.n_time
    values = np.zeros((n_t, grid.n_space))
    for i in range(n_t - 1):
        values[i] = _h_cols(tab, i, n_t - 1, [y])[:, 0]
    del sampler
    return KernelTable(grid=grid, s=s, y=float(y), k=1, values=values)


def iterate_kernel(prev, sampler, grid=None):
    """One space-time convolution: H^{*(k+1)} = H^{*k} composed with H.

    ``prev`` is a :class:`KernelTable`; ``sampler`` must be the object from
    :func:`make_kernel_sampler` (it carries the coefficients and flow).
    The inner time integral has integrable endpoint singularities with
    exponents gamma/2 - 1 at the backward end and k gamma/2 - 1 at the
    forward end, both handled by :func:`singular_time_weights`; sharp
    Gaussian layers switch to Gauss-Hermite nodes.
    """
    grid = prev.grid if grid is None else grid
    if grid.n_time != prev.grid.n_time or grid.n_space != prev.grid.n_space:
        raise GridResolutionError("iterate grid must match the sampled table")
    tab = _FlowTables(sampler.coeffs, sampler.flow, grid)
    values = _backward_step(tab, prev.values, prev.k, prev.s, prev.y)
    return KernelTable(grid=grid, s=prev.s, y=prev.y, k=prev.k + 1, values=values)


def _backward_step(tab, prev_values, prev_k, s, y):
    grid = tab.grid
    lam = tab.coeffs.profile.lam
    n_t, n_x = grid.n_time, grid.n_space
    times = grid.times
    ys = grid.ys
    gh_x, gh_w = _gh_nodes()
    wu = _space_weights(ys)
    q_left = grid.gamma / 2.0
    q_right = prev_k * grid.gamma / 2.0
    out = np.zeros((n_t, n_x))
    if np.all(prev_values == 0.0):
        return out
    for i in range(n_t - 2):
        wts = singular_time_weights(times[i:], q_left=q_left, q_right=q_right)
        acc = np.zeros(n_x)
        for off, w_ir in enumerate(wts):
            if w_ir == 0.0:
                continue
            r = i + off
            h_sharp = _sharp(lam, times[r] - times[i], grid.h_x)
            g_sharp = prev_k == 1 and _sharp(lam, s - times[r], grid.h_x)
            if g_sharp:
                # integrate against the sharp Gaussian inside H^{*1}(r,.;s,y)
                m_y, a_y = (arr[0] for arr in tab.moments_at(r, n_t - 1, [y]))
                mean = y - m_y
                u_q = mean + np.sqrt(2.0 * a_y) * gh_x
                dzy = y - u_q - m_y
                b_y, a_cy = tab.coef_at(r, [y])
                b_q, a_q = tab.coef_at(r, u_q)
                gfac = (b_q - b_y[0]) * (dzy / a_y) \
                    + 0.5 * (a_q - a_cy[0]) * ((dzy * dzy / a_y - 1.0) / a_y)
                hcols = _h_cols(tab, i, r, u_q)
                acc += w_ir * (hcols @ (gh_w * gfac))
            elif h_sharp:
                # H(times[i], y'; times[r], u) is the sharp factor in u
                m_ref, a_ref = tab.moments_between(i, r)
                mean = ys + m_ref
                sig = np.sqrt(a_ref)
                u_q = mean[None, :] + np.sqrt(2.0) * sig[None, :] * gh_x[:, None]
                m_q, a_q = tab.moments_at(i, r, u_q)
                m_q = m_q.reshape(u_q.shape)
                a_q = a_q.reshape(u_q.shape)
                dz = u_q - ys[None, :] - m_q
                pdf = _gauss_pdf(dz, a_q)
                ref = _gauss_pdf(u_q - mean[None, :], a_ref[None, :])
                b_q, ac_q = tab.coef_at(i, u_q)
                b_q = b_q.reshape(u_q.shape)
                ac_q = ac_q.reshape(u_q.shape)
                hval = (tab.bvals[i][None, :] - b_q) * (dz / a_q) * pdf \
                    + 0.5 * (tab.avals[i][None, :] - ac_q) \
                    * ((dz * dz / a_q - 1.0) / a_q) * pdf
                gu = np.interp(u_q.ravel(), ys, prev_values[r]).reshape(u_q.shape)
                acc += w_ir * (gh_w @ (hval / ref * gu))
            else:
                m, a = tab.moments_between(i, r)
                band = float(np.max(np.abs(m)) + 9.0 * np.sqrt(np.max(a)))
                backward_pair_contract(ys, grid.h_x, m, a, tab.bvals[i],
                                       tab.avals[i], prev_values[r], wu, w_ir,
                                       acc, band)
        out[i] = acc
    return out


def kernel_iterates(coeffs, flow, s, y, k_max, grid):
    """Tables H^{*1}..H^{*k_max} with fixed forward point (s, y)."""
    sampler = make_kernel_sampler(coeffs, flow)
    tables = [kernel_table_first(coeffs, flow, s, y, grid)]
    for _ in range(k_max - 1):
        tables.append(iterate_kernel(tables[-1], sampler))
    return tables


def two_step_density(coeffs, flow, t, x, r, s, y, K, grid_lo, grid_hi):
    """Compose densities through an intermediate time:
    int p(t, x; r, u) p(r, u; s, y) du, each factor a truncated series.

    The first factor comes from a forward march on [t, r]; the second from
    the iterated-kernel tables on [r, s] contracted against the frozen
    density, evaluated on the first factor's spatial grid.
    """
    fld = density_field(coeffs, flow, t, x, r, K, grid=grid_lo)
    p_lo = fld.density(0)[-1]
    us = grid_lo.ys
    p_hi = backward_density_profile(coeffs, flow, us, s, y, K, grid_hi)
    return float(np.trapezoid(p_lo * p_hi, us))


def backward_density_profile(coeffs, flow, us, s, y, K, grid):
    """p(r, u; s, y) over backward points u, r = grid.times[0] fixed."""
    tab = _FlowTables(coeffs, flow, grid)
    n_t = grid.n_time
    times = grid.times
    us = np.asarray(us, dtype=float).ravel()
    lam = coeffs.profile.lam
    gh_x, gh_w = _gh_nodes()
    wu = _space_weights(grid.ys)

    m_y, a_y = tab.moments_at(0, n_t - 1, [y])
    total = _gauss_pdf(y - us - m_y[0], a_y[0])
    if tab.zero_kernel or K == 0:
        return total
    tables = kernel_iterates(coeffs, flow, s, y, K, grid)
    for table in tables:
        gk = table.values
        q_right = table.k * grid.gamma / 2.0
        wts = singular_time_weights(times, q_left=None, q_right=q_right)
        acc = np.interp(us, grid.ys, gk[0]) * 0.0
        for rho in range(n_t - 1):
            w = wts[rho]
            if w == 0.0:
                continue
            if rho == 0:
                inner = np.interp(us, grid.ys, gk[0])
            elif _sharp(lam, times[rho] - times[0], grid.h_x):
                m_ref, a_ref = tab.moments_at(0, rho, us)
                mean = us + m_ref
                z_q = mean[None, :] + np.sqrt(2.0 * a_ref)[None, :] * gh_x[:, None]
                m_q, a_q = tab.moments_at(0, rho, z_q)
                m_q = m_q.reshape(z_q.shape)
                a_q = a_q.reshape(z_q.shape)
                pdf = _gauss_pdf(z_q - us[None, :] - m_q, a_q)
                ref = _gauss_pdf(z_q - mean[None, :], a_ref[None, :])
                g_q = np.interp(z_q.ravel(), grid.ys, gk[rho]).reshape(z_q.shape)
                inner = gh_w @ (pdf / ref * g_q)
            else:
                m_g, a_g = tab.moments_between(0, rho)
                band = float(np.max(np.abs(m_g)) + 9.0 * np.sqrt(np.max(a_g)))
                gauss_pair_contract(us, grid.ys, grid.h_x, m_g, a_g, gk[rho],
                                    wu, w, acc, band)
                continue
            acc += w * inner
        total = total + acc
    return total


def parametrix_density(coeffs, flow, t, x, s, y, K=3, grid=None):
    """Truncated parametrix series for the density from (t, x) to (s, y).

    Space-homogeneous coefficients are detected on the grid (the kernel
    vanishes identically) and short-circuit to the frozen Gaussian.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    _require_1d(coeffs)
    if grid is None:
        grid = SpaceTimeGrid.build(t, x, s, coeffs.profile.lam,
                                   coeffs.profile.gamma_a)
    tab = _FlowTables(coeffs, flow, grid)
    if tab.zero_kernel:
        per = np.zeros(K + 1)
        per[0] = float(_frozen_at(tab, x, grid.n_time - 1, [y])[0])
        return SeriesResult(value=float(per.sum()), per_order=per,
                            tail_bound=0.0, K=K, t=t, x=x, s=s, y=y)
    field = density_field(coeffs, flow, t, [x], s, K, grid=grid)
    return field.series_at(y, 0, tab=tab)
