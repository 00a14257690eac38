"""Euler-Maruyama integration and the fixed-point iteration over law flows.

The dynamics are linear once the scalar moments (w1, w2) are frozen:

    X_{k+1} = X_k + b(r_k, X_k, w1(r_k)) h + sigma(r_k, X_k, w2(r_k)) dB_k,

with left-point coefficient evaluation and dB_k ~ N(0, h I) drawn from the
counter-based stream in :mod:`mckean.rng`.  The self-consistent flow is
found by iterating: simulate under the current flow, recompute the moments
from the empirical laws at the grid times, repeat - always under the same
noise array, so that increments between successive iterates are pathwise
quantities of one Brownian motion.
"""

from dataclasses import dataclass
import numpy as np

from . import csvio
from .measure import EmpiricalMeasure, ScalarFlow, moment, wasserstein2_1d
from .rng import NOISE_SCHEME, brownian_increments

DEFAULT_TOL = 1e-8
DEFAULT_M_MAX = 25
MAX_WINDOW = 0.5  # horizons longer than this restart the iteration per window


class CoverageError(ValueError):
    """Flow grid does not cover the simulation interval."""


class PicardConvergenceError(RuntimeError):
    """Fixed-point iteration did not reach tolerance within m_max sweeps."""


@dataclass(frozen=True)
class SimulationConfig:
    t: float
    horizon: float          # terminal time T > t
    n_steps: int
    n_particles: int
    seed: int
    dim: int = 1

    def __post_init__(self):
        if not self.horizon > self.t:
            raise ValueError("horizon must exceed t")
        if self.n_steps < 1 or self.n_particles < 1:
            raise ValueError("n_steps and n_particles must be positive")

    @property
    def dt(self):
        return (self.horizon - self.t) / self.n_steps

    def grid(self):
        g = self.t + self.dt * np.arange(self.n_steps + 1)
        g[-1] = self.horizon
        return g


@dataclass(frozen=True)
class PathEnsemble:
    """N particle paths on a common grid; paths has shape (N, M+1, d)."""

    times: np.ndarray
    paths: np.ndarray
    seed: int
    noise_scheme: str = NOISE_SCHEME

    def __post_init__(self):
        if not np.all(np.isfinite(self.paths)):
            raise ValueError("paths must be finite")

    @property
    def n_particles(self):
        return self.paths.shape[0]

    def measure_at(self, k):
        return EmpiricalMeasure(self.paths[:, k, :])

    def terminal_measure(self):
        return self.measure_at(self.paths.shape[1] - 1)

    def to_csv(self, path):
        n, m1, d = self.paths.shape
        header = ["particle", "time"] + [f"x{j}" for j in range(d)]
        rows = np.empty((n * m1, 2 + d))
        rows[:, 0] = np.repeat(np.arange(n), m1)
        rows[:, 1] = np.tile(self.times, n)
        rows[:, 2:] = self.paths.reshape(n * m1, d)
        csvio.write_csv(path, header, rows)


@dataclass(frozen=True)
class PicardReport:
    """Per-sweep diagnostics of the law-flow iteration.

    ``increments[m-1]`` is Delta_m = max over grid times of the mean squared
    gap between iterates m and m-1 (iterate 0 is the frozen initial
    condition).  ``w2_gaps`` carries the matching max-over-time Wasserstein
    distances when d = 1, NaN otherwise.
    """

    iterations: int
    increments: list
    w2_gaps: list
    converged: bool
    final_flow: ScalarFlow
    tol: float = DEFAULT_TOL

    def to_csv(self, path):
        rows = np.column_stack([
            np.arange(1, len(self.increments) + 1),
            np.asarray(self.increments),
            np.asarray(self.w2_gaps),
        ])
        csvio.write_csv(path, ["iteration", "increment", "w2_gap"], rows)


def _check_flow_coverage(flow, t, T):
    if not flow.covers(t, T):
        raise CoverageError(
            f"flow grid [{flow.times[0]}, {flow.times[-1]}] does not cover "
            f"[{t}, {T}]")


def _integrate(coeffs, times, w1_nodes, w2_nodes, x0, noise):
    """Core Euler loop; returns paths of shape (N, M+1, d)."""
    n, m, d = noise.shape
    h = times[1] - times[0]
    paths = np.empty((n, m + 1, d))
    paths[:, 0, :] = x0
    x = np.array(x0, dtype=float)
    for k in range(m):
        drift = coeffs.b(times[k], x, w1_nodes[k])
        diff = coeffs.sigma(times[k], x, w2_nodes[k])
        x = x + h * drift + np.einsum("nij,nj->ni", diff, noise[:, k, :])
        paths[:, k + 1, :] = x
    return paths


def euler_maruyama(coeffs, flow, initial, config, noise=None):
    """Simulate the linear dynamics under a frozen scalar flow."""
    if initial.dim != config.dim or initial.dim != coeffs.dim:
        raise ValueError("dimension mismatch between measure, config and coefficients")
    _check_flow_coverage(flow, config.t, config.horizon)
    times = config.grid()
    if noise is None:
        noise = brownian_increments(config.seed, initial.n_particles,
                                    config.n_steps, config.dim, config.dt)
    w1_nodes, w2_nodes = flow.interp(times)
    paths = _integrate(coeffs, times, w1_nodes, w2_nodes, initial.particles, noise)
    return PathEnsemble(times=times, paths=paths, seed=config.seed)


def _flow_from_paths(coeffs, times, paths):
    n, m1, _ = paths.shape
    w1 = np.empty(m1)
    w2 = np.empty(m1)
    for k in range(m1):
        w1[k] = np.mean(coeffs.phi1(paths[:, k, :]))
        w2[k] = np.mean(coeffs.phi2(paths[:, k, :]))
    return ScalarFlow(times=times, w1=w1, w2=w2)


def picard_iterate(coeffs, mu0, config, tol=DEFAULT_TOL, m_max=DEFAULT_M_MAX,
                   initial_flow=None, noise=None):
    """Iterate law flows to a fixed point under common random numbers.

    Iterate 0 is the process frozen at its initial value, so the starting
    flow is constant in time at the initial moments (an alternative initial
    flow guess may be supplied).  Each sweep simulates under the previous
    flow with the same noise array and recomputes the moments from the
    empirical laws at every grid time.  Stops when the latest increment
    drops below ``tol``; non-convergence is reported, not raised.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    times = config.grid()
    x0 = mu0.particles
    if noise is None:
        noise = brownian_increments(config.seed, mu0.n_particles,
                                    config.n_steps, config.dim, config.dt)
    if initial_flow is None:
        flow = ScalarFlow(times=times,
                          w1=np.full(len(times), moment(mu0, coeffs.phi1)),
                          w2=np.full(len(times), moment(mu0, coeffs.phi2)))
    else:
        _check_flow_coverage(initial_flow, config.t, config.horizon)
        w1, w2 = initial_flow.interp(times)
        flow = ScalarFlow(times=times, w1=w1, w2=w2)

    prev_paths = np.broadcast_to(x0[:, None, :], (x0.shape[0], len(times), x0.shape[1]))
    increments = []
    w2_gaps = []
    converged = False
    for _ in range(m_max):
        ens = euler_maruyama(coeffs, flow, mu0, config, noise=noise)
        gap = ens.paths - prev_paths
        delta = float(np.max(np.mean(np.sum(gap * gap, axis=2), axis=0)))
        increments.append(delta)
        if config.dim == 1:
            w2_gaps.append(max(
                wasserstein2_1d(EmpiricalMeasure(prev_paths[:, k, :]),
                                ens.measure_at(k))
                for k in range(len(times))))
        else:
            w2_gaps.append(float("nan"))
        flow = _flow_from_paths(coeffs, times, ens.paths)
        prev_paths = ens.paths
        if delta <= tol:
            converged = True
            break
    return PicardReport(iterations=len(increments), increments=increments,
                        w2_gaps=w2_gaps, converged=converged,
                        final_flow=flow, tol=tol)


def _windows(t, T, max_window):
    n = int(np.ceil((T - t) / max_window - 1e-12))
    edges = t + (T - t) * np.arange(n + 1) / n
    edges[-1] = T
    return edges


def simulate_mkv(coeffs, mu0, config, tol=DEFAULT_TOL, m_max=DEFAULT_M_MAX,
                 max_window=MAX_WINDOW):
    """Self-consistent simulation: fixed-point flow, then one final pass.

    Horizons longer than ``max_window`` are split into consecutive windows;
    the iteration restarts on each window from the previous terminal
    particles and the per-window flows and paths are concatenated.  Raises
    :class:`PicardConvergenceError` (naming the window) if any window fails
    to converge.
    """
    edges = _windows(config.t, config.horizon, max_window)
    steps_total = config.n_steps
    n_win = len(edges) - 1
    steps_per = [max(1, int(round(steps_total * (edges[i + 1] - edges[i])
                                  / (config.horizon - config.t))))
                 for i in range(n_win)]

    mu = mu0
    all_times = []
    all_paths = []
    w1_parts = []
    w2_parts = []
    for i in range(n_win):
        sub = SimulationConfig(t=edges[i], horizon=edges[i + 1],
                               n_steps=steps_per[i], n_particles=mu.n_particles,
                               seed=config.seed, dim=config.dim)
        noise = brownian_increments(config.seed, mu.n_particles,
                                    sub.n_steps, sub.dim, sub.dt, i)
        report = picard_iterate(coeffs, mu, sub, tol=tol, m_max=m_max, noise=noise)
        if not report.converged:
            raise PicardConvergenceError(
                f"window {i} [{edges[i]}, {edges[i+1]}] did not reach "
                f"tol={tol} in {m_max} sweeps (last increment "
                f"{report.increments[-1]:.3e})")
        ens = euler_maruyama(coeffs, report.final_flow, mu, sub, noise=noise)
        flow = _flow_from_paths(coeffs, ens.times, ens.paths)
        drop = 1 if i > 0 else 0  # window boundary node appears once
        all_times.append(ens.times[drop:])
        all_paths.append(ens.paths[:, drop:, :])
        w1_parts.append(flow.w1[drop:])
        w2_parts.append(flow.w2[drop:])
        mu = ens.terminal_measure()

    times = np.concatenate(all_times)
    ensemble = PathEnsemble(times=times, paths=np.concatenate(all_paths, axis=1),
                            seed=config.seed)
    full_flow = ScalarFlow(times=times, w1=np.concatenate(w1_parts),
                           w2=np.concatenate(w2_parts))
    return ensemble, full_flow


def mkv_terminal_sampler(n_steps=64, tol=DEFAULT_TOL, m_max=DEFAULT_M_MAX):
    """Simulation oracle for measure-derivative estimation.

    Returns ``sim(coeffs, particles, t, s, seed) -> (N, d)`` terminal
    particles: the flow is resolved by the fixed-point iteration and one
    final pass is run under it, all from a noise stream keyed by ``seed``
    (which may be an int or a tuple of ints).  Deterministic given its
    arguments; the coupled-pair estimator relies on passing equal seeds.
    """
    def sim(coeffs, particles, t, s, seed):
        seed_tuple = seed if isinstance(seed, tuple) else (seed,)
        key, *tags = seed_tuple
        mu = EmpiricalMeasure(particles)
        config = SimulationConfig(t=t, horizon=s, n_steps=n_steps,
                                  n_particles=mu.n_particles, seed=int(key),
                                  dim=mu.dim)
        noise = brownian_increments(int(key), mu.n_particles, n_steps,
                                    mu.dim, config.dt, *tags)
        report = picard_iterate(coeffs, mu, config, tol=tol, m_max=m_max,
                                noise=noise)
        if not report.converged:
            raise PicardConvergenceError(
                f"flow resolution did not converge (last increment "
                f"{report.increments[-1]:.3e})")
        ens = euler_maruyama(coeffs, report.final_flow, mu, config, noise=noise)
        return ens.paths[:, -1, :]

    return sim
