"""Empirical measures, moment functionals and Lions-derivative estimators.

An :class:`EmpiricalMeasure` is N uniformly weighted particles in R^d.  The
derivative of a measure functional ``mu -> <phi, mu>`` along the measure (in
the lifted L2 sense) is the pointwise gradient ``phi'(z)``; for functionals
defined through a simulation, :func:`lions_derivative_flow` estimates it by
running a coupled pair of simulations that share every Brownian increment
and differ only in one particle shifted by ``epsilon``.
"""

from dataclasses import dataclass
import numpy as np

from . import csvio


class MomentEvaluationError(ValueError):
    """phi produced a non-finite value on some particle."""


class UnsupportedInputError(ValueError):
    """Operation not defined for these inputs (dimension/size mismatch)."""


class DegenerateStepError(ValueError):
    """Perturbation too small to move the particle in floating point."""


@dataclass(frozen=True)
class EmpiricalMeasure:
    """N uniformly weighted particles; array of shape (N, d), finite."""

    particles: np.ndarray

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("particles must be a nonempty (N, d) array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("particles must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "particles", arr)

    @property
    def n_particles(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    def second_moment(self):
        return float(np.mean(np.sum(self.particles ** 2, axis=1)))

    def shifted(self, index, coordinate, epsilon):
        """Copy with one particle moved by epsilon along one coordinate."""
        pts = self.particles.copy()
        pts[index, coordinate] += epsilon
        if pts[index, coordinate] == self.particles[index, coordinate]:
            raise DegenerateStepError(
                f"epsilon={epsilon} does not move particle {index} "
                f"(value {self.particles[index, coordinate]!r})")
        return EmpiricalMeasure(pts)

    def to_csv(self, path):
        header = [f"x{j}" for j in range(self.dim)]
        csvio.write_csv(path, header, self.particles)

    @classmethod
    def from_csv(cls, path):
        _, rows = csvio.read_csv(path)
        return cls(rows)


@dataclass(frozen=True)
class ScalarFlow:
    """Scalar moments w1(t) = <phi1, mu_t>, w2(t) = <phi2, mu_t> on a grid."""

    times: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        w1 = np.asarray(self.w1, dtype=float)
        w2 = np.asarray(self.w2, dtype=float)
        if t.ndim != 1 or len(t) < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be a strictly increasing grid")
        if w1.shape != t.shape or w2.shape != t.shape:
            raise ValueError("w1, w2 must match the time grid")
        for name, arr in (("times", t), ("w1", w1), ("w2", w2)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @classmethod
    def constant(cls, t, T, w1, w2):
        return cls(np.array([t, T]), np.full(2, float(w1)), np.full(2, float(w2)))

    def covers(self, t0, t1):
        tol = 1e-12 * max(1.0, abs(self.times[-1] - self.times[0]))
        return self.times[0] <= t0 + tol and t1 <= self.times[-1] + tol

    def interp(self, r):
        """Piecewise-linear (w1(r), w2(r)); r may be an array."""
        return (np.interp(r, self.times, self.w1),
                np.interp(r, self.times, self.w2))

    def to_csv(self, path):
        csvio.write_csv(path, ["time", "w1", "w2"],
                        np.column_stack([self.times, self.w1, self.w2]))


@dataclass(frozen=True)
class LionsDerivativeEstimate:
    """Coupled-pair estimate of a measure derivative at a support point.

    ``value`` is a d-vector; components not requested are NaN.  ``stderr``
    is the standard error over noise replicates (0 when the estimate is
    noise-free).  z is restricted to particle locations of the base
    measure: the lifted perturbation must live in L2 of that measure.
    """

    z: np.ndarray
    value: np.ndarray
    epsilon: float
    n_particles: int
    stderr: float
    replicates: int

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        vals = np.asarray(self.value)
        if np.any(np.isinf(vals)):  # NaN marks components not estimated
            raise ValueError("estimate must be finite")


def moment(mu, phi):
    """(1/N) sum phi(X_i); raises naming the particle if phi blows up."""
    vals = np.asarray(phi(mu.particles), dtype=float)
    if vals.shape != (mu.n_particles,):
        raise MomentEvaluationError(
            f"phi must map (N, d) to (N,), got shape {vals.shape}")
    bad = ~np.isfinite(vals)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise MomentEvaluationError(
            f"phi returned {vals[idx]} at particle {idx}")
    return float(np.mean(vals))


def wasserstein2_1d(mu, nu):
    """Exact W2 between equal-size 1-d empirical measures (sorted coupling)."""
    if mu.dim != 1 or nu.dim != 1:
        raise UnsupportedInputError("wasserstein2_1d requires d=1")
    if mu.n_particles != nu.n_particles:
        raise UnsupportedInputError("particle counts must match")
    a = np.sort(mu.particles[:, 0])
    b = np.sort(nu.particles[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))


def lions_derivative_linear(phi, z, step=1e-6):
    """Gradient of phi at z: the measure derivative of mu -> <phi, mu>.

    Central differences with the stated step; independent of the measure.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    d = z.shape[0]
    grad = np.empty(d)
    for j in range(d):
        zp = z.copy()
        zm = z.copy()
        zp[j] += step
        zm[j] -= step
        grad[j] = (phi(zp[None, :])[0] - phi(zm[None, :])[0]) / (2.0 * step)
    return grad


def lions_derivative_flow(sim, coeffs, mu, z_index, j, s, phi, epsilon=1e-4,
                          seed=0, t=0.0, replicates=8):
    """Estimate the measure derivative of mu -> <phi, law at time s> at a
    particle location, through a deterministic simulation oracle.

    ``sim(coeffs, particles, t, s, seed) -> (N, d) terminal particles`` must
    be deterministic given its seed and resolve the law flow the same way
    for both members of the coupled pair.  The estimator shifts particle
    ``z_index`` by ``epsilon`` along coordinate ``j``, reruns under the same
    Brownian increments and returns N * (v_pert - v_base) / epsilon: the
    factor N undoes the 1/N weight the shifted particle carries in the
    lifted direction.  ``j=None`` estimates every component (one coupled
    pair per coordinate); otherwise the other components are NaN.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if s < t:
        raise ValueError("requires s >= t")
    n = mu.n_particles
    d = mu.dim
    coords = range(d) if j is None else [j]
    value = np.full(d, np.nan)

    if s == t:
        for jj in coords:
            pert = mu.shifted(z_index, jj, epsilon)
            value[jj] = n * (moment(pert, phi) - moment(mu, phi)) / epsilon
        return LionsDerivativeEstimate(
            z=mu.particles[z_index].copy(), value=value, epsilon=epsilon,
            n_particles=n, stderr=0.0, replicates=1)

    estimates = {jj: [] for jj in coords}
    for r in range(replicates):
        seed_r = (int(seed), r)
        base_term = sim(coeffs, mu.particles, t, s, seed_r)
        v_base = np.mean(phi(base_term))
        for jj in coords:
            pert = mu.shifted(z_index, jj, epsilon)
            pert_term = sim(coeffs, pert.particles, t, s, seed_r)
            v_pert = np.mean(phi(pert_term))
            estimates[jj].append(n * (v_pert - v_base) / epsilon)

    stderrs = []
    for jj in coords:
        est = np.asarray(estimates[jj])
        value[jj] = est.mean()
        stderrs.append(est.std(ddof=1) / np.sqrt(len(est)) if len(est) > 1 else 0.0)
    return LionsDerivativeEstimate(
        z=mu.particles[z_index].copy(), value=value, epsilon=epsilon,
        n_particles=n, stderr=float(max(stderrs)), replicates=replicates)
