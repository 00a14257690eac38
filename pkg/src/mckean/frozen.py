"""Frozen-coefficient Gaussian transition densities.

Freezing the spatial argument of the coefficients at a point ``xi`` (while
the law enters through a given scalar flow) makes the dynamics Gaussian on
any interval [s', s]: the increment has mean ``m = int_{s'}^{s} b(r, xi,
w1(r)) dr`` and covariance ``a = int_{s'}^{s} (sigma sigma^T)(r, xi, w2(r))
dr``.  This module computes those time integrals, the resulting density,
its backward-variable spatial derivatives (d = 1) and the Gaussian kernel
that dominates everything in the toolkit.
"""

from dataclasses import dataclass
import numpy as np

from .simulator import CoverageError


class FrozenMatrixError(np.linalg.LinAlgError):
    """Covariance is not symmetric positive definite."""


class UnsupportedDimensionError(ValueError):
    """Closed-form derivative requested outside d = 1."""


@dataclass(frozen=True)
class FrozenParams:
    """Time-integrated mean shift and covariance of the frozen dynamics."""

    m: np.ndarray        # (d,)
    a: np.ndarray        # (d, d) symmetric positive definite
    s_prime: float
    s: float

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=float))
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        if a.shape != (m.shape[0], m.shape[0]):
            raise ValueError("a must be square and match m")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "a", a)

    @property
    def dim(self):
        return self.m.shape[0]


@dataclass(frozen=True)
class GaussianMajorant:
    """Kernel c (s-t)^(-d/2) exp(-c |y-x|^2 / (s-t)); one c in both roles."""

    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")


def _restricted_nodes(times, s_prime, s):
    """Grid nodes of [s', s]: interior flow nodes plus split boundaries."""
    tol = 1e-12 * max(1.0, times[-1] - times[0])
    if s_prime < times[0] - tol or s > times[-1] + tol:
        raise CoverageError(
            f"[{s_prime}, {s}] not covered by flow grid "
            f"[{times[0]}, {times[-1]}]")
    inner = times[(times > s_prime + tol) & (times < s - tol)]
    return np.concatenate([[s_prime], inner, [s]])


def frozen_moments(coeffs, flow, xi, s_prime, s):
    """Trapezoidal time integrals of b and sigma sigma^T frozen at xi."""
    if not s_prime < s:
        raise ValueError("requires s_prime < s")
    nodes = _restricted_nodes(flow.times, s_prime, s)
    w1, w2 = flow.interp(nodes)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xw = np.broadcast_to(xi, (len(nodes), xi.shape[0]))
    bvals = coeffs.b(nodes, xw, w1)
    avals = coeffs.diffusion_matrix(nodes, xw, w2)
    m = np.trapezoid(bvals, nodes, axis=0)
    a = np.trapezoid(avals, nodes, axis=0)
    return FrozenParams(m=m, a=a, s_prime=float(s_prime), s=float(s))


def frozen_density(params, y_prime, y):
    """Gaussian transition density from (s', y') to (s, y)."""
    y_prime = np.atleast_1d(np.asarray(y_prime, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = y - y_prime - params.m
    try:
        chol = np.linalg.cholesky(params.a)
    except np.linalg.LinAlgError as exc:
        raise FrozenMatrixError(f"covariance not SPD: {params.a}") from exc
    sol = np.linalg.solve(chol, z)
    quad = float(sol @ sol)
    det = float(np.prod(np.diag(chol))) ** 2
    d = params.dim
    return float((2.0 * np.pi) ** (-d / 2.0) / np.sqrt(det) * np.exp(-0.5 * quad))


def _scalar_params(params):
    if params.dim != 1:
        raise UnsupportedDimensionError("closed-form derivatives require d=1")
    return float(params.m[0]), float(params.a[0, 0])


def frozen_density_dx(params, y_prime, y):
    """d = 1 derivative in the backward variable y': ((y-y'-m)/a) * density.

    The density's argument is y - y' - m, so the y'-derivative equals minus
    the derivative in the displacement; the kernel construction consumes
    backward-variable derivatives, which is the convention returned here
    (unit-tested against central differences in y').
    """
    m, a = _scalar_params(params)
    dz = float(np.atleast_1d(y)[0]) - float(np.atleast_1d(y_prime)[0]) - m
    return dz / a * frozen_density(params, y_prime, y)


def frozen_density_dx2(params, y_prime, y):
    """d = 1 second backward-variable derivative: ((y-y'-m)^2/a^2 - 1/a) p."""
    m, a = _scalar_params(params)
    dz = float(np.atleast_1d(y)[0]) - float(np.atleast_1d(y_prime)[0]) - m
    return (dz * dz / (a * a) - 1.0 / a) * frozen_density(params, y_prime, y)


def majorant(kern, t, x, s, y):
    """Dominating kernel c (s-t)^(-d/2) exp(-c |y-x|^2/(s-t))."""
    if not s > t:
        raise ValueError("requires s > t")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = x.shape[-1]
    dist2 = float(np.sum((y - x) ** 2))
    dt = s - t
    return float(kern.c * dt ** (-d / 2.0) * np.exp(-kern.c * dist2 / dt))


def majorant_values(c, dt, dist2, dim=1):
    """Vectorised dominating kernel over arrays of gaps and distances."""
    dt = np.asarray(dt, dtype=float)
    return c * dt ** (-dim / 2.0) * np.exp(-c * np.asarray(dist2) / dt)


def _left_power_panel(nodes, values):
    """First-panel weight for an integrable power singularity at nodes[0].

    When the integrand diverges at the left endpoint, its local exponent q
    is read off the next two nodes (exact for pure powers (r - r0)^q with
    q > -1) and the first panel is integrated in closed form.
    """
    r0, r1, r2 = nodes[0], nodes[1], nodes[2]
    g1, g2 = values[1], values[2]
    if g1 == 0.0 or g2 == 0.0:
        return 0.0
    q = np.log(abs(g2 / g1)) / np.log((r2 - r0) / (r1 - r0))
    if q <= -1.0:
        raise ValueError(f"non-integrable left-endpoint singularity (q={q:.3f})")
    return g1 * (r1 - r0) / (1.0 + q)


def frozen_mu_moment_derivative(coeffs, flow, flow_derivative, which_coefficient,
                                xi, s_prime, s):
    """Chain-rule measure derivative of the frozen mean shift or covariance.

    Integrates ``d/dw coef(r, xi, w(r)) * flow_derivative(r)`` over [s', s]
    by trapezoid, where ``flow_derivative`` holds the per-time measure
    derivative of the scalar flow on the flow grid.  A non-finite value at
    the left endpoint (an integrable power blow-up) is handled by a closed
    first panel.  d = 1.
    """
    if coeffs.dim != 1:
        raise UnsupportedDimensionError("d=1 only")
    if which_coefficient not in ("b", "a"):
        raise ValueError("which_coefficient must be 'b' or 'a'")
    deriv = np.asarray(flow_derivative, dtype=float)
    if deriv.shape != flow.times.shape:
        raise ValueError(
            f"grid mismatch: flow has {len(flow.times)} nodes, "
            f"derivative has {deriv.shape}")
    nodes = _restricted_nodes(flow.times, s_prime, s)
    w1, w2 = flow.interp(nodes)
    dv = np.interp(nodes, flow.times, deriv)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xw = np.broadcast_to(xi, (len(nodes), 1))
    if which_coefficient == "b":
        dcoef = coeffs.b_dw(nodes, xw, w1)[:, 0]
    else:
        dcoef = coeffs.a_dw(nodes, xw, w2)[:, 0, 0]
    integrand = dcoef * dv
    if np.isfinite(integrand[0]):
        return float(np.trapezoid(integrand, nodes))
    if len(nodes) < 3 or not np.all(np.isfinite(integrand[1:])):
        raise ValueError("flow derivative must be finite away from the left endpoint")
    head = _left_power_panel(nodes, integrand)
    return float(head + np.trapezoid(integrand[1:], nodes[1:]))
