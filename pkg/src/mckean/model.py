"""Coefficient sets, regularity metadata and empirical validation.

A coefficient set bundles the drift ``b(t, x, w)``, the diffusion matrix
``sigma(t, x, w)`` and the two moment functions ``phi1, phi2`` through which
the dynamics see the law of the process (``w`` stands for the scalar moment
``<phi_i, mu>``).  The attached :class:`RegularityProfile` declares the
Holder exponents, sup bounds and the two-sided ellipticity constant that the
rest of the toolkit relies on; :func:`validate_assumptions` probes them by
sampling.

Coefficient callables are vectorised: ``x`` has shape ``(..., d)``, ``t``
and ``w`` are floats (or arrays broadcastable against the leading axes of
``x``), and they return shape ``(..., d)`` for ``b``, ``(..., d, d)`` for
``sigma`` and ``(...,)`` for ``phi1, phi2``.
"""

from dataclasses import dataclass, field
import numpy as np

_FD_STEP = 1e-6          # central-difference step for w-derivatives
_VALIDATION_SLACK = 0.01  # declared bounds are enforced up to this factor

CLIP_BOX = 1.0e6          # clipping radius keeping "identity" moments bounded


class RegistryError(KeyError):
    """Unknown built-in problem name."""


@dataclass(frozen=True)
class RegularityProfile:
    """Declared regularity of a coefficient set.

    alpha1, alpha2    Holder exponents of phi1, phi2 in (0, 1].
    gamma_a           space-Holder exponent of sigma in (0, 1].
    gamma_a_prime     space-Holder exponent of the w-derivative of sigma.
    lam               ellipticity: eigenvalues of sigma sigma^T lie in
                      [1/lam, lam], with lam > 1.
    c_b               sup bound of |b|.
    c_b_prime         sup bound of |d/dw b|.
    c_sigma           space-Holder seminorm of sigma.
    c_sigma_prime     sup bound of |d/dw sigma|.
    """

    alpha1: float
    alpha2: float
    gamma_a: float
    gamma_a_prime: float
    lam: float
    c_b: float
    c_b_prime: float
    c_sigma: float
    c_sigma_prime: float

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "gamma_a", "gamma_a_prime"):
            e = getattr(self, name)
            if not 0.0 < e <= 1.0:
                raise ValueError(f"{name}={e} must lie in (0, 1]")
        if not self.lam > 1.0:
            raise ValueError(f"lam={self.lam} must exceed 1")
        for name in ("c_b", "c_b_prime", "c_sigma", "c_sigma_prime"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name}={v} must be finite and nonnegative")


@dataclass(frozen=True)
class CoefficientSet:
    """Drift, diffusion and moment functions with their declared profile.

    ``db_dw`` and ``dsigma_dw`` are optional analytic w-derivatives; when
    absent, central differences with step 1e-6 are used.
    """

    name: str
    dim: int
    b: callable
    sigma: callable
    phi1: callable
    phi2: callable
    profile: RegularityProfile
    db_dw: callable = None
    dsigma_dw: callable = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")

    def diffusion_matrix(self, t, x, w):
        """a = sigma sigma^T at (t, x, w); shape (..., d, d)."""
        s = self.sigma(t, x, w)
        return s @ np.swapaxes(s, -1, -2)

    def b_dw(self, t, x, w):
        if self.db_dw is not None:
            return self.db_dw(t, x, w)
        h = _FD_STEP
        return (self.b(t, x, w + h) - self.b(t, x, w - h)) / (2.0 * h)

    def sigma_dw(self, t, x, w):
        if self.dsigma_dw is not None:
            return self.dsigma_dw(t, x, w)
        h = _FD_STEP
        return (self.sigma(t, x, w + h) - self.sigma(t, x, w - h)) / (2.0 * h)

    def a_dw(self, t, x, w):
        """w-derivative of sigma sigma^T (analytic when sigma_dw is)."""
        s = self.sigma(t, x, w)
        ds = self.sigma_dw(t, x, w)
        return ds @ np.swapaxes(s, -1, -2) + s @ np.swapaxes(ds, -1, -2)


@dataclass(frozen=True)
class AssumptionReport:
    """Measured regularity of a coefficient set on sampled points.

    ``checks`` maps assumption names to pass flags; declared bounds are
    enforced up to a 1% slack.  The Holder quotient maxima for phi1/phi2
    are informational (the profile declares their exponents, not their
    seminorms) and only checked for finiteness.
    """

    n_samples: int
    ellipticity_range: tuple
    holder_max: dict
    sup_b: float
    sup_db_dw: float
    sup_dsigma_dw: float
    checks: dict = field(default_factory=dict)
    passed: bool = True


def _clipped_identity(x):
    return np.clip(x[..., 0], -CLIP_BOX, CLIP_BOX)


def _sqrt_clipped_norm(x):
    r = np.sqrt(np.sum(x * x, axis=-1))
    return np.minimum(r, CLIP_BOX) ** 0.5


def _tanh_first(x):
    return np.tanh(x[..., 0])


def _identity_matrix(t, x, w):
    d = x.shape[-1]
    eye = np.eye(d)
    return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()


def _zero_drift(t, x, w):
    return np.zeros_like(x)


def _basis_drift(value, x):
    out = np.zeros_like(x)
    out[..., 0] = value
    return out


HOLDER_DIFFUSION_GAMMA = 0.5


def _holder_diffusion_a(x, w):
    # a = 1 + 0.5 |sin x|^gamma (1 + tanh w)/2, values in [1, 1.5]
    s = np.abs(np.sin(x[..., 0])) ** HOLDER_DIFFUSION_GAMMA
    return 1.0 + 0.5 * s * (1.0 + np.tanh(w)) / 2.0


def _holder_diffusion_sigma(t, x, w):
    return np.sqrt(_holder_diffusion_a(x, w))[..., None, None]


def _holder_diffusion_sigma_dw(t, x, w):
    s = np.abs(np.sin(x[..., 0])) ** HOLDER_DIFFUSION_GAMMA
    sig = np.sqrt(_holder_diffusion_a(x, w))
    da_dw = 0.5 * s * (1.0 / np.cosh(w)) ** 2 / 2.0
    return (da_dw / (2.0 * sig))[..., None, None]


def _build_gaussian(dim):
    profile = RegularityProfile(
        alpha1=1.0, alpha2=1.0, gamma_a=1.0, gamma_a_prime=1.0,
        lam=1.01, c_b=0.0, c_b_prime=0.0, c_sigma=0.0, c_sigma_prime=0.0)
    return CoefficientSet(
        name="gaussian", dim=dim, b=_zero_drift, sigma=_identity_matrix,
        phi1=_tanh_first, phi2=_tanh_first, profile=profile,
        db_dw=_zero_drift,
        dsigma_dw=lambda t, x, w: np.zeros(x.shape[:-1] + (dim, dim)))


def _build_mean_attract(dim):
    profile = RegularityProfile(
        alpha1=1.0, alpha2=1.0, gamma_a=1.0, gamma_a_prime=1.0,
        lam=1.01, c_b=CLIP_BOX, c_b_prime=1.0, c_sigma=0.0, c_sigma_prime=0.0)
    return CoefficientSet(
        name="mean-attract", dim=dim,
        b=lambda t, x, w: _basis_drift(np.asarray(w), x),
        sigma=_identity_matrix,
        phi1=_clipped_identity, phi2=_tanh_first, profile=profile,
        db_dw=lambda t, x, w: _basis_drift(1.0, x),
        dsigma_dw=lambda t, x, w: np.zeros(x.shape[:-1] + (dim, dim)))


def _build_holder_drift():
    profile = RegularityProfile(
        alpha1=0.5, alpha2=1.0, gamma_a=1.0, gamma_a_prime=1.0,
        lam=1.01, c_b=1.0, c_b_prime=1.0, c_sigma=0.0, c_sigma_prime=0.0)
    return CoefficientSet(
        name="holder-drift", dim=1,
        b=lambda t, x, w: _basis_drift(np.tanh(w), x),
        sigma=_identity_matrix,
        phi1=_sqrt_clipped_norm, phi2=_tanh_first, profile=profile,
        db_dw=lambda t, x, w: _basis_drift((1.0 / np.cosh(w)) ** 2, x),
        dsigma_dw=lambda t, x, w: np.zeros(x.shape[:-1] + (1, 1)))


def _build_holder_diffusion():
    profile = RegularityProfile(
        alpha1=1.0, alpha2=1.0,
        gamma_a=HOLDER_DIFFUSION_GAMMA, gamma_a_prime=HOLDER_DIFFUSION_GAMMA,
        lam=1.5, c_b=0.0, c_b_prime=0.0, c_sigma=0.25, c_sigma_prime=0.125)
    return CoefficientSet(
        name="holder-diffusion", dim=1,
        b=_zero_drift, sigma=_holder_diffusion_sigma,
        phi1=_tanh_first, phi2=_tanh_first, profile=profile,
        db_dw=_zero_drift, dsigma_dw=_holder_diffusion_sigma_dw)


_REGISTRY = {
    "gaussian": _build_gaussian,
    "mean-attract": _build_mean_attract,
    "holder-drift": lambda dim=1: _build_holder_drift(),
    "holder-diffusion": lambda dim=1: _build_holder_diffusion(),
}

REGISTRY_NAMES = tuple(sorted(_REGISTRY))


def builtin_problem(name, dim=1):
    """Return a built-in coefficient set by registry name.

    "gaussian"          zero drift, identity diffusion.
    "mean-attract"      b(t,x,w) = w e_1 with phi1 the clipped identity, so
                        the mean feeds back into the drift.
    "holder-drift"      d=1, b = tanh(w) with phi1(x) = min(|x|, M)^(1/2).
    "holder-diffusion"  d=1, sigma^2 = 1 + 0.5 |sin x|^g (1+tanh w)/2.

    The two holder-* problems are one-dimensional; ``dim`` applies to the
    first two.
    """
    try:
        builder = _REGISTRY[name]
    except KeyError:
        raise RegistryError(
            f"unknown problem {name!r}; choose from {REGISTRY_NAMES}") from None
    if name in ("holder-drift", "holder-diffusion") and dim != 1:
        raise RegistryError(f"{name!r} is one-dimensional")
    return builder(dim)


def _holder_quotients(fvals, fvals2, dx, exponent):
    return np.abs(fvals - fvals2) / dx ** exponent


def validate_assumptions(coeffs, n_samples, seed):
    """Probe the declared profile on sampled points and report the outcome.

    Samples (t, x, x', w, w') tuples with pair separations spread over
    scales 1e-6..10 and measures: sup |b|, sup |d/dw b|, sup |d/dw sigma|,
    the space-Holder quotients of sigma and the phi's, and the Rayleigh
    quotients of sigma sigma^T.  A declared bound passes when the measured
    value is within profile * 1.01.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rng = np.random.default_rng(seed)
    d = coeffs.dim
    prof = coeffs.profile

    t = rng.uniform(0.0, 1.0, n_samples)
    x = rng.uniform(-10.0, 10.0, (n_samples, d))
    direction = rng.standard_normal((n_samples, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    sep = 10.0 ** rng.uniform(-6.0, 1.0, n_samples)
    x2 = x + sep[:, None] * direction
    w = rng.uniform(-5.0, 5.0, n_samples)

    b1 = coeffs.b(t, x, w)
    sig1 = coeffs.sigma(t, x, w)
    sig2 = coeffs.sigma(t, x2, w)
    db = coeffs.b_dw(t, x, w)
    dsig1 = coeffs.sigma_dw(t, x, w)
    dsig2 = coeffs.sigma_dw(t, x2, w)

    sup_b = float(np.max(np.linalg.norm(b1, axis=-1)))
    sup_db = float(np.max(np.linalg.norm(db, axis=-1)))
    sup_dsig = float(np.max(np.abs(dsig1)))

    frob = np.linalg.norm((sig1 - sig2).reshape(n_samples, -1), axis=1)
    q_sigma = np.max(frob / sep ** prof.gamma_a)
    frob_d = np.linalg.norm((dsig1 - dsig2).reshape(n_samples, -1), axis=1)
    q_dsigma = np.max(frob_d / sep ** prof.gamma_a_prime)
    q_phi1 = np.max(_holder_quotients(
        coeffs.phi1(x), coeffs.phi1(x2), sep, prof.alpha1))
    q_phi2 = np.max(_holder_quotients(
        coeffs.phi2(x), coeffs.phi2(x2), sep, prof.alpha2))

    # Rayleigh quotients of sigma sigma^T along random directions.
    zeta = rng.standard_normal((n_samples, d))
    zeta /= np.linalg.norm(zeta, axis=1, keepdims=True)
    a = sig1 @ np.swapaxes(sig1, -1, -2)
    rayleigh = np.einsum("ni,nij,nj->n", zeta, a, zeta)
    ray_lo, ray_hi = float(np.min(rayleigh)), float(np.max(rayleigh))

    slack = 1.0 + _VALIDATION_SLACK
    checks = {
        "drift_bound": sup_b <= prof.c_b * slack,
        "drift_w_derivative": sup_db <= prof.c_b_prime * slack,
        "sigma_space_holder": q_sigma <= prof.c_sigma * slack,
        "sigma_w_derivative": sup_dsig <= prof.c_sigma_prime * slack,
        "dsigma_space_holder": bool(np.isfinite(q_dsigma)),
        "phi1_holder_finite": bool(np.isfinite(q_phi1)),
        "phi2_holder_finite": bool(np.isfinite(q_phi2)),
        "ellipticity": (ray_lo >= 1.0 / (prof.lam * slack)
                        and ray_hi <= prof.lam * slack),
    }
    return AssumptionReport(
        n_samples=n_samples,
        ellipticity_range=(ray_lo, ray_hi),
        holder_max={"sigma": float(q_sigma), "dsigma": float(q_dsigma),
                    "phi1": float(q_phi1), "phi2": float(q_phi2)},
        sup_b=sup_b, sup_db_dw=sup_db, sup_dsigma_dw=sup_dsig,
        checks=checks, passed=all(checks.values()))
