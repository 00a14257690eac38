"""Numerics for McKean-Vlasov dynamics with Holder coefficients.

Particle simulation with fixed-point law flows, frozen-coefficient Gaussian
densities, the parametrix series for the true transition density, Lions
derivatives of moment functionals, and the quantitative checks tying them
together.
"""

from .model import (CoefficientSet, RegularityProfile, AssumptionReport,
                    builtin_problem, validate_assumptions, REGISTRY_NAMES)
from .measure import (EmpiricalMeasure, ScalarFlow, LionsDerivativeEstimate,
                      moment, wasserstein2_1d, lions_derivative_linear,
                      lions_derivative_flow)
from .simulator import (SimulationConfig, PathEnsemble, PicardReport,
                        euler_maruyama, picard_iterate, simulate_mkv,
                        mkv_terminal_sampler)
from .frozen import (FrozenParams, GaussianMajorant, frozen_moments,
                     frozen_density, frozen_density_dx, frozen_density_dx2,
                     majorant, frozen_mu_moment_derivative)
from .parametrix import (SpaceTimeGrid, SeriesResult, ParametrixConstants,
                         KernelTable, kernel_H, iterate_kernel,
                         make_kernel_sampler, kernel_iterates,
                         parametrix_density, density_field, constants,
                         constants_asymptotic, beta_function)
from .estimates import (ExponentFit, BoundReport, UGradientFits,
                        mu_derivative_scan, scan_estimates, feynman_kac_u,
                        parametrix_u, u_gradient_bounds,
                        check_gaussian_domination, check_kernel_bound,
                        frozen_domination_report, series_domination_report,
                        bounded_source, fit_exponent, smoothing_floor)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
