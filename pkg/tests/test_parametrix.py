import numpy as np
import pytest
from scipy.special import gammaln

import mckean as mk
from mckean import parametrix as px
from mckean.frozen import frozen_density_dx2, frozen_moments
from mckean.simulator import SimulationConfig


CONST_FLOW = mk.ScalarFlow.constant(0.0, 1.0, 0.0, 0.0)


def coarse_grid(t, x, s, lam, gamma):
    return px.SpaceTimeGrid.build(t, x, s, lam, gamma, n_time=33,
                                  points_per_std=20)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def test_constants_first_value_is_base():
    cons = px.constants(0.7, 0.5, 10)
    assert cons.value(1) == pytest.approx(0.7, rel=1e-15)


def test_constants_order_two_gamma_one():
    # beta(1/2, 1/2) = pi through the Gamma identity
    cons = px.constants(1.0, 1.0, 3)
    assert cons.value(2) == pytest.approx(np.pi, abs=1e-12)
    assert cons.value(3) == pytest.approx(2.0 * np.pi, rel=1e-12)


def test_constants_recursion_ratios():
    cons = px.constants(1.3, 0.5, 30)
    for k in range(1, 30):
        ratio = np.exp(cons.log_value(k + 1) - cons.log_value(k))
        want = 1.3 * px.beta_function(k * 0.25, 0.25)
        assert ratio == pytest.approx(want, rel=1e-12)


def test_beta_function_identity():
    assert px.beta_function(0.5, 0.5) == pytest.approx(np.pi, abs=1e-12)
    assert px.beta_function(1.0, 0.5) == pytest.approx(2.0, rel=1e-13)


def test_asymptotic_anchored_at_threshold():
    for gamma in (0.5, 1.0):
        K = px.asymptotic_threshold(gamma)
        cons = px.constants(1.0, gamma, K)
        got = px.constants_asymptotic(1.0, gamma, K)
        assert got == pytest.approx(cons.value(K), rel=1e-12)


def test_asymptotic_upper_bounds_recursion():
    cons = px.constants(1.0, 1.0, 12)
    got = px.constants_asymptotic(1.0, 1.0, 10)
    assert got >= cons.value(10)


def test_asymptotic_below_threshold_raises():
    with pytest.raises(ValueError):
        px.constants_asymptotic(1.0, 0.5, 3)


def test_weighted_series_converges_numerically():
    # sum C_k T^(k gamma / 2) at T = 0.5: term ratios fall below one and
    # partial sums stabilise
    T, gamma = 0.5, 1.0
    cons = px.constants(1.0, gamma, 200)
    log_terms = cons.log_values + np.arange(1, 201) * (gamma / 2.0) * np.log(T)
    ratios = np.exp(np.diff(log_terms))
    assert np.all(ratios[20:] < 1.0)
    terms = np.exp(log_terms)
    partial = np.cumsum(terms)
    assert abs(partial[-1] - partial[-50]) <= 1e-10 * partial[-1]


# ---------------------------------------------------------------------------
# kernel and quadrature machinery
# ---------------------------------------------------------------------------

def test_kernel_vanishes_for_space_homogeneous_coefficients():
    coeffs = mk.builtin_problem("gaussian")
    assert px.kernel_H(coeffs, CONST_FLOW, 0.1, -0.4, 0.6, 0.8) == 0.0


def test_kernel_vanishes_at_coinciding_points(hd_problem, hd_flow):
    assert px.kernel_H(hd_problem, hd_flow, 0.1, 0.37, 0.4, 0.37) == 0.0


def test_kernel_matches_independent_composition(hd_problem, hd_flow):
    # zero drift: the kernel is half the diffusion gap times the second
    # backward derivative of the Gaussian frozen at the forward point
    rng = np.random.default_rng(31)
    for _ in range(20):
        sp = rng.uniform(0.0, 0.3)
        s = sp + rng.uniform(0.02, 0.2)
        yp, y = rng.uniform(-1.5, 1.5, 2)
        got = px.kernel_H(hd_problem, hd_flow, sp, yp, s, y)
        params = frozen_moments(hd_problem, hd_flow, [y], sp, s)
        w2 = hd_flow.interp(sp)[1]
        pts = np.array([[y], [yp]])
        sig = hd_problem.sigma(sp, pts, w2)[:, 0, 0]
        expect = 0.5 * (sig[0] ** 2 - sig[1] ** 2) \
            * frozen_density_dx2(params, [yp], [y])
        assert got == pytest.approx(expect, rel=1e-12, abs=1e-300)


def test_sampler_matches_pointwise_kernel(hd_problem, hd_flow):
    sampler = px.make_kernel_sampler(hd_problem, hd_flow)
    mat = sampler(0.05, [-0.2, 0.1], 0.3, [0.0, 0.4])
    for i, yp in enumerate([-0.2, 0.1]):
        for j, y in enumerate([0.0, 0.4]):
            assert mat[i, j] == pytest.approx(
                px.kernel_H(hd_problem, hd_flow, 0.05, yp, 0.3, y), rel=1e-12)


def test_singular_weights_beta_identity():
    # int (s-r)^(q-1) (r-s')^(q-1) dr = (s-s')^(2q-1) beta(q, q)
    for gamma in (0.5, 1.0):
        q = gamma / 2.0
        sp, s = 0.1, 0.6
        nodes = sp + (s - sp) * px.graded_unit_mesh(1025, max(2.0 / gamma, 2.0))
        w = px.singular_time_weights(nodes, q_left=q, q_right=q)
        f = np.zeros_like(nodes)
        f[1:-1] = (s - nodes[1:-1]) ** (q - 1) * (nodes[1:-1] - sp) ** (q - 1)
        want = (s - sp) ** (gamma - 1.0) * px.beta_function(q, q)
        assert abs(float(w @ f) - want) / want <= 1e-6


def test_singular_weights_regular_case_is_trapezoid():
    nodes = np.array([0.0, 0.25, 0.6, 1.0])
    w = px.singular_time_weights(nodes)
    f = nodes ** 2
    assert float(w @ f) == pytest.approx(np.trapezoid(f, nodes), rel=1e-15)


def test_iterate_kernel_zero_stays_zero():
    coeffs = mk.builtin_problem("gaussian")
    grid = coarse_grid(0.0, 0.0, 0.5, coeffs.profile.lam, 1.0)
    sampler = px.make_kernel_sampler(coeffs, CONST_FLOW)
    first = px.kernel_table_first(coeffs, CONST_FLOW, 0.5, 0.0, grid)
    assert np.all(first.values == 0.0)
    second = px.iterate_kernel(first, sampler)
    assert second.k == 2
    assert np.all(second.values == 0.0)


def test_kernel_bound_induction(hd_problem, hd_flow):
    report = mk.check_kernel_bound(hd_problem, hd_flow, 0.5, [0.0],
                                   k_max=3,
                                   grid=coarse_grid(0.0, 0.0, 0.5,
                                                    hd_problem.profile.lam,
                                                    hd_problem.profile.gamma_a))
    assert report.passed
    assert report.constants["C"] > 0
    assert report.max_ratio <= 1.0 + 1e-6


def test_kernel_table_csv(tmp_path, hd_problem, hd_flow):
    grid = px.SpaceTimeGrid.build(0.0, 0.0, 0.4, hd_problem.profile.lam,
                                  hd_problem.profile.gamma_a, n_time=9,
                                  points_per_std=7)
    table = px.kernel_table_first(hd_problem, hd_flow, 0.4, 0.0, grid)
    out = tmp_path / "kernel.csv"
    table.to_csv(out)
    assert out.read_text().splitlines()[0] == "k,s_prime,y_prime,s,y,value"


# ---------------------------------------------------------------------------
# the series itself
# ---------------------------------------------------------------------------

def test_constant_coefficients_reduce_to_frozen_density():
    coeffs = mk.builtin_problem("gaussian")
    grid = coarse_grid(0.0, 0.1, 0.5, coeffs.profile.lam, 1.0)
    ys = np.linspace(-2.0, 2.3, 25)
    for K in range(4):
        for y in ys:
            res = px.parametrix_density(coeffs, CONST_FLOW, 0.0, 0.1, 0.5, y,
                                        K, grid=grid)
            params = frozen_moments(coeffs, CONST_FLOW, [y], 0.0, 0.5)
            exact = mk.frozen_density(params, [0.1], [y])
            assert res.value == pytest.approx(exact, rel=1e-12)
            assert np.all(res.per_order[1:] == 0.0)
            assert res.tail_bound == 0.0


def test_series_normalizes(hd_field):
    assert abs(hd_field.normalization(0) - 1.0) <= 1e-3


def test_series_value_is_order_sum(hd_problem, hd_flow, hd_field):
    res = hd_field.series_at(0.3, 0)
    assert res.value == pytest.approx(float(np.sum(res.per_order)), rel=1e-14)
    assert res.tail_bound >= 0.0
    assert res.K == 3


def test_per_order_decay(hd_field):
    mags = [np.max(np.abs(hd_field.per_order[k, 0, -1])) for k in range(4)]
    assert mags[1] <= 0.25 * mags[0]
    assert mags[2] <= 0.25 * mags[1]
    assert mags[3] <= 0.25 * mags[2]


def test_per_order_decay_trivial_for_homogeneous():
    coeffs = mk.builtin_problem("mean-attract")
    flow = mk.ScalarFlow.constant(0.0, 0.6, 1.0, 0.0)
    fld = mk.density_field(coeffs, flow, 0.0, [0.0], 0.5, 3)
    assert fld.zero_kernel
    assert np.all(fld.per_order[1:] == 0.0)


def test_series_against_simulation_histogram(hd_problem, hd_flow, hd_field):
    # Monte-Carlo oracle on a modest sample: terminal positions of the
    # linear flow started at x versus bin-integrated series values
    n = 50_000
    cfg = SimulationConfig(t=0.0, horizon=0.25, n_steps=128, n_particles=n,
                           seed=99)
    mu = mk.EmpiricalMeasure(np.zeros((n, 1)))
    ens = mk.euler_maruyama(hd_problem, hd_flow, mu, cfg)
    term = ens.paths[:, -1, 0]
    span = 4.0 * np.sqrt(hd_problem.profile.lam * 0.25)
    edges = np.linspace(-span, span, 51)
    hist = np.histogram(term, edges)[0] / n
    bins = hd_field.bin_integrals(edges, 0)
    stderr = np.sqrt(hist * (1.0 - hist) / n)
    assert np.all(np.abs(bins - hist) <= 3.0 * stderr + 1e-3)


def test_two_step_composition(hd_problem, hd_flow):
    # compose through the midpoint and compare with the direct density
    lam, gam = hd_problem.profile.lam, hd_problem.profile.gamma_a
    t, x, r, s = 0.0, 0.0, 0.25, 0.5
    grid_lo = coarse_grid(t, x, r, lam, gam)
    grid_full = coarse_grid(t, x, s, lam, gam)
    direct = mk.density_field(hd_problem, hd_flow, t, [x], s, 3,
                              grid=grid_full)
    for y in (-0.4, 0.3):
        grid_hi = coarse_grid(r, y, s, lam, gam)
        comp = px.two_step_density(hd_problem, hd_flow, t, x, r, s, y, 3,
                                   grid_lo, grid_hi)
        want = direct.series_at(y, 0).value
        assert abs(comp - want) <= 5e-3


def test_series_csv(tmp_path, hd_field):
    res = hd_field.series_at(0.2, 0)
    out = tmp_path / "series.csv"
    res.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "k,s_prime,y_prime,s,y,value"
    assert len(lines) == 1 + 4


def test_grid_guards():
    with pytest.raises(px.GridResolutionError):
        px.SpaceTimeGrid.build(0.0, 0.0, 0.5, 1.5, 0.5, extent_stds=4.0)
    with pytest.raises(px.GridResolutionError):
        px.SpaceTimeGrid.build(0.0, 0.0, 0.5, 1.5, 0.5, n_time=5)


def test_field_rejects_mismatched_grid_span(hd_problem, hd_flow):
    grid = coarse_grid(0.0, 0.0, 0.25, hd_problem.profile.lam,
                       hd_problem.profile.gamma_a)
    with pytest.raises(px.GridResolutionError):
        mk.density_field(hd_problem, hd_flow, 0.0, [0.0], 0.4, 2, grid=grid)


def test_iterate_kernel_rejects_mismatched_grid(hd_problem, hd_flow):
    lam, gam = hd_problem.profile.lam, hd_problem.profile.gamma_a
    grid = coarse_grid(0.0, 0.0, 0.4, lam, gam)
    other = px.SpaceTimeGrid.build(0.0, 0.0, 0.4, lam, gam, n_time=17,
                                   points_per_std=10)
    table = px.kernel_table_first(hd_problem, hd_flow, 0.4, 0.0, grid)
    sampler = px.make_kernel_sampler(hd_problem, hd_flow)
    with pytest.raises(px.GridResolutionError):
        px.iterate_kernel(table, sampler, grid=other)


def test_density_field_batched_consistency(hd_problem, hd_flow):
    grid = coarse_grid(0.0, 0.0, 0.25, hd_problem.profile.lam,
                       hd_problem.profile.gamma_a)
    single = mk.density_field(hd_problem, hd_flow, 0.0, [0.0], 0.25, 2,
                              grid=grid)
    batched = mk.density_field(hd_problem, hd_flow, 0.0, [-0.1, 0.0], 0.25, 2,
                               grid=grid)
    assert np.array_equal(batched.per_order[:, 1], single.per_order[:, 0])


def test_asymptotic_log_slope_drifts():
    # the closed-form envelope replaces each beta factor by its bound
    # 4/(gamma k^(gamma/2)); the per-step gap approaches a nonzero constant,
    # so the log difference grows linearly instead of flattening
    for gamma in (0.5, 1.0):
        K = px.asymptotic_threshold(gamma)
        cons = px.constants(1.0, gamma, 30)
        ks = np.arange(K, 31)
        diff = np.array([cons.log_value(int(k))
                         - px.constants_asymptotic(1.0, gamma, int(k), log=True)
                         for k in ks])
        slope = np.polyfit(ks, diff, 1)[0]
        per_step = (float(gammaln(15 * gamma / 2) + gammaln(gamma / 2)
                          - gammaln((15 + 1) * gamma / 2))
                    - np.log(4.0 / (gamma * 16 ** (gamma / 2.0))))
        assert slope < -0.3
        assert per_step < -0.3
