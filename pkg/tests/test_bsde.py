import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpbsde.bsde import (
    BsdeProblem,
    SolverConfig,
    paired_stderr,
    picard_contraction_report,
    price_under_P,
    solve_backward,
)
from jumpbsde.errors import PicardDiverged, RegressionSingular
from jumpbsde.girsanov import MeasureTilt, stochastic_exponential
from jumpbsde.paths import DiffusionSpec, JumpSpec, build_grid, simulate_paths
from jumpbsde.regression import Projection, monomial_exponents


def ones(x):
    return np.ones(x.shape[0])


def zeros(x):
    return np.zeros(x.shape[0])


def first(x):
    return x[:, 0].copy()


@pytest.fixture(scope="module")
def gbm_bundle():
    diff = DiffusionSpec.geometric(100.0, 0.06, 0.2)
    return simulate_paths(diff, JumpSpec.none(), build_grid(0, 1, 50), 50_000, 21)


@pytest.fixture(scope="module")
def flat_bundle():
    return simulate_paths(DiffusionSpec.constant([0.0], 0, 0.3), JumpSpec.none(), build_grid(0, 1, 100), 100_000, 22)


# --- regression ----------------------------------------------------------------


def test_monomial_count():
    assert len(monomial_exponents(2, 2)) == 5
    assert len(monomial_exponents(3, 3)) == 19


def test_projection_reproduces_quadratics():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 2)) * [3.0, 0.1] + [50.0, -2.0]
    y = 2 + x[:, 0] - 0.5 * x[:, 1] ** 2 + x[:, 0] * x[:, 1]
    assert np.allclose(Projection(x, 2).fit(y), y, rtol=1e-7, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), degree=st.integers(0, 3), n=st.integers(20, 300))
def test_projection_keeps_sample_mean(seed, degree, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = np.exp(x[:, 0]) + rng.normal(size=n)
    fitted = Projection(x, degree).fit(y)
    assert fitted.mean() == pytest.approx(y.mean(), abs=1e-10 * (1 + abs(y).max()))


def test_projection_constant_state_is_mean():
    x = np.full((10, 2), 4.6)
    y = np.arange(10.0)
    assert np.all(Projection(x, 2).fit(y) == 4.5)


def test_projection_too_few_samples():
    with pytest.raises(RegressionSingular):
        Projection(np.random.default_rng(1).normal(size=(5, 2)), 2)


# --- solve_backward examples -------------------------------------------------------


def test_discounted_unit_claim(flat_bundle):
    s = solve_backward(BsdeProblem(ones, discount=0.05), flat_bundle)
    assert s.y0 == pytest.approx(math.exp(-0.05), rel=5e-3)
    assert s.gaps == (0.0,)


def test_constant_driver_is_exact(flat_bundle):
    s = solve_backward(BsdeProblem(zeros, driver=lambda t, x, y, z, u: np.full(x.shape[0], 0.7)), flat_bundle)
    nodes = flat_bundle.grid.nodes
    assert np.allclose(s.Y, 0.7 * (1.0 - nodes), atol=1e-12)


def test_collateral_equal_value_kills_driver(flat_bundle):
    rf, rc = 0.08, 0.03

    def spread_driver(t, x, y, z, u):
        c = y  # collateral equal to value
        return (rf - rc) * (c - y)

    s = solve_backward(BsdeProblem(ones, driver=spread_driver, discount=rc), flat_bundle)
    assert s.y0 == pytest.approx(0.970446, rel=5e-3)


def test_terminal_values_exact(gbm_bundle):
    s = solve_backward(BsdeProblem(lambda x: np.maximum(x[:, 0] - 100, 0), discount=0.02), gbm_bundle)
    assert np.array_equal(s.Y[:, -1], np.maximum(gbm_bundle.states[:, -1, 0] - 100, 0))
    assert math.isfinite(s.y0) and s.stderr > 0
    assert s.Z.shape == (gbm_bundle.n_paths, 50, 1) and s.U.shape == (gbm_bundle.n_paths, 50, 0)


def test_z_matches_delta_of_linear_claim():
    # the slope of Y_1 on X_1 is noisy when X_1 barely moves, so keep steps coarse
    b = simulate_paths(DiffusionSpec.constant([0.0], 0, 0.3), JumpSpec.none(), build_grid(0, 1, 10), 100_000, 27)
    s = solve_backward(BsdeProblem(first), b)
    assert s.Z[:, 0, 0].mean() == pytest.approx(0.3, rel=0.05)


def test_linear_driver_variation_of_constants(flat_bundle):
    a = lambda t: 0.1 * t  # noqa: E731
    b, alpha = 0.02, 0.05

    def driver(t, x, y, z, u):
        return a(t) + b * y

    s = solve_backward(BsdeProblem(lambda x: 1.0 + x[:, 0], driver=driver, discount=alpha), flat_bundle)
    k = b - alpha
    # E[g] = 1 since X is a driftless martingale started at 0
    exact = math.exp(k) + 0.1 * (math.exp(k) - 1 - k) / k**2
    assert s.y0 == pytest.approx(exact, rel=0.01)


@pytest.mark.parametrize("driver", [
    None,
    lambda t, x, y, z, u: 0.05 * y,
    lambda t, x, y, z, u: 0.03 * np.maximum(y, 0.0) - 0.01,
])
def test_comparison_monotone_in_terminal(gbm_bundle, driver):
    g = lambda x: np.maximum(x[:, 0] - 100, 0)  # noqa: E731
    lo = solve_backward(BsdeProblem(g, driver=driver, discount=0.02), gbm_bundle).y0
    hi = solve_backward(BsdeProblem(lambda x: g(x) + 0.1, driver=driver, discount=0.02), gbm_bundle).y0
    assert hi >= lo


def test_jump_control_matches_jump_size():
    # X = compensated Poisson with size 0.2: Y = X, so U = 0.2 per jump
    g = build_grid(0, 1, 20)
    b = simulate_paths(DiffusionSpec.constant([0.0], 0, 0), JumpSpec.poisson(3.0, 0.2), g, 50_000, 23)
    s = solve_backward(BsdeProblem(first), b)
    assert s.U[:, 0, 0].mean() == pytest.approx(0.2, rel=0.05)


def test_jump_tilt_term_is_priced():
    # Y = E^P2[X_T] with the jump intensity tilted by 1 + delta
    lam, z, delta = 2.0, 0.1, 0.5
    g = build_grid(0, 1, 50)
    b = simulate_paths(DiffusionSpec.constant([0.0], 0, 0), JumpSpec.poisson(lam, z), g, 50_000, 24)
    s = solve_backward(BsdeProblem(first, tilt=MeasureTilt.constant(delta=delta)), b)
    assert s.y0 == pytest.approx(z * delta * lam, rel=0.05)


# --- price_under_P -------------------------------------------------------------


def test_weighted_constant_claim(gbm_bundle):
    tilt = MeasureTilt.constant(-0.2)
    h = stochastic_exponential(MeasureTilt(), gbm_bundle)
    s = price_under_P(BsdeProblem(lambda x: np.full(x.shape[0], 3.0), tilt=tilt), gbm_bundle, h)
    assert s.y0 == 3.0


def test_weighted_asset_is_martingale(gbm_bundle):
    theta = (0.06 - 0.02) / 0.2
    tilt = MeasureTilt.constant(-theta)
    h = stochastic_exponential(tilt, gbm_bundle)
    s = price_under_P(BsdeProblem(first, discount=0.02, tilt=tilt), gbm_bundle, h)
    assert s.y0 == pytest.approx(100.0, rel=0.01)


def test_weighted_matches_tilted_backward_solve():
    diff = DiffusionSpec.geometric(100.0, 0.06, 0.2)
    g = build_grid(0, 1, 50)
    tilt = MeasureTilt.constant(-0.2, label="P->Q")
    bp = simulate_paths(diff, JumpSpec.none(), g, 50_000, 25)
    bq = simulate_paths(diff, JumpSpec.none(), g, 50_000, 25, tilt=tilt)
    payoff = BsdeProblem(lambda x: np.maximum(x[:, 0] - 100, 0), discount=0.02, tilt=tilt)
    a = price_under_P(payoff, bp, stochastic_exponential(tilt, bp))
    b = solve_backward(payoff.without_tilt(), bq)
    assert abs(a.y0 - b.y0) <= 2 * paired_stderr(a, b)


def test_weighted_with_nonlinear_driver_matches_tilted():
    diff = DiffusionSpec.geometric(100.0, 0.06, 0.2)
    g = build_grid(0, 1, 50)
    tilt = MeasureTilt.constant(-0.2)
    bp = simulate_paths(diff, JumpSpec.none(), g, 50_000, 26)
    bq = simulate_paths(diff, JumpSpec.none(), g, 50_000, 26, tilt=tilt)
    drv = lambda t, x, y, z, u: 0.03 * np.maximum(y, 0)  # noqa: E731
    p = BsdeProblem(lambda x: np.maximum(x[:, 0] - 100, 0), driver=drv, discount=0.05, tilt=tilt)
    a = price_under_P(p, bp, stochastic_exponential(tilt, bp))
    b = solve_backward(p.without_tilt(), bq)
    assert abs(a.y0 - b.y0) <= 2 * paired_stderr(a, b)


def test_density_shape_mismatch(gbm_bundle, flat_bundle):
    with pytest.raises(ValueError):
        price_under_P(BsdeProblem(ones), gbm_bundle, stochastic_exponential(MeasureTilt(), flat_bundle))


# --- Picard ----------------------------------------------------------------------


def test_zero_driver_converges_in_one(flat_bundle):
    rep = picard_contraction_report(BsdeProblem(ones, discount=0.05), flat_bundle)
    assert len(rep) == 1 and rep.converged


def test_linear_driver_contracts(gbm_bundle):
    p = BsdeProblem(lambda x: np.maximum(x[:, 0] - 100, 0), driver=lambda t, x, y, z, u: 0.5 * y, discount=0.02)
    rep = picard_contraction_report(p, gbm_bundle, SolverConfig(picard_tol=1e-12))
    assert rep.converged and len(rep) >= 3
    assert rep.contracting_after(2)


def test_strong_coupling_diverges():
    b = simulate_paths(DiffusionSpec.geometric(100.0, 0.06, 0.2), JumpSpec.none(), build_grid(0, 1, 50), 2000, 28)
    p = BsdeProblem(ones, driver=lambda t, x, y, z, u: 50.0 * y)
    rep = picard_contraction_report(p, b)
    assert not rep.converged and not rep.contracting_after(2)
    with pytest.raises(PicardDiverged) as err:
        solve_backward(p, b)
    assert len(err.value.history) == 20


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(basis_degree=-1)
    with pytest.raises(ValueError):
        SolverConfig(picard_tol=0.0)


def test_clip_bounds_surface(gbm_bundle):
    s = solve_backward(BsdeProblem(first, discount=0.02), gbm_bundle, SolverConfig(clip=(0.0, 105.0)))
    assert s.Y[:, :-1].max() <= 105.0


def test_state_dependent_discount(flat_bundle):
    p = BsdeProblem(ones, discount=lambda t, x: np.full(x.shape[0], 0.05))
    assert solve_backward(p, flat_bundle).y0 == pytest.approx(math.exp(-0.05), rel=1e-12)
