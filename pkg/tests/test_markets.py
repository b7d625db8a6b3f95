import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jumpbsde.bsde import BsdeProblem, SolverConfig, ValueSurface, solve_backward
from jumpbsde.errors import (
    InvalidMarket,
    InvalidNumeraire,
    SingularVolatility,
    UnsupportedConfiguration,
)
from jumpbsde.girsanov import MeasureTilt, stochastic_exponential
from jumpbsde.markets import (
    CollateralSpec,
    MarketSpec,
    build_collateral_bsde,
    change_numeraire,
    discounted_cum_dividend,
    exchange_option_numeraire_price,
    extract_hedge,
    gop_path,
    make_contract,
    market_tilt,
    numeraire_tilt,
    price,
    price_P,
    price_Q,
    pure_jump_market_price,
    real_world_price,
)
from jumpbsde.oracles import margrabe
from jumpbsde.paths import build_grid


@pytest.fixture(scope="module")
def gbm():
    return MarketSpec(s0=100.0, mu=0.08, sigma=0.2, r=0.02)


@pytest.fixture(scope="module")
def gbm_bundles(gbm):
    g = build_grid(0, 1, 25)
    return gbm.simulate("P", g, 40_000, 31), gbm.simulate("Q", g, 40_000, 31)


@pytest.fixture(scope="module")
def exch():
    return MarketSpec.two_asset([100.0, 100.0], [0.07, 0.05], [0.2, 0.3], 0.5, r=0.02)


@pytest.fixture(scope="module")
def jump_market():
    return MarketSpec(s0=1.0, mu=0.05, sigma=0.0, r=0.01, jump_size=0.1, jump_intensity=2.0)


# --- market validation -------------------------------------------------------------


def test_market_validation():
    with pytest.raises(InvalidMarket):
        MarketSpec(s0=-1.0, mu=0.05, sigma=0.2, r=0.01)
    with pytest.raises(InvalidMarket):
        MarketSpec(s0=1.0, mu=0.05, sigma=-0.2, r=0.01)
    with pytest.raises(InvalidMarket):
        MarketSpec(s0=1.0, mu=0.05, sigma=0.2, r=2.0)
    with pytest.raises(InvalidMarket):
        MarketSpec(s0=[1.0, 1.0], mu=0.05, sigma=0.2, r=0.01, corr_chol=[[1, 0], [0.5, 0.5]])
    with pytest.raises(InvalidMarket):
        MarketSpec.two_asset([1, 1], 0.05, 0.2, 1.2, r=0.01)
    with pytest.raises(UnsupportedConfiguration):
        MarketSpec(s0=1.0, mu=0.05, sigma=0.2, r=0.01, jump_size=0.1, jump_intensity=2.0)


def test_defaults_fill_rates():
    m = MarketSpec(s0=[1, 2], mu=0.05, sigma=[0.2, 0.3], r=0.01)
    assert np.all(m.r_repo == 0.01) and np.all(m.k == 0.0)
    assert m.r_cl == m.r_cb == 0.01 and m.d == 2


# --- collateral --------------------------------------------------------------------


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)), st.floats(-2, 2))
def test_collateral_split(v, kappa):
    cp, cm = CollateralSpec.fraction(kappa).split(v)
    assert np.array_equal(cp - cm, kappa * v)
    assert np.all(cp * cm == 0) and np.all(cp >= 0) and np.all(cm >= 0)


def test_no_collateral_is_discounting(gbm, gbm_bundles):
    _, bq = gbm_bundles
    p = build_collateral_bsde(gbm, make_contract("constant", value=1.0), CollateralSpec.none(), "Q")
    assert p.driver is None and p.discount == 0.02
    q = price_Q(gbm, make_contract("constant", value=1.0), CollateralSpec.none(), bq)
    assert q.y0 == pytest.approx(math.exp(-0.02), rel=1e-12)


def test_full_collateral_discounts_at_collateral_rate():
    m = MarketSpec(s0=100.0, mu=0.08, sigma=0.2, r=0.05, r_cl=0.03, r_cb=0.03)
    bq = m.simulate("Q", build_grid(0, 1, 50), 10_000, 32)
    q = price_Q(m, make_contract("constant", value=1.0), CollateralSpec.full(), bq)
    assert q.y0 == pytest.approx(0.970446, rel=5e-3)


@pytest.mark.parametrize("coll", [CollateralSpec.none(), CollateralSpec.full(), CollateralSpec.fraction(0.5)])
def test_collateralized_call_agrees_across_measures(coll):
    m = MarketSpec(s0=100.0, mu=0.08, sigma=0.2, r=0.05, r_cl=0.01, r_cb=0.03)
    g = build_grid(0, 1, 25)
    bp, bq = m.simulate("P", g, 40_000, 33), m.simulate("Q", g, 40_000, 33)
    call = make_contract("call", strike=100.0)
    a, b = price_P(m, call, coll, bp), price_Q(m, call, coll, bq)
    assert abs(a.y0 - b.y0) <= 2 * a.paired_stderr(b)


def test_measure_gap_is_standard_normal_across_seeds():
    # the P and Q estimators are both unbiased, so the paired z-score should look N(0, 1)
    m = MarketSpec(s0=100.0, mu=0.06, sigma=0.2, r=0.02, k=0.01)
    call = make_contract("call", strike=100.0)
    g = build_grid(0, 1, 5)
    zs = []
    for seed in range(900, 924):
        a = price_P(m, call, CollateralSpec.none(), m.simulate("P", g, 20_000, seed))
        b = price_Q(m, call, CollateralSpec.none(), m.simulate("Q", g, 20_000, seed))
        zs.append((a.y0 - b.y0) / a.paired_stderr(b))
    zs = np.array(zs)
    assert abs(zs.mean()) < 3 / math.sqrt(zs.size)
    assert 0.6 < zs.std() < 1.4


def test_wrong_bundle_rejected(gbm, gbm_bundles):
    bp, bq = gbm_bundles
    call = make_contract("call", strike=100.0)
    with pytest.raises(ValueError):
        price_Q(gbm, call, CollateralSpec.none(), bp)
    with pytest.raises(ValueError):
        price_P(gbm, make_contract("call", maturity=2.0, strike=100.0), CollateralSpec.none(), bp)


# --- hedge ---------------------------------------------------------------------------


def _surface(z, n_assets=1):
    n, N = z.shape[:2]
    return ValueSurface(np.zeros((n, N + 1)), z, np.zeros((n, N, 0)), 0.0, 0.0, np.zeros(n), (0.0,))


def test_hedge_zero_control(gbm, gbm_bundles):
    bp, _ = gbm_bundles
    h = extract_hedge(_surface(np.zeros((bp.n_paths, 25, 1))), gbm, bp)
    assert np.all(h.xi == 0) and np.all(h.psi == 0)


def test_hedge_scalar_inversion(gbm, gbm_bundles):
    bp, _ = gbm_bundles
    z = np.full((bp.n_paths, 25, 1), 2.0)
    h = extract_hedge(_surface(z), gbm, bp)
    s = np.exp(bp.states[:, :25])
    assert np.allclose(h.xi * s * 0.2, 2.0, rtol=1e-13)
    assert h.xi[0, 0, 0] == pytest.approx(0.1, rel=1e-13)


def test_repo_constraint(exch):
    g = build_grid(0, 1, 10)
    bq = exch.simulate("Q", g, 2000, 34)
    s = solve_backward(build_collateral_bsde(exch, make_contract("exchange"), CollateralSpec.none()), bq)
    h = extract_hedge(s, exch, bq)
    repo = np.exp(np.outer(g.nodes[:10], exch.r_repo))
    held = h.xi * np.exp(bq.states[:, :10])
    assert np.max(np.abs(h.psi * repo + held) / np.maximum(np.abs(held), 1e-300)) <= 1e-12


def test_hedge_singular():
    m = MarketSpec.two_asset([1, 1], 0.05, [0.2, 0.3], 1.0, r=0.01)
    b = m.simulate("Q", build_grid(0, 1, 4), 10, 1)
    with pytest.raises(SingularVolatility):
        extract_hedge(_surface(np.ones((10, 4, 2))), m, b)


def test_call_delta_is_positive(gbm, gbm_bundles):
    _, bq = gbm_bundles
    q = price_Q(gbm, make_contract("call", strike=100.0), CollateralSpec.none(), bq)
    xi = extract_hedge(q.surface, gbm, bq).xi[:, 0, 0]
    # Black-Scholes delta at the money with r = 0.02, sigma = 0.2
    assert xi.mean() == pytest.approx(0.5793, abs=0.03)


# --- GOP -----------------------------------------------------------------------------


def test_gop_is_bank_without_risk_premium():
    m = MarketSpec(s0=100.0, mu=0.03, sigma=0.2, r=0.03)
    b = m.simulate("P", build_grid(0, 1, 10), 50, 35)
    assert np.allclose(gop_path(m, b), np.exp(0.03 * b.grid.nodes), rtol=1e-14)


def test_gop_closed_form_at_zero_brownian():
    m = MarketSpec(s0=100.0, mu=0.07, sigma=0.2, r=0.02)
    b = m.simulate("P", build_grid(0, 1, 10), 2, 36)
    raw = np.array(b.dW_raw)
    raw[0] -= raw[0].mean(axis=0)  # W_T = 0 on the first path
    b0 = type(b)(b.grid, b.n_paths, b.seed, raw, b.jump_counts, b.states, b.corr_chol, b.jump_sizes, b.jump_rates,
                 b.measure)
    assert gop_path(m, b0)[0, -1] == pytest.approx(1.052589, abs=5e-6)
    assert gop_path(m, b0)[0, -1] == pytest.approx(math.exp(0.02 + 0.03125), rel=1e-13)


def test_gop_density_identity(exch):
    g = build_grid(0, 1, 20)
    b = exch.simulate("P", g, 2000, 37)
    gop = gop_path(exch, b)
    tilt = market_tilt(exch)
    for k in (0, 7, 19):
        dens = stochastic_exponential(tilt, b, g.nodes[k], 1.0).terminal
        lhs = math.exp(-exch.r * (1.0 - g.nodes[k])) * dens
        rhs = gop[:, k] / gop[:, -1]
        assert np.max(np.abs(lhs / rhs - 1)) <= 1e-10


def test_real_world_price_matches_density_price(gbm, gbm_bundles):
    bp, bq = gbm_bundles
    call = make_contract("call", strike=100.0)
    for coll in (CollateralSpec.none(), CollateralSpec.fraction(0.5)):
        a = price_P(gbm, call, coll, bp)
        w = real_world_price(gbm, call, coll, bp)
        assert abs(w.y0 - a.y0) <= 1e-10 * abs(a.y0)
    q = price_Q(gbm, call, CollateralSpec.none(), bq)
    w = real_world_price(gbm, call, CollateralSpec.none(), bp)
    assert abs(w.y0 - q.y0) <= 2 * w.paired_stderr(q)


def test_real_world_without_premium_is_discounted_mean():
    m = MarketSpec(s0=100.0, mu=0.03, sigma=0.2, r=0.03)
    b = m.simulate("P", build_grid(0, 1, 10), 20_000, 38)
    w = real_world_price(m, make_contract("identity"), CollateralSpec.none(), b)
    assert w.y0 == pytest.approx(math.exp(-0.03) * np.exp(b.states[:, -1, 0]).mean(), rel=1e-12)


# --- cum-dividend martingale -------------------------------------------------------


def test_cum_dividend_is_q_martingale():
    m = MarketSpec.two_asset([100.0, 50.0], [0.07, 0.05], [0.2, 0.3], 0.4, r=0.02, r_repo=[0.03, 0.01],
                             k=[0.02, 0.01])
    b = m.simulate("Q", build_grid(0, 1, 20), 50_000, 39)
    inc = np.diff(discounted_cum_dividend(m, b), axis=1)
    mean = inc.mean(axis=0)
    se = inc.std(axis=0) / math.sqrt(b.n_paths)
    # left-point dividend accrual leaves an O(dt^2) bias per step
    assert np.all(np.abs(mean) <= 4 * se + 1e-3 * m.s0 * b.dt**2)


# --- exchange option and numeraire change ----------------------------------------------


def test_bank_numeraire_is_identity(exch):
    p = build_collateral_bsde(exch, make_contract("exchange"), CollateralSpec.none())
    q, tilt = change_numeraire(p, exch, "bank")
    assert q is p and tilt.is_identity


def test_numeraire_density_is_price_ratio(exch):
    g = build_grid(0, 1, 20)
    bq = exch.simulate("Q", g, 1000, 40)
    h = stochastic_exponential(numeraire_tilt(exch, 1), bq)
    s = np.exp(bq.states[:, :, 1])
    ratio = (s / np.exp(exch.r * g.nodes)) / exch.s0[1]
    assert np.max(np.abs(h.values / ratio - 1)) <= 1e-10


def test_numeraire_price_invariance_on_linear_claim(exch):
    g = build_grid(0, 1, 20)
    lin = make_contract("identity", asset=0)
    bq = exch.simulate("Q", g, 40_000, 41)
    bn = exch.simulate("numeraire:1", g, 40_000, 41)
    a = price(exch, lin, CollateralSpec.none(), "Q", bq)
    b = price(exch, lin, CollateralSpec.none(), "numeraire:1", bn)
    assert abs(a.y0 - b.y0) <= 2 * a.paired_stderr(b)
    assert b.y0 == pytest.approx(100.0, rel=0.01)


@pytest.mark.parametrize("coll", [CollateralSpec.none(), CollateralSpec.full()])
def test_exchange_option_near_margrabe(exch, coll):
    bn = exch.simulate("numeraire:1", build_grid(0, 1, 20), 50_000, 42)
    q = exchange_option_numeraire_price(exch, coll, bn)
    assert q.y0 == pytest.approx(margrabe(100, 100, 0.2, 0.3, 0.5, 1.0), rel=0.01)


def test_exchange_of_identical_assets_is_zero():
    m = MarketSpec.two_asset([100.0, 100.0], 0.05, [0.2, 0.2], 1.0, r=0.02)
    bn = m.simulate("numeraire:1", build_grid(0, 1, 10), 5000, 43)
    assert abs(exchange_option_numeraire_price(m, CollateralSpec.none(), bn).y0) < 1e-10


def test_numeraire_errors(exch):
    p = build_collateral_bsde(exch, make_contract("exchange"), CollateralSpec.none())
    with pytest.raises(InvalidNumeraire):
        change_numeraire(p, exch, 2)
    with pytest.raises(InvalidNumeraire):
        change_numeraire(p, MarketSpec(s0=[1, 1], mu=0.05, sigma=0.2, r=0.01, k=[0.0, 0.02]), 1)
    with pytest.raises(UnsupportedConfiguration):
        change_numeraire(p, MarketSpec(s0=[1, 1], mu=0.05, sigma=0.2, r=0.01, r_repo=[0.01, 0.02]), 1)
    with pytest.raises(UnsupportedConfiguration):
        change_numeraire(BsdeProblem(p.terminal, tilt=MeasureTilt.constant([0.1, 0.0])), exch, 1)
    single = MarketSpec(s0=1.0, mu=0.05, sigma=0.2, r=0.01)
    with pytest.raises(UnsupportedConfiguration):
        exchange_option_numeraire_price(single, CollateralSpec.none(), single.simulate("Q", build_grid(0, 1, 2), 4, 1))


# --- pure-jump market --------------------------------------------------------------


def test_pure_jump_asset_is_discounted_martingale(jump_market):
    bq = jump_market.simulate("Q", build_grid(0, 1, 50), 50_000, 44)
    q = pure_jump_market_price(jump_market, make_contract("identity"), CollateralSpec.none(), bq)
    assert q.y0 == pytest.approx(1.0, rel=0.01)


def test_pure_jump_unit_claim(jump_market):
    bq = jump_market.simulate("Q", build_grid(0, 1, 20), 5000, 45)
    q = pure_jump_market_price(jump_market, make_contract("constant"), CollateralSpec.none(), bq)
    assert q.y0 == pytest.approx(0.990050, rel=5e-3)


def test_pure_jump_p_equals_q_without_premium():
    m = MarketSpec(s0=1.0, mu=0.01, sigma=0.0, r=0.01, jump_size=0.1, jump_intensity=2.0)
    g = build_grid(0, 1, 20)
    bp, bq = m.simulate("P", g, 20_000, 46), m.simulate("Q", g, 20_000, 46)
    call = make_contract("call", strike=1.0)
    a = pure_jump_market_price(m, call, CollateralSpec.none(), bp, measure="P")
    b = pure_jump_market_price(m, call, CollateralSpec.none(), bq, measure="Q")
    assert abs(a.y0 - b.y0) <= 1e-10


def test_pure_jump_call_agrees_across_measures(jump_market):
    g = build_grid(0, 1, 50)
    bp, bq = jump_market.simulate("P", g, 50_000, 47), jump_market.simulate("Q", g, 50_000, 47)
    call = make_contract("call", strike=1.0)
    a = pure_jump_market_price(jump_market, call, CollateralSpec.none(), bp, measure="P")
    b = pure_jump_market_price(jump_market, call, CollateralSpec.none(), bq, measure="Q")
    assert abs(a.y0 - b.y0) <= 2 * a.paired_stderr(b)


def test_pure_jump_rejects_diffusion_market(gbm, gbm_bundles):
    with pytest.raises(UnsupportedConfiguration):
        pure_jump_market_price(gbm, make_contract("constant"), CollateralSpec.none(), gbm_bundles[1])


def test_price_dispatch_rejects_unknown(gbm, gbm_bundles):
    with pytest.raises(ValueError):
        price(gbm, make_contract("constant"), CollateralSpec.none(), "R", gbm_bundles[0])
    with pytest.raises(ValueError):
        make_contract("swaption")
