from __future__ import annotations

import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepm.backtest import (
    METRIC_COLUMNS,
    Metrics,
    asset_cost,
    cagr,
    compute_metrics,
    cost_bps,
    hac_tstat,
    holding_period,
    max_drawdown,
    newey_west_lags,
    read_metric_table,
    rescale_to_vol,
    sharpe,
    simulate,
    universe_costs,
    write_metric_table,
)
from deepm.graph import load_universe


@pytest.fixture(scope="module")
def universe():
    return {m.ticker: m for m in load_universe()}


# -------------------------------------------------------------------- costs


def test_palladium_and_orange_juice(universe):
    assert cost_bps(universe["PA"].struct_bps, universe["PA"].liquidity_scalar) == 6.0
    assert cost_bps(universe["JO"].struct_bps, universe["JO"].liquidity_scalar) == 15.0
    assert asset_cost(universe["PA"]) == pytest.approx(6e-4, rel=1e-15)


def test_nasdaq_hits_floor(universe):
    en = universe["EN"]
    assert en.struct_bps < 0.25
    assert cost_bps(en.struct_bps, en.liquidity_scalar) == 0.25


def test_every_final_entry_reproduced(universe):
    for m in universe.values():
        assert cost_bps(m.struct_bps, m.liquidity_scalar) == m.final_bps, m.ticker
    np.testing.assert_array_equal(universe_costs(list(universe.values()), override=False),
                                  universe_costs(list(universe.values()), override=True))


def test_cost_inputs_validated():
    with pytest.raises(ValueError):
        cost_bps(0.0, 1.0)
    with pytest.raises(ValueError):
        cost_bps(1.0, 0.4)


# ----------------------------------------------------------------- simulate


def test_hand_ledger_three_days_two_assets():
    p = np.array([[0.5, 1.0, -0.5], [1.0, 1.0, 0.0]])
    sigma = np.array([[0.1, 0.2, 0.1], [0.2, 0.2, 0.4]])
    y = np.array([[0.1, -0.2, 0.3], [0.05, 0.1, -0.4]])
    costs = np.array([1e-3, 2e-3])
    rep = simulate(p, y, sigma, costs, np.ones((2, 3), bool), eps=0.0)
    # notionals 5,5,-5 and 5,5,0; absolute changes 5,0,10 and 5,0,5
    np.testing.assert_allclose(rep.notionals, [[5, 5, -5], [5, 5, 0]], atol=1e-12)
    np.testing.assert_allclose(rep.gross, [0.05, -0.05, -0.075], atol=1e-12)
    np.testing.assert_allclose(rep.cost, [0.0075, 0.0, 0.01], atol=1e-12)
    np.testing.assert_allclose(rep.net, [0.0425, -0.05, -0.085], atol=1e-12)
    np.testing.assert_allclose(rep.turnover, [5.0, 0.0, 7.5], atol=1e-12)


def test_exit_into_mask_is_charged_and_averaged_over_live():
    p = np.array([[1.0, 1.0], [1.0, 0.0]])
    mask = np.array([[True, True], [True, False]])
    rep = simulate(p, np.ones((2, 2)), np.ones((2, 2)), np.array([1e-3, 1e-3]), mask, eps=0.0)
    np.testing.assert_array_equal(rep.n_live, [2, 1])
    assert rep.cost[1] == pytest.approx(1e-3)  # asset 1 exit over one live asset
    assert rep.gross[1] == pytest.approx(1.0)


def test_masked_position_rejected():
    mask = np.array([[True, False]])
    with pytest.raises(ValueError, match="masked asset"):
        simulate(np.array([[1.0, 0.5]]), np.zeros((1, 2)), np.ones((1, 2)), np.zeros(1), mask)


@given(
    arrays(np.float64, (3, 12), elements=st.floats(-2, 2)),
    arrays(np.float64, (3, 12), elements=st.floats(-3, 3)),
    arrays(np.float64, (3, 12), elements=st.floats(0.05, 1.0)),
    st.floats(0, 1),
)
def test_ledger_identity_and_cost_monotone(p, y, sigma, gamma):
    costs = np.array([1e-4, 5e-4, 1e-3])
    mask = np.ones_like(p, dtype=bool)
    rep = simulate(p, y, sigma, costs, mask, gamma_eval=gamma)
    np.testing.assert_allclose(rep.net, rep.gross - rep.cost, atol=1e-15)
    assert np.all(rep.cost >= 0)
    higher = simulate(p, y, sigma, 2 * costs, mask, gamma_eval=gamma)
    assert np.all(higher.cost >= rep.cost)
    np.testing.assert_array_equal(higher.gross, rep.gross)


# ------------------------------------------------------------------ metrics


def test_hac_lag_zero_is_plain_t(rng):
    r = rng.normal(0.001, 0.01, 500)
    plain = r.mean() / (r.std(ddof=1) / math.sqrt(len(r)))
    assert hac_tstat(r, lags=0) == pytest.approx(plain, rel=1e-10)


def test_hac_matches_statsmodels_up_to_small_sample_factor(rng):
    r = rng.normal(0.0005, 0.01, 800)
    r[1:] += 0.3 * r[:-1]
    lags = newey_west_lags(len(r))
    fit = sm.OLS(r, np.ones(len(r))).fit(cov_type="HAC", cov_kwds={"maxlags": lags})
    n = len(r)
    assert hac_tstat(r) == pytest.approx(fit.tvalues[0] * math.sqrt((n - 1) / n), rel=1e-10)


def test_hac_shrinks_t_under_positive_autocorrelation():
    rng = np.random.default_rng(7)
    e = rng.normal(size=2000)
    r = np.empty_like(e)
    r[0] = e[0]
    for k in range(1, len(e)):
        r[k] = 0.6 * r[k - 1] + e[k]
    r += 0.05
    assert abs(hac_tstat(r)) < abs(hac_tstat(r, lags=0))


def test_hac_guards():
    with pytest.raises(ValueError):
        hac_tstat(np.ones(10))
    assert math.isnan(hac_tstat(np.full(50, 0.01)))
    assert newey_west_lags(100) == 4


def test_cagr_of_constant_return():
    r = np.full(504, 0.001)
    assert cagr(r) == pytest.approx(1.001**252 - 1, rel=1e-12)


def test_max_drawdown_closed_form():
    assert max_drawdown(np.array([0.1, -0.2, 0.05])) == pytest.approx(-0.2, abs=1e-15)
    assert max_drawdown(np.array([-0.1, 0.5])) == pytest.approx(-0.1)
    assert max_drawdown(np.array([0.01, 0.02])) == 0.0


def test_calmar_and_flags(rng):
    r = rng.normal(0.0005, 0.01, 300)
    m = compute_metrics(r, None, np.ones((1, 300)), np.ones((1, 300), bool), sigma_tgt=None)
    assert m.calmar == pytest.approx(m.cagr / abs(m.mdd))
    up = compute_metrics(np.full(40, 0.001), None, np.ones((1, 40)), np.ones((1, 40), bool), sigma_tgt=None)
    assert up.calmar == math.inf and "no_drawdown" in up.flags


def test_rescale_hits_target(rng):
    r = rescale_to_vol(rng.normal(0, 0.03, 400))
    assert r.std(ddof=1) * math.sqrt(252) == pytest.approx(0.10, rel=1e-12)
    with pytest.raises(ValueError):
        rescale_to_vol(np.zeros(10))


def test_sharpe_invariant_to_rescaling(rng):
    r = rng.normal(0.0004, 0.01, 300)
    assert sharpe(rescale_to_vol(r)) == pytest.approx(sharpe(r), rel=1e-12)


def test_holding_period_oracles():
    t = 61
    mask = np.ones((2, t), bool)
    assert holding_period(np.ones((2, t)), mask) == math.inf
    daily = np.tile(np.where(np.arange(t) % 2 == 0, 1.0, -1.0), (2, 1))
    assert holding_period(daily, mask) == pytest.approx(1.0)
    for k in (3, 5, 10):
        p = np.tile(np.where((np.arange(t) // k) % 2 == 0, 1.0, -1.0), (2, 1))
        assert holding_period(p, mask) == pytest.approx(k)


def test_relative_metrics_degenerate_when_tracking_benchmark(rng):
    r = rng.normal(0.0003, 0.01, 100)
    m = compute_metrics(r, r.copy(), np.ones((1, 100)), np.ones((1, 100), bool))
    assert m.ir == 0.0 and m.t_alpha == 0.0 and m.rho == pytest.approx(1.0)
    assert "zero_tracking_error" in m.flags


def test_metric_table_round_trip(tmp_path, rng):
    r = rng.normal(0.0003, 0.01, 100)
    m = compute_metrics(r, rng.normal(0, 0.01, 100), np.ones((1, 100)), np.ones((1, 100), bool), gross=r)
    write_metric_table(tmp_path / "a.csv", {"x": m}, {"config_hash": "abc"})
    write_metric_table(tmp_path / "b.csv", {"x": m}, {"config_hash": "abc"})
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    row = read_metric_table(tmp_path / "a.csv")["x"]
    assert float(row["sr_net"]) == pytest.approx(m.sr_net, abs=1e-6)
    assert row["hold"] == "inf" and row["config_hash"] == "abc"
    assert list(row)[1:len(METRIC_COLUMNS) + 1] == list(METRIC_COLUMNS)
    assert isinstance(m, Metrics)
