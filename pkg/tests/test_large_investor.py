import math

import numpy as np
import pytest

from delaybsde.backward import UncertifiedDelayWarning, call_terminal, constant_terminal, identity_terminal
from delaybsde.errors import ConfigurationError
from delaybsde.large_investor import (HedgeConfig, MarketModel, build_driver, constant_market,
                                      delay_invariance_probe, delayed_drift_market, hedge_pnl, pricing_driver,
                                      replicate, simulate_stock)
from delaybsde.levy import LevyModel

CFG = HedgeConfig(T=1.0, dt=0.02, n_paths=20_000, seed=5)


def driver_at(gen, y, z, yhat=None):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.asarray(z, dtype=float).reshape(-1, 1)
    m = 1 if yhat is None else yhat.shape[1]
    yhat = np.repeat(y[:, None], m, axis=1) if yhat is None else yhat
    return gen.f(0.3, np.zeros((y.size, 1, 1)), y, z, np.zeros(y.size), yhat)


def test_zero_rates_give_zero_driver():
    gen = build_driver(constant_market(0.0, 0.0, 0.2))
    np.testing.assert_array_equal(driver_at(gen, [1.0, -2.0], [0.3, 0.1]), 0.0)


def test_no_excess_return_collapses_to_discounting():
    gen = build_driver(constant_market(0.3, 0.3, 0.2))
    y, z = np.array([1.0, 2.5]), np.array([0.4, -0.2])
    np.testing.assert_allclose(driver_at(gen, y, z), -0.3 * y, rtol=1e-15, atol=1e-15)


def test_delayed_excess_return_term():
    rho, kappa, sigma, delta = 0.1, 0.5, 0.2, 0.1
    gen = build_driver(delayed_drift_market(rho, kappa, delta, sigma))
    y = np.array([1.0, 2.0])
    z = np.array([0.2, -0.4])
    yhat = np.tile(np.linspace(0.5, 1.0, 6), (2, 1))
    pi = z / sigma
    expected = -rho * y - pi * kappa * 0.5  # the segment's value at -δ is 0.5
    np.testing.assert_allclose(driver_at(gen, y, z, yhat), expected, rtol=1e-14)


def test_pricing_driver_ignores_mu():
    a = pricing_driver(constant_market(0.05, 0.05, 0.2, stock_drift=0.1))
    b = pricing_driver(constant_market(0.05, 0.4, 0.2, stock_drift=0.1))
    np.testing.assert_allclose(driver_at(a, [1.0], [0.3]), driver_at(b, [1.0], [0.3]), rtol=1e-14)


def test_market_validation():
    with pytest.raises(ConfigurationError):
        constant_market(0.0, 0.0, 0.2, s0=0.0)
    with pytest.raises(ConfigurationError):
        constant_market(0.0, 0.0, 0.2, model=LevyModel.from_atoms([(-1.5, 1.0)]), jump_factor=1.0)
    zero_vol = MarketModel(lambda t, x, xb: 0 * x, lambda t, x, xb: 0 * x, lambda t: 0.0, lambda t, z: 0.0,
                           LevyModel.no_jumps(), 1.0)
    with pytest.raises(ConfigurationError):
        replicate(zero_vol, constant_terminal(1.0), HedgeConfig(1.0, 0.1, 100))


def test_constant_claim_without_rates():
    res = replicate(constant_market(0.0, 0.0, 0.2), constant_terminal(3.0), HedgeConfig(1.0, 0.05, 2_000))
    assert res.price_t0 == 3.0
    assert np.all(res.strategy == 0.0)


def test_discounted_unit_claim():
    res = replicate(constant_market(0.3, 0.3, 0.2), constant_terminal(1.0), CFG)
    assert res.price_t0 == pytest.approx(math.exp(-0.3), rel=0.01)


def test_martingale_stock_claim():
    res = replicate(constant_market(0.0, 0.0, 0.25), identity_terminal(), CFG)
    assert abs(res.price_t0 - 1.0) < 3 * res.std_err
    # holding one share: π ≈ S
    np.testing.assert_allclose(res.strategy[:, 25].mean(), res.stock[:, 25].mean(), rtol=0.02)


def test_strategy_times_sigma_is_z_bitwise():
    model = LevyModel.from_atoms([(0.1, 1.0), (-0.2, 0.5)])
    res = replicate(constant_market(0.02, 0.07, 0.3, model=model, jump_factor=1.0), call_terminal(1.0),
                    HedgeConfig(1.0, 0.05, 5_000, seed=2))
    assert np.array_equal(res.strategy * res.sigma, res.z)
    np.testing.assert_allclose(res.z, res.solution.z[:, :, 0], rtol=1e-15, atol=0)
    assert np.all(res.terminal_error == 0.0)


def test_stock_stays_positive_with_large_down_jumps():
    model = LevyModel.from_atoms([(-0.95, 5.0), (0.5, 1.0)])
    market = constant_market(0.0, 0.0, 0.5, model=model, jump_factor=1.0)
    ens = simulate_stock(market, HedgeConfig(1.0, 0.05, 5_000, seed=3))
    assert np.all(np.exp(ens.paths) > 0)


def test_jump_stock_is_a_martingale_under_its_drift():
    model = LevyModel.from_atoms([(-0.3, 2.0), (0.2, 1.0)])
    market = constant_market(0.0, 0.0, 0.2, model=model, jump_factor=1.0, stock_drift=0.0)
    ens = simulate_stock(market, HedgeConfig(1.0, 0.02, 40_000, seed=4))
    s = np.exp(ens.paths[:, -1, 0])
    assert abs(s.mean() - 1.0) < 3 * s.std() / math.sqrt(s.size)


def test_pnl_trivial_case_is_exact():
    market = constant_market(0.0, 0.0, 0.2)
    res = replicate(market, constant_terminal(2.0), HedgeConfig(1.0, 0.05, 2_000))
    pnl = hedge_pnl(res, market, fresh_seed=99)
    assert np.all(pnl.errors == 0.0)


def test_pnl_out_of_sample_martingale_claim():
    market = constant_market(0.0, 0.0, 0.2)
    res = replicate(market, identity_terminal(), CFG)
    good = hedge_pnl(res, market, fresh_seed=77)
    assert abs(good.mean) < 3 * good.std_err
    bad = hedge_pnl(res, market, fresh_seed=77, pi_scale=2.0)
    assert bad.std > good.std


def test_pnl_call_hedge_beats_doing_nothing():
    market = constant_market(0.03, 0.08, 0.2, stock_drift=0.08)
    res = replicate(market, call_terminal(1.0), CFG)
    hedged = hedge_pnl(res, market, fresh_seed=8)
    unhedged = hedge_pnl(res, market, fresh_seed=8, pi_scale=0.0)
    assert hedged.std < 0.3 * unhedged.std
    text = hedged.histogram_csv(bins=10)
    assert text.splitlines()[0] == "bin_left,bin_right,count" and len(text.splitlines()) == 11
    assert res.strategy_csv().splitlines()[0] == "t,pi_mean,pi_std,pi_q05,pi_q50,pi_q95"


def test_price_does_not_depend_on_simulation_drift():
    a = replicate(constant_market(0.03, 0.08, 0.2, stock_drift=0.03), call_terminal(1.0), CFG)
    b = replicate(constant_market(0.03, 0.08, 0.2, stock_drift=0.2), call_terminal(1.0), CFG)
    assert abs(a.price_t0 - b.price_t0) < 3 * math.hypot(a.std_err, b.std_err)


def test_delay_invariance_probe():
    with pytest.warns(UncertifiedDelayWarning):
        out = delay_invariance_probe(0.05, 0.5, 0.1, 0.2, call_terminal(1.0),
                                     HedgeConfig(1.0, 0.02, 20_000, seed=6), alt_drift=0.15)
    assert out["passed"], out
