import numpy as np
import pytest

from volsurf.black_scholes import (
    BsQuote,
    InversionDomainError,
    bs_put,
    implied_vol,
    put_price,
    put_vega,
    total_variance,
)

# Closed-form evaluation of K*N(-d2) - F*N(-d1) at F=K=100, T=1, sigma=0.2,
# frozen from an independent scipy.special.ndtr computation.
ATM_PUT_100 = 7.965567455405804


def test_atm_put_matches_closed_form():
    q = BsQuote(forward=100.0, strike=100.0, maturity=1.0, vol=0.2, discount=1.0)
    assert bs_put(q) == pytest.approx(ATM_PUT_100, abs=1e-10)


def test_zero_vol_limit_is_discounted_intrinsic():
    assert put_price(100.0, 120.0, 1.0, 0.0, 0.95) == pytest.approx(0.95 * 20.0)
    assert put_price(100.0, 80.0, 1.0, 0.0, 0.95) == 0.0
    # and the limit is approached from sigma > 0
    assert put_price(100.0, 120.0, 1.0, 1e-8, 0.95) == pytest.approx(0.95 * 20.0, abs=1e-9)


def test_huge_vol_limit_is_discounted_strike():
    assert put_price(100.0, 90.0, 1.0, 60.0, 0.97) == pytest.approx(0.97 * 90.0, rel=1e-12)


def test_price_monotone_in_vol():
    vols = np.linspace(0.01, 2.0, 80)
    prices = put_price(100.0, 110.0, 0.7, vols, 0.99)
    assert np.all(np.diff(prices) > 0.0)


def test_price_convex_in_strike():
    strikes = np.linspace(50.0, 180.0, 200)
    prices = put_price(100.0, strikes, 1.3, 0.25, 0.98)
    second = np.diff(prices, 2)
    assert np.all(second >= -1e-10)


def test_price_bounds():
    rng = np.random.default_rng(11)
    for _ in range(200):
        forward = rng.uniform(50.0, 200.0)
        strike = rng.uniform(50.0, 200.0)
        maturity = rng.uniform(0.05, 3.0)
        vol = rng.uniform(0.01, 1.5)
        df = rng.uniform(0.8, 1.0)
        p = put_price(forward, strike, maturity, vol, df)
        assert df * max(strike - forward, 0.0) <= p <= df * strike


def test_vega_matches_finite_difference():
    rng = np.random.default_rng(5)
    for _ in range(50):
        forward = rng.uniform(60.0, 150.0)
        strike = rng.uniform(60.0, 150.0)
        maturity = rng.uniform(0.1, 2.5)
        vol = rng.uniform(0.05, 0.8)
        h = 1e-5
        fd = (
            put_price(forward, strike, maturity, vol + h)
            - put_price(forward, strike, maturity, vol - h)
        ) / (2 * h)
        an = put_vega(forward, strike, maturity, vol)
        # abs floor covers central-difference roundoff (~1e-16 * price / h)
        assert an == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_implied_vol_inverts_atm_example():
    assert implied_vol(ATM_PUT_100, 100.0, 100.0, 1.0, 1.0) == pytest.approx(0.2, abs=1e-8)


def test_implied_vol_round_trip_random():
    rng = np.random.default_rng(7)
    for _ in range(300):
        forward = rng.uniform(50.0, 200.0)
        strike = forward * rng.uniform(0.7, 1.4)
        maturity = rng.uniform(0.05, 3.0)
        vol = rng.uniform(0.01, 2.0)
        df = rng.uniform(0.85, 1.0)
        price = put_price(forward, strike, maturity, vol, df)
        if not df * max(strike - forward, 0.0) < price < df * strike:
            continue
        got = implied_vol(price, forward, strike, maturity, df)
        assert got == pytest.approx(vol, abs=1e-8)
        back = put_price(forward, strike, maturity, got, df)
        assert back == pytest.approx(price, abs=1e-10)


def test_implied_vol_rejects_boundary_price():
    with pytest.raises(InversionDomainError):
        implied_vol(20.0 * 0.95, 100.0, 120.0, 1.0, 0.95)  # exactly intrinsic
    with pytest.raises(InversionDomainError):
        implied_vol(0.0, 100.0, 90.0, 1.0, 1.0)
    with pytest.raises(InversionDomainError):
        implied_vol(121.0, 100.0, 120.0, 1.0, 1.0)  # above df*K


def test_total_variance():
    assert total_variance(0.2, 1.0) == pytest.approx(0.04)
    assert total_variance(0.2, 4.0) == pytest.approx(0.16)
    assert total_variance(0.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        total_variance(-0.1, 1.0)
    with pytest.raises(ValueError):
        total_variance(0.2, 0.0)


def test_quote_validation():
    with pytest.raises(ValueError):
        BsQuote(forward=-1.0, strike=100.0, maturity=1.0, vol=0.2)
    with pytest.raises(ValueError):
        BsQuote(forward=100.0, strike=100.0, maturity=1.0, vol=0.2, discount=1.2)
    with pytest.raises(ValueError):
        BsQuote(forward=100.0, strike=100.0, maturity=0.0, vol=0.2)
