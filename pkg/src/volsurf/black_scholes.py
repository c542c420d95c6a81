"""Black-Scholes put analytics: pricing, vega, total variance and implied-vol inversion.

Everything is stated in forward terms: a put on forward F with strike K,
maturity T, volatility sigma and discount factor df is worth

    df * (K * N(-d2) - F * N(-d1)),   d1 = (ln(F/K) + sigma^2 T / 2) / (sigma sqrt(T))

which keeps rates and dividends out of the formulas entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr


class InversionDomainError(ValueError):
    """Raised when a price lies outside the no-arbitrage band (df*(K-F)+, df*K)."""


@dataclass(frozen=True)
class BsQuote:
    """A single Black-Scholes put quote in forward terms."""

    forward: float
    strike: float
    maturity: float
    vol: float
    discount: float = 1.0

    def __post_init__(self) -> None:
        if self.forward <= 0.0:
            raise ValueError(f"forward must be positive, got {self.forward}")
        if self.strike <= 0.0:
            raise ValueError(f"strike must be positive, got {self.strike}")
        if self.maturity <= 0.0:
            raise ValueError(f"maturity must be positive, got {self.maturity}")
        if self.vol <= 0.0:
            raise ValueError(f"vol must be positive, got {self.vol}")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")


def _norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def put_price(forward, strike, maturity, vol, discount=1.0):
    """Black-Scholes put price; vectorized; vol=0 returns discounted intrinsic."""
    forward = np.asarray(forward, dtype=float)
    strike = np.asarray(strike, dtype=float)
    maturity = np.asarray(maturity, dtype=float)
    vol = np.asarray(vol, dtype=float)
    discount = np.asarray(discount, dtype=float)

    stddev = vol * np.sqrt(maturity)
    intrinsic = discount * np.maximum(strike - forward, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(forward / strike) + 0.5 * stddev * stddev) / stddev
        d2 = d1 - stddev
        live = discount * (strike * ndtr(-d2) - forward * ndtr(-d1))
    out = np.where(stddev > 0.0, live, intrinsic)
    if out.ndim == 0:
        return float(out)
    return out


def bs_put(q: BsQuote) -> float:
    """Price of a validated put quote."""
    return float(put_price(q.forward, q.strike, q.maturity, q.vol, q.discount))


def put_vega(forward, strike, maturity, vol, discount=1.0):
    """dPrice/dVol of the Black-Scholes put; vectorized."""
    forward = np.asarray(forward, dtype=float)
    stddev = np.asarray(vol, dtype=float) * np.sqrt(np.asarray(maturity, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(forward / np.asarray(strike, dtype=float)) + 0.5 * stddev * stddev) / stddev
    out = np.where(
        stddev > 0.0,
        np.asarray(discount, dtype=float) * forward * _norm_pdf(d1) * np.sqrt(maturity),
        0.0,
    )
    if out.ndim == 0:
        return float(out)
    return out


def total_variance(iv: float, maturity: float) -> float:
    """Implied total variance iv**2 * T."""
    if iv < 0.0:
        raise ValueError(f"implied vol must be nonnegative, got {iv}")
    if maturity <= 0.0:
        raise ValueError(f"maturity must be positive, got {maturity}")
    return iv * iv * maturity


def implied_vol(
    price: float,
    forward: float,
    strike: float,
    maturity: float,
    discount: float = 1.0,
    price_tol: float = 1e-12,
    max_vol: float = 20.0,
) -> float:
    """Invert the put price to a Black-Scholes volatility.

    Bracketed bisection down to a 1e-4 vol interval, then Newton polishing with
    the analytic vega.  The round-tripped price agrees with the input within
    1e-10 absolute for prices safely inside the arbitrage band.

    Raises InversionDomainError when price is outside (df*(K-F)+, df*K).
    """
    if forward <= 0 or strike <= 0 or maturity <= 0 or not 0 < discount <= 1:
        raise ValueError("forward, strike, maturity must be positive; discount in (0,1]")
    lower = discount * max(strike - forward, 0.0)
    upper = discount * strike
    if not lower < price < upper:
        raise InversionDomainError(
            f"price {price} outside the invertible band ({lower}, {upper})"
        )

    def f(vol: float) -> float:
        return float(put_price(forward, strike, maturity, vol, discount)) - price

    lo, hi = 1e-9, 1.0
    while f(hi) < 0.0:
        hi *= 2.0
        if hi > max_vol:
            hi = max_vol
            break

    # bisect to a 1e-4 wide bracket
    flo = f(lo)
    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (flo < 0.0) == (fm < 0.0):
            lo, flo = mid, fm
        else:
            hi = mid

    vol = 0.5 * (lo + hi)
    for _ in range(60):
        diff = f(vol)
        if abs(diff) <= price_tol * (1.0 + abs(price)):
            break
        vega = put_vega(forward, strike, maturity, vol, discount)
        if vega <= 1e-16:
            break
        step = diff / vega
        new_vol = vol - step
        if not lo <= new_vol <= hi:
            # Newton left the bracket; fall back to bisection on the sign
            if diff > 0.0:
                hi = vol
            else:
                lo = vol
            new_vol = 0.5 * (lo + hi)
        vol = new_vol
    return float(vol)
