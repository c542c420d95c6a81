"""Repricing backtests and the synthetic-data oracle.

A calibrated local-volatility grid is validated by repricing the quotes two
independent ways and comparing against the market:

* ``price_mc`` — log-Euler Monte Carlo under dS/S = (r - q) dt + sigma(t, S) dW,
  with the carry integrated exactly over each step;
* ``price_cn`` — a Crank-Nicolson solve of the forward Dupire equation in
  reduced coordinates, dT p = (sigma^2 / 2) k^2 dkk p, which prices every
  (T, k) in one sweep.

``generate_synthetic`` fabricates quote files from closed-form ground truths
(flat Black-Scholes, an SSVI surface, or a CEV local-vol model priced by the
CN engine itself), which doubles as the acceptance oracle.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .black_scholes import InversionDomainError, implied_vol, put_price
from .local_vol import LocalVolGrid
from .market_data import CurveSet, MarketFrame, QuoteRecord
from .ssvi import SsviParams, check_no_arbitrage, svi_total_variance

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """Requested options fall outside the provided local-vol domain."""


@dataclass
class BacktestReport:
    """Aligned per-option rows plus the two headline error numbers."""

    method: str
    rows: list
    price_rmse: float
    iv_rmse: float
    n_iv_failures: int
    runtime: float

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "price_rmse": self.price_rmse,
            "iv_rmse": self.iv_rmse,
            "n_iv_failures": self.n_iv_failures,
            "n_options": len(self.rows),
            "runtime_seconds": self.runtime,
            "rows": self.rows,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["maturity", "strike", "model_price", "market_price", "model_iv", "market_iv"]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        row["maturity"], row["strike"], row["model_price"],
                        row["market_price"],
                        "" if row["model_iv"] is None else row["model_iv"],
                        row["market_iv"],
                    ]
                )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def price_mc(
    lv: LocalVolGrid,
    curves: CurveSet,
    options,
    n_paths: int = 100_000,
    n_steps: int = 100,
    seed: int = 0,
    antithetic: bool = False,
):
    """Price puts by Monte Carlo under the local-vol dynamics.

    options is a sequence of (maturity, strike).  Returns (prices, stderrs)
    in currency.  The time grid is the union of a uniform n_steps grid and
    the option maturities, so each payoff is read at its exact expiry; the
    normals are drawn per step from a counter-based generator, making the
    result a function of (seed, n_paths, n_steps) only.
    """
    options = [(float(t), float(k)) for t, k in options]
    if not options:
        return np.zeros(0), np.zeros(0)
    t_max = max(t for t, _ in options)
    times = np.unique(
        np.concatenate([np.linspace(0.0, t_max, n_steps + 1), [t for t, _ in options]])
    )
    by_time = {}
    for idx, (t, k) in enumerate(options):
        by_time.setdefault(float(t), []).append(idx)

    rng = np.random.default_rng(np.random.Philox(seed))
    log_spot = math.log(curves.spot)
    x = np.full(n_paths, log_spot)
    carry_vals = curves.carry(times)

    sums = np.zeros(len(options))
    sq_sums = np.zeros(len(options))

    def settle(time_value, idx_time):
        spot_now = np.exp(x)
        for opt_idx in by_time.get(float(time_value), []):
            t_opt, strike = options[opt_idx]
            payoff = np.maximum(strike - spot_now, 0.0) * float(curves.discount(t_opt))
            sums[opt_idx] = payoff.sum()
            sq_sums[opt_idx] = (payoff * payoff).sum()

    settle(times[0], 0)
    for i in range(times.size - 1):
        t0, t1 = times[i], times[i + 1]
        dt = t1 - t0
        step_carry = carry_vals[i + 1] - carry_vals[i]
        spot_now = np.exp(x)
        k_coord = spot_now * math.exp(-carry_vals[i])
        sigma = lv.lookup(np.full(n_paths, t0), k_coord)
        if antithetic:
            half = (n_paths + 1) // 2
            draw = rng.standard_normal(half)
            normals = np.concatenate([draw, -draw])[:n_paths]
        else:
            normals = rng.standard_normal(n_paths)
        x = x + step_carry - 0.5 * sigma * sigma * dt + sigma * math.sqrt(dt) * normals
        settle(t1, i + 1)

    prices = sums / n_paths
    variances = np.maximum(sq_sums / n_paths - prices**2, 0.0)
    stderrs = np.sqrt(variances / n_paths)
    return prices, stderrs


# ---------------------------------------------------------------------------
# Crank-Nicolson
# ---------------------------------------------------------------------------


@dataclass
class CnSolution:
    """Reduced put prices on the full (T, k) PDE grid."""

    t_axis: np.ndarray
    k_axis: np.ndarray
    reduced: np.ndarray          # (n_t, n_k)
    curves: CurveSet
    diagnostics: dict = field(default_factory=dict)

    def reduced_at(self, t, k):
        t = np.clip(np.asarray(t, dtype=float), self.t_axis[0], self.t_axis[-1])
        k = np.asarray(k, dtype=float)
        if np.any(k < self.k_axis[0]) or np.any(k > self.k_axis[-1]):
            raise DomainError("reduced strike outside the PDE grid")
        it = np.clip(np.searchsorted(self.t_axis, t) - 1, 0, self.t_axis.size - 2)
        ik = np.clip(np.searchsorted(self.k_axis, k) - 1, 0, self.k_axis.size - 2)
        wt = (t - self.t_axis[it]) / (self.t_axis[it + 1] - self.t_axis[it])
        wk = (k - self.k_axis[ik]) / (self.k_axis[ik + 1] - self.k_axis[ik])
        out = (
            (1 - wt) * (1 - wk) * self.reduced[it, ik]
            + (1 - wt) * wk * self.reduced[it, ik + 1]
            + wt * (1 - wk) * self.reduced[it + 1, ik]
            + wt * wk * self.reduced[it + 1, ik + 1]
        )
        return float(out) if out.ndim == 0 else out

    def price_at(self, t, k):
        """Currency put price: undo the reduced-price growth factor."""
        growth = np.exp(self.curves.dividend_curve.integral(t))
        return self.reduced_at(t, k) / growth


def price_cn(
    lv: LocalVolGrid,
    curves: CurveSet,
    t_max: float,
    n_t: int = 100,
    n_k: int = 100,
    k_max: float | None = None,
) -> CnSolution:
    """Solve the forward Dupire equation by Crank-Nicolson.

    Initial condition p(0, k) = (k - S0)+, boundaries p(T, 0) = 0 and
    p(T, k_max) = k_max - S0; the strike grid extends to roughly twice the
    spot (or beyond the local-vol grid) so the upper boundary is effectively
    at its asymptote.  Negative values produced by the scheme around the
    payoff kink are counted and clamped at zero.
    """
    spot = curves.spot
    if k_max is None:
        k_max = max(2.0 * spot, 1.2 * float(lv.k_axis[-1]))
    t_axis = np.linspace(0.0, t_max, n_t)
    k_axis = np.linspace(0.0, k_max, n_k)
    dk = k_axis[1] - k_axis[0]

    values = np.empty((n_t, n_k))
    values[0] = np.maximum(k_axis - spot, 0.0)
    inner = slice(1, n_k - 1)
    k_inner = k_axis[inner]
    negatives = 0

    def diffusion(t):
        sigma = lv.lookup(np.full(k_inner.size, t), k_inner)
        return 0.5 * sigma * sigma * k_inner * k_inner / dk**2

    for n in range(n_t - 1):
        dt = t_axis[n + 1] - t_axis[n]
        d_old = diffusion(t_axis[n])
        d_new = diffusion(t_axis[n + 1])
        # explicit half-step
        rhs = values[n, inner] + 0.5 * dt * d_old * (
            values[n, :-2] - 2.0 * values[n, inner] + values[n, 2:]
        )
        # implicit half-step: tridiagonal (I - dt/2 D second-difference)
        coeff = 0.5 * dt * d_new
        banded = np.zeros((3, n_k - 2))
        banded[0, 1:] = -coeff[:-1]
        banded[1] = 1.0 + 2.0 * coeff
        banded[2, :-1] = -coeff[1:]
        boundary_hi = k_max - spot
        rhs[-1] += coeff[-1] * boundary_hi
        new_inner = solve_banded((1, 1), banded, rhs, check_finite=False)
        neg = new_inner < 0.0
        if np.any(neg):
            negatives += int(neg.sum())
            new_inner = np.maximum(new_inner, 0.0)
        values[n + 1, 0] = 0.0
        values[n + 1, -1] = boundary_hi
        values[n + 1, inner] = new_inner

    if negatives:
        log.warning("CN produced %d negative values (clamped at zero)", negatives)
    return CnSolution(
        t_axis=t_axis, k_axis=k_axis, reduced=values, curves=curves,
        diagnostics={"negative_values_clamped": negatives, "k_max": float(k_max)},
    )


def cn_option_prices(solution: CnSolution, curves: CurveSet, options):
    """Currency prices of (maturity, strike) options from a CN solution."""
    out = np.empty(len(options))
    for i, (t, strike) in enumerate(options):
        k = float(curves.reduced_strike(strike, t))
        out[i] = solution.price_at(float(t), k)
    return out


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def report(model_prices, frame: MarketFrame, method: str, runtime: float = 0.0) -> BacktestReport:
    """Price and IV RMSEs of model prices against the frame's mid quotes.

    Rows whose model price cannot be inverted to an implied volatility are
    flagged and excluded from the IV RMSE (but still count in price RMSE).
    """
    model_prices = np.asarray(model_prices, dtype=float)
    if model_prices.size != len(frame.points):
        raise ValueError("one model price per frame point required")
    curves = frame.curves
    rows = []
    price_errs = []
    iv_errs = []
    failures = 0
    for price, point in zip(model_prices, frame.points):
        t, strike = point.maturity, point.strike
        market_price = point.reduced_mid / float(curves.growth(t))
        model_iv = None
        try:
            model_iv = implied_vol(
                float(price), float(curves.forward(t)), strike, t, float(curves.discount(t))
            )
            iv_errs.append(model_iv - point.mid_iv)
        except InversionDomainError:
            failures += 1
        price_errs.append(price - market_price)
        rows.append(
            {
                "maturity": t,
                "strike": strike,
                "model_price": float(price),
                "market_price": float(market_price),
                "model_iv": model_iv,
                "market_iv": point.mid_iv,
            }
        )
    price_rmse = float(np.sqrt(np.mean(np.square(price_errs))))
    iv_rmse = float(np.sqrt(np.mean(np.square(iv_errs)))) if iv_errs else float("nan")
    return BacktestReport(
        method=method,
        rows=rows,
        price_rmse=price_rmse,
        iv_rmse=iv_rmse,
        n_iv_failures=failures,
        runtime=runtime,
    )


def run_backtest(
    lv: LocalVolGrid,
    frame: MarketFrame,
    method: str,
    n_paths: int = 100_000,
    n_steps: int = 100,
    seed: int = 0,
    cn_grid: tuple = (100, 100),
) -> BacktestReport:
    """Reprice every frame quote under the local-vol grid and report errors."""
    options = [(p.maturity, p.strike) for p in frame.points]
    start = time.perf_counter()
    if method == "mc":
        prices, _ = price_mc(
            lv, frame.curves, options, n_paths=n_paths, n_steps=n_steps, seed=seed
        )
    elif method == "cn":
        solution = price_cn(
            lv, frame.curves, t_max=max(t for t, _ in options),
            n_t=cn_grid[0], n_k=cn_grid[1],
        )
        prices = cn_option_prices(solution, frame.curves, options)
    else:
        raise ValueError(f"unknown backtest method {method!r}")
    return report(prices, frame, method, runtime=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth generator for quote files."""

    kind: str = "flat"                       # flat | ssvi | cev
    sigma: float = 0.2                       # flat vol
    rho: float = -0.3                        # ssvi
    eta: float = 1.2                         # ssvi
    theta_slope: float = 0.04                # ssvi: ATM total variance slope
    sigma0: float = 2.0                      # cev: sigma(S) = sigma0 S^(beta-1)
    beta: float = 0.5                        # cev exponent
    maturities: tuple = tuple(np.linspace(0.25, 2.5, 20).tolist())
    moneyness: tuple = tuple(np.linspace(0.85, 1.3, 40).tolist())
    spread: float = 0.005                    # relative half-width

    def __post_init__(self):
        if self.kind not in ("flat", "ssvi", "cev"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.sigma <= 0 or self.spread < 0:
            raise ValueError("sigma must be positive and spread nonnegative")


def generate_synthetic(spec: SyntheticSpec, curves: CurveSet) -> list[QuoteRecord]:
    """Quotes priced by the requested closed-form (or CN-priced CEV) oracle."""
    maturities = np.asarray(spec.maturities, dtype=float)
    strikes = np.asarray(spec.moneyness, dtype=float) * curves.spot

    if spec.kind == "ssvi":
        params = SsviParams(
            rho=spec.rho, eta=spec.eta,
            theta_maturities=tuple(maturities),
            theta_values=tuple(spec.theta_slope * t for t in maturities),
        )
        verdict = check_no_arbitrage(params)
        if not (verdict["butterfly_ok"] and verdict["calendar_ok"]):
            raise ValueError(f"SSVI spec violates no-arbitrage: {verdict}")

    cn = None
    if spec.kind == "cev":
        t_axis = np.linspace(0.01, float(maturities.max()) * 1.05, 40)
        k_axis = np.linspace(0.2 * curves.spot, 2.2 * curves.spot, 80)
        tt, kk = np.meshgrid(t_axis, k_axis, indexing="ij")
        strike_coord = kk * np.exp(np.asarray(curves.carry(tt)))
        vals = spec.sigma0 * strike_coord ** (spec.beta - 1.0)
        lv = LocalVolGrid(t_axis, k_axis, vals, np.ones_like(vals, dtype=bool))
        cn = price_cn(lv, curves, t_max=float(maturities.max()), n_t=200, n_k=400)

    quotes = []
    for t in maturities:
        forward = float(curves.forward(t))
        discount = float(curves.discount(t))
        for strike in strikes:
            if spec.kind == "flat":
                iv = spec.sigma
                mid = put_price(forward, strike, t, iv, discount)
            elif spec.kind == "ssvi":
                kappa = math.log(float(curves.reduced_strike(strike, t)) / curves.spot)
                total = float(svi_total_variance(params.slice_at(t), kappa))
                iv = math.sqrt(total / t)
                mid = put_price(forward, strike, t, iv, discount)
            else:
                k = float(curves.reduced_strike(strike, t))
                mid = float(cn.price_at(float(t), k))
                lower = discount * max(strike - forward, 0.0)
                if not lower < mid < discount * strike:
                    log.warning("CEV price at (%.3f, %.1f) not invertible; skipped", t, strike)
                    continue
                iv = implied_vol(mid, forward, strike, t, discount)
            quotes.append(
                QuoteRecord(
                    maturity=float(t), strike=float(strike),
                    bid=mid * (1.0 - spec.spread), ask=mid * (1.0 + spec.spread),
                    listed_iv=float(iv),
                )
            )
    return quotes


def write_quotes_csv(quotes, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["maturity", "strike", "bid", "ask", "iv"])
        for q in quotes:
            writer.writerow(
                [
                    repr(q.maturity), repr(q.strike), repr(q.bid), repr(q.ask),
                    "" if q.listed_iv is None else repr(q.listed_iv),
                ]
            )


def write_curve_csv(tenors, values, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["tenor", "value"])
        for t, v in zip(tenors, values):
            writer.writerow([repr(float(t)), repr(float(v))])
