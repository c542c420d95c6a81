"""Quote ingestion, curve handling, reduced-price transforms and unit-square rescaling.

The calibration methods all work on "reduced" put prices

    p(T, k) = exp(int_0^T q) * P(T, K),      k = K * exp(-int_0^T (r - q)),

which strips the drift terms out of the Dupire equation, and on inputs
rescaled to the unit square so neither coordinate dominates a fit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .black_scholes import InversionDomainError, implied_vol

log = logging.getLogger(__name__)

DEFAULT_COLUMNS = {
    "maturity": "maturity",
    "strike": "strike",
    "bid": "bid",
    "ask": "ask",
    "iv": "iv",
}


class SchemaError(ValueError):
    """Input table does not carry the expected columns."""


class EmptyInputError(ValueError):
    """No usable rows survived loading or filtering."""


@dataclass(frozen=True)
class QuoteRecord:
    """One market put quote."""

    maturity: float
    strike: float
    bid: float
    ask: float
    listed_iv: float | None = None

    def __post_init__(self) -> None:
        if self.maturity <= 0.0:
            raise ValueError(f"maturity must be positive, got {self.maturity}")
        if self.strike <= 0.0:
            raise ValueError(f"strike must be positive, got {self.strike}")
        if self.bid < 0.0:
            raise ValueError(f"bid must be nonnegative, got {self.bid}")
        if self.ask < self.bid:
            raise ValueError(f"crossed quote: bid {self.bid} > ask {self.ask}")
        if self.listed_iv is not None and self.listed_iv <= 0.0:
            raise ValueError(f"listed iv must be positive, got {self.listed_iv}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)


class Curve:
    """Piecewise-linear tenor -> value curve, flat beyond its knots.

    Integrals are exact for the piecewise-linear interpolant (trapezoid on the
    knots), which is all the accuracy the smooth input curves warrant.
    """

    def __init__(self, tenors, values):
        tenors = np.asarray(tenors, dtype=float)
        values = np.asarray(values, dtype=float)
        if tenors.ndim != 1 or tenors.size == 0 or tenors.shape != values.shape:
            raise ValueError("curve needs matching 1-d tenor/value arrays")
        if np.any(np.diff(tenors) <= 0.0):
            raise ValueError("curve tenors must be strictly increasing")
        self.tenors = tenors
        self.values = values

    @classmethod
    def flat(cls, value: float, horizon: float = 50.0) -> "Curve":
        return cls([0.0, horizon], [value, value])

    def value(self, t):
        return np.interp(t, self.tenors, self.values)

    def integral(self, t):
        """int_0^t of the curve, vectorized over t >= 0."""
        t = np.asarray(t, dtype=float)
        knots = self.tenors
        vals = self.values
        if knots[0] > 0.0:
            knots = np.concatenate([[0.0], knots])
            vals = np.concatenate([[vals[0]], vals])
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(knots))])
        idx = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.size - 2)
        t0 = knots[idx]
        v0 = vals[idx]
        slope = (vals[idx + 1] - vals[idx]) / (knots[idx + 1] - knots[idx])
        inside = cum[idx] + (t - t0) * v0 + 0.5 * slope * (t - t0) ** 2
        beyond = cum[-1] + (t - knots[-1]) * vals[-1]
        out = np.where(t > knots[-1], beyond, inside)
        return float(out) if out.ndim == 0 else out

    @property
    def max_tenor(self) -> float:
        return float(self.tenors[-1])


@dataclass(frozen=True)
class CurveSet:
    """Spot plus continuously-compounded rate and dividend-yield curves."""

    spot: float
    rate_curve: Curve
    dividend_curve: Curve

    def __post_init__(self) -> None:
        if self.spot <= 0.0:
            raise ValueError(f"spot must be positive, got {self.spot}")

    def discount(self, t):
        return np.exp(-self.rate_curve.integral(t))

    def growth(self, t):
        """exp(int_0^t q): the factor taking raw put prices to reduced prices."""
        return np.exp(self.dividend_curve.integral(t))

    def carry(self, t):
        """int_0^t (r - q)."""
        return self.rate_curve.integral(t) - self.dividend_curve.integral(t)

    def forward(self, t):
        return self.spot * np.exp(self.carry(t))

    def reduced_strike(self, strike, t):
        """k = K * exp(-int (r - q))."""
        return strike * np.exp(-self.carry(t))


@dataclass(frozen=True)
class PreprocessConfig:
    """Filtering rules applied when building a frame."""

    min_maturity: float = 0.055
    iv_gap_tol: float = 0.05


@dataclass(frozen=True)
class AffineScaling:
    """Affine maps sending the data bounding box in (T, k) onto [0, 1]^2."""

    t_min: float
    t_max: float
    k_min: float
    k_max: float

    def __post_init__(self) -> None:
        if self.t_max <= self.t_min or self.k_max <= self.k_min:
            raise ValueError("degenerate bounding box for unit-square scaling")

    def to_unit(self, t, k):
        u = (np.asarray(t, dtype=float) - self.t_min) / (self.t_max - self.t_min)
        v = (np.asarray(k, dtype=float) - self.k_min) / (self.k_max - self.k_min)
        return u, v

    def from_unit(self, u, v):
        t = self.t_min + np.asarray(u, dtype=float) * (self.t_max - self.t_min)
        k = self.k_min + np.asarray(v, dtype=float) * (self.k_max - self.k_min)
        return t, k


@dataclass(frozen=True)
class MarketPoint:
    """One preprocessed quote in reduced coordinates."""

    maturity: float
    strike: float
    reduced_strike: float
    log_moneyness: float
    reduced_bid: float
    reduced_ask: float
    reduced_mid: float
    mid_iv: float


@dataclass(frozen=True)
class MarketFrame:
    """Preprocessed dataset shared by all calibration methods. Immutable."""

    points: tuple[MarketPoint, ...]
    scaling: AffineScaling
    curves: CurveSet
    rejected: tuple[tuple[int, str], ...] = field(default=())

    def __len__(self) -> int:
        return len(self.points)

    def arrays(self):
        """Column arrays (T, k, kappa, bid, ask, mid, iv) over retained points."""
        cols = np.array(
            [
                (
                    p.maturity,
                    p.reduced_strike,
                    p.log_moneyness,
                    p.reduced_bid,
                    p.reduced_ask,
                    p.reduced_mid,
                    p.mid_iv,
                )
                for p in self.points
            ],
            dtype=float,
        )
        return (cols[:, i] for i in range(7))

    def bid_ask_observations(self):
        """Bid and ask reduced prices as separate replications at the same (T, k).

        Returns (T, k, y) with two rows per quote; this is the observation set
        the price-surface GP is trained on.
        """
        t = np.repeat([p.maturity for p in self.points], 2)
        k = np.repeat([p.reduced_strike for p in self.points], 2)
        y = np.ravel([[p.reduced_bid, p.reduced_ask] for p in self.points])
        return t, k, np.asarray(y, dtype=float)

    def to_unit_square(self, t, k):
        return self.scaling.to_unit(t, k)

    def from_unit_square(self, u, v):
        return self.scaling.from_unit(u, v)


def load_quotes(path, columns: dict[str, str] | None = None) -> list[QuoteRecord]:
    """Read quotes from a CSV file.

    Rows with non-numeric or non-positive maturity/strike, negative bids or
    crossed quotes are rejected; each rejection is logged with its row index.
    A missing required column raises SchemaError, an entirely empty file
    raises EmptyInputError, a header-only file returns [] with a warning.
    """
    colmap = dict(DEFAULT_COLUMNS)
    if columns:
        colmap.update(columns)

    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise EmptyInputError(f"{path}: file is empty")
        required = [colmap["maturity"], colmap["strike"], colmap["bid"], colmap["ask"]]
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        has_iv = colmap["iv"] in reader.fieldnames

        quotes: list[QuoteRecord] = []
        for index, row in enumerate(reader):
            try:
                maturity = float(row[colmap["maturity"]])
                strike = float(row[colmap["strike"]])
                bid = float(row[colmap["bid"]])
                ask = float(row[colmap["ask"]])
            except (TypeError, ValueError):
                log.warning("row %d rejected: non-numeric field", index)
                continue
            listed_iv = None
            if has_iv:
                raw = (row[colmap["iv"]] or "").strip()
                if raw:
                    try:
                        listed_iv = float(raw)
                    except ValueError:
                        log.warning("row %d: unreadable iv ignored", index)
                    if listed_iv is not None and listed_iv <= 0.0:
                        listed_iv = None
            try:
                quotes.append(
                    QuoteRecord(
                        maturity=maturity, strike=strike, bid=bid, ask=ask, listed_iv=listed_iv
                    )
                )
            except ValueError as exc:
                reason = "crossed quote" if bid > ask else str(exc)
                log.warning("row %d rejected: %s", index, reason)

    if not quotes:
        log.warning("%s: no quote rows found", path)
    return quotes


def load_curve(path) -> Curve:
    """Read a `tenor,value` CSV into a Curve."""
    tenors, values = [], []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"tenor", "value"} <= set(reader.fieldnames):
            raise SchemaError(f"{path}: expected header tenor,value")
        for row in reader:
            tenors.append(float(row["tenor"]))
            values.append(float(row["value"]))
    if not tenors:
        raise EmptyInputError(f"{path}: no curve rows")
    return Curve(tenors, values)


def build_frame(
    quotes: list[QuoteRecord],
    curves: CurveSet,
    filters: PreprocessConfig | None = None,
) -> MarketFrame:
    """Preprocess quotes into a MarketFrame.

    Drops quotes below the minimum maturity, and quotes whose listed implied
    volatility differs from the mid-price implied volatility (computed with
    these curves) by more than the relative gap tolerance.  Computes reduced
    prices, reduced strikes and log-moneyness for the survivors and fits the
    unit-square scaling to their bounding box.
    """
    cfg = filters or PreprocessConfig()
    max_t = max((q.maturity for q in quotes), default=0.0)
    if quotes and min(curves.rate_curve.max_tenor, curves.dividend_curve.max_tenor) < max_t:
        raise ValueError("curves do not cover the longest quote maturity")

    points: list[MarketPoint] = []
    rejected: list[tuple[int, str]] = []
    for index, q in enumerate(quotes):
        if q.maturity < cfg.min_maturity:
            rejected.append((index, "below minimum maturity"))
            continue
        growth = float(curves.growth(q.maturity))
        k = float(curves.reduced_strike(q.strike, q.maturity))
        forward = float(curves.forward(q.maturity))
        discount = float(curves.discount(q.maturity))
        try:
            mid_iv = implied_vol(q.mid, forward, q.strike, q.maturity, discount)
        except InversionDomainError:
            rejected.append((index, "mid price outside arbitrage band"))
            continue
        if q.listed_iv is not None:
            gap = abs(q.listed_iv - mid_iv) / q.listed_iv
            if gap > cfg.iv_gap_tol:
                rejected.append((index, "listed iv inconsistent with mid price"))
                continue
        points.append(
            MarketPoint(
                maturity=q.maturity,
                strike=q.strike,
                reduced_strike=k,
                log_moneyness=math.log(k / curves.spot),
                reduced_bid=growth * q.bid,
                reduced_ask=growth * q.ask,
                reduced_mid=growth * q.mid,
                mid_iv=mid_iv,
            )
        )

    if not points:
        raise EmptyInputError("all quotes were filtered out")

    ts = np.array([p.maturity for p in points])
    ks = np.array([p.reduced_strike for p in points])

    def _bounds(lo: float, hi: float) -> tuple[float, float]:
        # a single-maturity (or single-strike) book still needs an invertible map
        if hi - lo < 1e-12 * max(1.0, abs(hi)):
            pad = max(0.1 * abs(hi), 1e-3)
            return lo - pad, hi + pad
        return lo, hi

    t_lo, t_hi = _bounds(float(ts.min()), float(ts.max()))
    k_lo, k_hi = _bounds(float(ks.min()), float(ks.max()))
    scaling = AffineScaling(t_min=t_lo, t_max=t_hi, k_min=k_lo, k_max=k_hi)
    return MarketFrame(
        points=tuple(points), scaling=scaling, curves=curves, rejected=tuple(rejected)
    )
