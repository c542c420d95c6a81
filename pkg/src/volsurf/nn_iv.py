"""Implied-volatility multilayer perceptron with arbitrage penalties.

A small fully-connected network maps (log T, log-moneyness), affinely
standardized, through softplus hidden layers to a bounded volatility
Sigma(T, kappa); the implied total variance is Theta = Sigma^2 T.  Because
every piece is smooth, the first and second derivatives of Theta needed by
the implied-variance Dupire ratio are propagated in closed form alongside the
values: each layer carries the tuple

    (value, d/dk, d2/dk2, d/dlogT)

and training backpropagates through that extended forward pass, so the
arbitrage penalties (negative calendar term, negative butterfly term, local
variance outside a band) are differentiable and exact on their grid.  The
observation weights are nearest-neighbor distances in the (T, kappa) plane,
which stops dense quote clusters from drowning out isolated points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .local_vol import calendar_butterfly_terms
from .market_data import MarketFrame

log = logging.getLogger(__name__)

SIGMA_LO = 0.01
SIGMA_HI = 2.0


class TrainingError(RuntimeError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, message, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class LossWeights:
    """Per-observation nearest-neighbor distances and their mean."""

    w: np.ndarray
    mu_w: float


@dataclass(frozen=True)
class PenaltyConfig:
    """Arbitrage penalty strengths, local-variance band, and penalty grid."""

    lambdas: tuple = (1.0, 1.0, 1.0)
    band: tuple = (1e-4, 4.0)
    n_maturity: int = 50
    n_moneyness: int = 100
    maturity_range: tuple = (0.005, 10.0)
    moneyness_range: tuple = (0.5, 2.0)

    def __post_init__(self):
        if any(l < 0 for l in self.lambdas) or len(self.lambdas) != 3:
            raise ValueError("lambdas must be three nonnegative numbers")
        lo, hi = self.band
        if not 0.0 < lo < hi:
            raise ValueError("variance band must satisfy 0 < lower < upper")
        if self.n_maturity * self.n_moneyness < 1:
            raise ValueError("penalty grid needs at least one node")

    def grid(self):
        """(T, kappa) arrays of the penalty grid, log-spaced in both axes."""
        t = np.geomspace(self.maturity_range[0], self.maturity_range[1], self.n_maturity)
        money = np.geomspace(
            self.moneyness_range[0], self.moneyness_range[1], self.n_moneyness
        )
        kappa = np.log(money)
        tt, kk = np.meshgrid(t, kappa, indexing="ij")
        return tt.ravel(), kk.ravel()


@dataclass
class NnIvModel:
    """Weights, biases and input/output transforms of the IV network."""

    weights: list
    biases: list
    input_mean: np.ndarray
    input_scale: np.ndarray
    sigma_lo: float = SIGMA_LO
    sigma_hi: float = SIGMA_HI
    spot: float = 100.0

    @classmethod
    def initialize(
        cls, seed: int, hidden: tuple = (40, 40, 40), spot: float = 100.0,
        start_sigma: float = 0.2,
    ):
        """He-scaled hidden layers; the output layer starts small and biased
        so the initial surface sits near ``start_sigma`` with the bounded
        output map far from saturation (saturated sigmoids kill gradients).
        """
        rng = np.random.default_rng(seed)
        sizes = [2, *hidden, 1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(2.0 / fan_in)
            weights.append(rng.normal(scale=scale, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        weights[-1] *= 0.01
        frac = (start_sigma - SIGMA_LO) / (SIGMA_HI - SIGMA_LO)
        biases[-1][:] = math.log(frac / (1.0 - frac))
        return cls(
            weights=weights, biases=biases,
            input_mean=np.zeros(2), input_scale=np.ones(2), spot=spot,
        )

    @classmethod
    def constant(cls, sigma: float, spot: float = 100.0):
        """A network that outputs sigma everywhere (zero hidden weights)."""
        if not SIGMA_LO < sigma < SIGMA_HI:
            raise ValueError(f"sigma must be inside ({SIGMA_LO}, {SIGMA_HI})")
        frac = (sigma - SIGMA_LO) / (SIGMA_HI - SIGMA_LO)
        logit = math.log(frac / (1.0 - frac))
        weights = [np.zeros((4, 2)), np.zeros((4, 4)), np.zeros((1, 4))]
        biases = [np.zeros(4), np.zeros(4), np.full(1, logit)]
        return cls(
            weights=weights, biases=biases,
            input_mean=np.zeros(2), input_scale=np.ones(2), spot=spot,
        )

    def standardized_inputs(self, t, kappa):
        t = np.asarray(t, dtype=float)
        kappa = np.asarray(kappa, dtype=float)
        x0 = (np.log(t) - self.input_mean[0]) / self.input_scale[0]
        x1 = (kappa - self.input_mean[1]) / self.input_scale[1]
        return x0, x1

    def sigma(self, t, kappa):
        """Implied volatility surface value(s)."""
        state = _forward(self, t, kappa)
        out = state.sigma
        return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))

    def theta(self, t, kappa):
        state = _forward(self, t, kappa)
        out = state.sigma**2 * np.asarray(t, dtype=float).ravel()
        return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))

    def forward_theta(self, t, kappa):
        """(Theta, dT Theta, dk Theta, dkk Theta) with analytic derivatives."""
        shape = np.shape(t)
        state = _forward(self, t, kappa)
        theta, d_t, d_k, d_kk = _theta_tuple(self, state)
        if shape == ():
            return float(theta[0]), float(d_t[0]), float(d_k[0]), float(d_kk[0])
        return (
            theta.reshape(shape), d_t.reshape(shape),
            d_k.reshape(shape), d_kk.reshape(shape),
        )


def dupire_terms(model: NnIvModel, t, kappa):
    """Calendar numerator and butterfly denominator of the Dupire ratio."""
    theta, d_t, d_k, d_kk = model.forward_theta(t, kappa)
    if np.any(np.asarray(theta) <= 1e-12):
        raise ValueError("total variance vanished; Dupire terms undefined")
    return calendar_butterfly_terms(theta, d_t, d_k, d_kk, np.asarray(kappa, dtype=float))


# ---------------------------------------------------------------------------
# extended forward / backward passes
# ---------------------------------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class _ForwardState:
    """Everything the backward pass needs, for one batch."""

    t: np.ndarray
    pre: list = field(default_factory=list)    # pre-activations per layer
    a: list = field(default_factory=list)      # value stream per layer input
    p: list = field(default_factory=list)      # d/dk~ stream
    q: list = field(default_factory=list)      # d2/dk~2 stream
    r: list = field(default_factory=list)      # d/dlogT~ stream
    out: tuple = ()                            # (o, op, oq, or) at the head
    sigma: np.ndarray = None
    sigma_streams: tuple = ()                  # (sp, sq, sr) after output map


def _forward(model: NnIvModel, t, kappa) -> _ForwardState:
    t_flat = np.asarray(t, dtype=float).ravel()
    kappa_flat = np.asarray(kappa, dtype=float).ravel()
    x0, x1 = model.standardized_inputs(t_flat, kappa_flat)
    n = t_flat.size

    state = _ForwardState(t=t_flat)
    a = np.vstack([x0, x1])
    p = np.vstack([np.zeros(n), np.ones(n)])
    q = np.zeros((2, n))
    r = np.vstack([np.ones(n), np.zeros(n)])

    n_layers = len(model.weights)
    for idx, (w, b) in enumerate(zip(model.weights, model.biases)):
        state.a.append(a)
        state.p.append(p)
        state.q.append(q)
        state.r.append(r)
        z = w @ a + b[:, None]
        zp = w @ p
        zq = w @ q
        zr = w @ r
        state.pre.append((z, zp, zq, zr))
        if idx < n_layers - 1:
            f1 = _sigmoid(z)
            a = _softplus(z)
            p = f1 * zp
            q = f1 * (1.0 - f1) * zp**2 + f1 * zq
            r = f1 * zr
        else:
            a, p, q, r = z, zp, zq, zr

    o, op, oq, orr = a[0], p[0], q[0], r[0]
    state.out = (o, op, oq, orr)
    span = model.sigma_hi - model.sigma_lo
    s = _sigmoid(o)
    g1 = span * s * (1.0 - s)
    g2 = g1 * (1.0 - 2.0 * s)
    sigma = model.sigma_lo + span * s
    sp = g1 * op
    sq = g2 * op**2 + g1 * oq
    sr = g1 * orr
    state.sigma = sigma
    state.sigma_streams = (sp, sq, sr)
    return state


def _theta_tuple(model: NnIvModel, state: _ForwardState):
    """Theta and its (T, kappa) derivatives from the Sigma streams."""
    t = state.t
    sigma = state.sigma
    sp, sq, sr = state.sigma_streams
    s_t, s_k = model.input_scale[0], model.input_scale[1]
    theta = sigma**2 * t
    d_k = 2.0 * sigma * t * sp / s_k
    d_kk = 2.0 * t * (sp**2 + sigma * sq) / s_k**2
    d_t = sigma**2 + 2.0 * sigma * sr / s_t
    return theta, d_t, d_k, d_kk


def _backward(model: NnIvModel, state: _ForwardState, bar_sigma, bar_streams=None):
    """Gradients of sum(bar_sigma * Sigma + bar_streams . streams) w.r.t. params.

    bar_streams, when given, is the adjoint tuple (sp_bar, sq_bar, sr_bar) of
    the Sigma derivative streams.
    """
    o, op, oq, orr = state.out
    span = model.sigma_hi - model.sigma_lo
    s = _sigmoid(o)
    g1 = span * s * (1.0 - s)
    g2 = g1 * (1.0 - 2.0 * s)
    g3 = span * s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)

    bar_sigma = np.asarray(bar_sigma, dtype=float)
    if bar_streams is None:
        sp_bar = sq_bar = sr_bar = np.zeros_like(bar_sigma)
    else:
        sp_bar, sq_bar, sr_bar = (np.asarray(v, dtype=float) for v in bar_streams)

    o_bar = (
        bar_sigma * g1
        + sp_bar * g2 * op
        + sq_bar * (g3 * op**2 + g2 * oq)
        + sr_bar * g2 * orr
    )
    op_bar = sp_bar * g1 + sq_bar * 2.0 * g2 * op
    oq_bar = sq_bar * g1
    or_bar = sr_bar * g1

    a_bar = o_bar[None, :]
    p_bar = op_bar[None, :]
    q_bar = oq_bar[None, :]
    r_bar = or_bar[None, :]

    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    n_layers = len(model.weights)
    for idx in range(n_layers - 1, -1, -1):
        z, zp, zq, zr = state.pre[idx]
        if idx < n_layers - 1:
            f1 = _sigmoid(z)
            f2 = f1 * (1.0 - f1)
            f3 = f2 * (1.0 - 2.0 * f1)
            z_bar = (
                a_bar * f1
                + p_bar * f2 * zp
                + q_bar * (f3 * zp**2 + f2 * zq)
                + r_bar * f2 * zr
            )
            zp_bar = p_bar * f1 + q_bar * 2.0 * f2 * zp
            zq_bar = q_bar * f1
            zr_bar = r_bar * f1
        else:
            z_bar, zp_bar, zq_bar, zr_bar = a_bar, p_bar, q_bar, r_bar

        a_in = state.a[idx]
        grads_w[idx] = (
            z_bar @ a_in.T
            + zp_bar @ state.p[idx].T
            + zq_bar @ state.q[idx].T
            + zr_bar @ state.r[idx].T
        )
        grads_b[idx] = z_bar.sum(axis=1)
        w = model.weights[idx]
        a_bar = w.T @ z_bar
        p_bar = w.T @ zp_bar
        q_bar = w.T @ zq_bar
        r_bar = w.T @ zr_bar
    return grads_w, grads_b


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def compute_weights(points: np.ndarray) -> LossWeights:
    """Nearest-neighbor distance of every (T, kappa) observation point."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least two observation points")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dist, np.inf)
    w = dist.min(axis=1)
    if np.any(w == 0.0):
        log.warning("duplicate observation points produce zero weights")
    return LossWeights(w=w, mu_w=float(np.mean(w)))


def _penalty_pieces(theta, d_t, d_k, d_kk, kappa, band, denom_floor=1e-8):
    """Raw penalty integrands and the indicator sets the gradient needs."""
    cal, butt = calendar_butterfly_terms(theta, d_t, d_k, d_kk, kappa)
    cal_neg = np.maximum(-cal, 0.0)
    butt_neg = np.maximum(-butt, 0.0)
    usable = butt > denom_floor
    ratio = np.where(usable, cal / np.where(usable, butt, 1.0), 0.0)
    above = usable & (ratio > band[1])
    below = usable & (ratio < band[0])
    band_excess = np.where(above, ratio - band[1], 0.0) + np.where(
        below, band[0] - ratio, 0.0
    )
    return cal, butt, cal_neg, butt_neg, ratio, above, below, band_excess, usable


def loss(
    model: NnIvModel,
    data_t: np.ndarray,
    data_kappa: np.ndarray,
    data_iv: np.ndarray,
    weights: LossWeights,
    penalty: PenaltyConfig,
):
    """Penalized training loss and its components.

    total = sqrt(mean((w_i (Sigma_i - iv_i) / iv_i)^2))
            + mu_w * mean(lambda1 cal^- + lambda2 butt^- + lambda3 band_excess)

    Returns (total, components) with the fit term and each lambda term.
    """
    state = _forward(model, data_t, data_kappa)
    rel = (state.sigma - data_iv) / data_iv
    fit = math.sqrt(float(np.mean((weights.w * rel) ** 2)))

    grid_t, grid_kappa = penalty.grid()
    gstate = _forward(model, grid_t, grid_kappa)
    theta, d_t, d_k, d_kk = _theta_tuple(model, gstate)
    _, _, cal_neg, butt_neg, _, _, _, band_excess, _ = _penalty_pieces(
        theta, d_t, d_k, d_kk, grid_kappa, penalty.band
    )
    lam = penalty.lambdas
    scale = weights.mu_w
    comp = {
        "fit_rmse": fit,
        "calendar_penalty": scale * lam[0] * float(np.mean(cal_neg)),
        "butterfly_penalty": scale * lam[1] * float(np.mean(butt_neg)),
        "band_penalty": scale * lam[2] * float(np.mean(band_excess)),
        "mean_calendar_negative": float(np.mean(cal_neg)),
        "mean_butterfly_negative": float(np.mean(butt_neg)),
        "mean_band_excess": float(np.mean(band_excess)),
    }
    total = fit + comp["calendar_penalty"] + comp["butterfly_penalty"] + comp["band_penalty"]
    return total, comp


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Architecture, optimizer and penalty settings for a training run."""

    hidden: tuple = (40, 40, 40)
    epochs: int = 3000
    learning_rate: float = 1e-3
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    lambda_candidates: tuple | None = None   # None: train once with penalty.lambdas
    search_epochs: int = 300
    seed: int = 0


def _adam_step(params, grads, moments, lr, step, beta1=0.9, beta2=0.999, eps=1e-8):
    m, v = moments
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m[i] = beta1 * m[i] + (1 - beta1) * g
        v[i] = beta2 * v[i] + (1 - beta2) * g * g
        m_hat = m[i] / (1 - beta1**step)
        v_hat = v[i] / (1 - beta2**step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return new_params


def _loss_and_grads(model, data_t, data_kappa, data_iv, weights, penalty):
    """Total loss, components, and parameter gradients (weights then biases)."""
    lam = penalty.lambdas
    mu_w = weights.mu_w
    n = data_t.size

    # fit term and its adjoint on Sigma
    state = _forward(model, data_t, data_kappa)
    rel = (state.sigma - data_iv) / data_iv
    fit = math.sqrt(float(np.mean((weights.w * rel) ** 2)))
    denom = max(fit, 1e-12)
    bar_sigma_data = (weights.w**2 * rel) / (data_iv * n * denom)
    gw_data, gb_data = _backward(model, state, bar_sigma_data)

    # penalty terms and their adjoints on the Theta streams
    grid_t, grid_kappa = penalty.grid()
    m_grid = grid_t.size
    gstate = _forward(model, grid_t, grid_kappa)
    theta, d_t, d_k, d_kk = _theta_tuple(model, gstate)
    cal, butt, cal_neg, butt_neg, ratio, above, below, band_excess, usable = (
        _penalty_pieces(theta, d_t, d_k, d_kk, grid_kappa, penalty.band)
    )
    pen1 = mu_w * lam[0] * float(np.mean(cal_neg))
    pen2 = mu_w * lam[1] * float(np.mean(butt_neg))
    pen3 = mu_w * lam[2] * float(np.mean(band_excess))
    total = fit + pen1 + pen2 + pen3

    bar_cal = np.where(cal < 0.0, -mu_w * lam[0] / m_grid, 0.0)
    bar_butt = np.where(butt < 0.0, -mu_w * lam[1] / m_grid, 0.0)
    band_sign = np.where(above, 1.0, 0.0) - np.where(below, 1.0, 0.0)
    safe_butt = np.where(usable, butt, 1.0)
    bar_cal = bar_cal + np.where(
        usable, mu_w * lam[2] / m_grid * band_sign / safe_butt, 0.0
    )
    bar_butt = bar_butt + np.where(
        usable, -mu_w * lam[2] / m_grid * band_sign * ratio / safe_butt, 0.0
    )

    # chain (cal, butt) adjoints into (Theta, dT, dk, dkk) adjoints
    kap = grid_kappa
    bar_theta = bar_butt * (
        (kap / theta**2) * d_k + 0.25 * (1.0 / theta**2 - 2.0 * kap**2 / theta**3) * d_k**2
    )
    bar_dt = bar_cal
    bar_dk = bar_butt * (-kap / theta + 0.5 * (-0.25 - 1.0 / theta + kap**2 / theta**2) * d_k)
    bar_dkk = bar_butt * 0.5

    # and into the Sigma streams
    s_t, s_k = model.input_scale[0], model.input_scale[1]
    sig = gstate.sigma
    sp, sq, sr = gstate.sigma_streams
    t_arr = gstate.t
    bar_sig = (
        bar_theta * 2.0 * sig * t_arr
        + bar_dt * (2.0 * sig + 2.0 * sr / s_t)
        + bar_dk * 2.0 * t_arr * sp / s_k
        + bar_dkk * 2.0 * t_arr * sq / s_k**2
    )
    bar_sp = bar_dk * 2.0 * t_arr * sig / s_k + bar_dkk * 4.0 * t_arr * sp / s_k**2
    bar_sq = bar_dkk * 2.0 * t_arr * sig / s_k**2
    bar_sr = bar_dt * 2.0 * sig / s_t
    gw_pen, gb_pen = _backward(model, gstate, bar_sig, (bar_sp, bar_sq, bar_sr))

    grads = [a + b for a, b in zip(gw_data + gb_data, gw_pen + gb_pen)]
    parts = {"fit": fit, "cal": pen1, "butt": pen2, "band": pen3}
    return total, parts, grads


def _train_once(
    frame_t, frame_kappa, frame_iv, weights, penalty, cfg, seed, spot, epochs
):
    start = float(np.clip(np.mean(frame_iv), 0.05, 1.5))
    model = NnIvModel.initialize(seed=seed, hidden=cfg.hidden, spot=spot, start_sigma=start)
    log_t = np.log(frame_t)
    model.input_mean = np.array([float(np.mean(log_t)), float(np.mean(frame_kappa))])
    model.input_scale = np.array(
        [max(float(np.std(log_t)), 1e-8), max(float(np.std(frame_kappa)), 1e-8)]
    )

    flat = model.weights + model.biases
    moments = ([np.zeros_like(p) for p in flat], [np.zeros_like(p) for p in flat])
    best_total = np.inf
    best_params = None
    history = []

    for epoch in range(1, epochs + 1):
        total, parts, grads = _loss_and_grads(
            model, frame_t, frame_kappa, frame_iv, weights, penalty
        )
        if not np.isfinite(total):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch)
        if total < best_total:
            best_total = total
            best_params = ([w.copy() for w in model.weights], [b.copy() for b in model.biases])

        flat = model.weights + model.biases
        flat = _adam_step(flat, grads, moments, cfg.learning_rate, epoch)
        n_w = len(model.weights)
        model.weights = flat[:n_w]
        model.biases = flat[n_w:]
        history.append({"epoch": epoch, "total": total, **parts})

    if best_params is not None:
        model.weights, model.biases = best_params
    return model, history


def train(frame: MarketFrame, config: TrainConfig | None = None):
    """Train the IV network on a frame's mid implied volatilities.

    Duplicate (T, kappa) observations are collapsed to their mean IV.  When
    ``lambda_candidates`` is set, each candidate trains for ``search_epochs``,
    candidates whose arbitrage penalties vanish on the grid are ranked by fit
    RMSE (falling back to total loss when none are clean), and the winner is
    retrained for the full budget.  Returns (model, report).
    """
    cfg = config or TrainConfig()
    pts = {}
    for p in frame.points:
        pts.setdefault((p.maturity, p.log_moneyness), []).append(p.mid_iv)
    n_dupes = sum(len(v) - 1 for v in pts.values())
    if n_dupes:
        log.warning("collapsed %d duplicate observation points to mean IV", n_dupes)
    keys = sorted(pts)
    data_t = np.array([k[0] for k in keys])
    data_kappa = np.array([k[1] for k in keys])
    data_iv = np.array([float(np.mean(pts[k])) for k in keys])
    if data_t.size < 2:
        raise ValueError("need at least two distinct observation points")
    weights = compute_weights(np.column_stack([data_t, data_kappa]))
    spot = frame.curves.spot

    candidates = cfg.lambda_candidates
    penalty = cfg.penalty
    chosen = penalty
    search_summary = []
    if candidates:
        ranked = []
        for idx, lam in enumerate(candidates):
            pen = PenaltyConfig(
                lambdas=tuple(lam), band=penalty.band,
                n_maturity=penalty.n_maturity, n_moneyness=penalty.n_moneyness,
                maturity_range=penalty.maturity_range,
                moneyness_range=penalty.moneyness_range,
            )
            mdl, _ = _train_once(
                data_t, data_kappa, data_iv, weights, pen, cfg,
                seed=cfg.seed + idx, spot=spot, epochs=cfg.search_epochs,
            )
            _, comp = loss(mdl, data_t, data_kappa, data_iv, weights, pen)
            clean = (
                comp["mean_calendar_negative"] <= 1e-12
                and comp["mean_butterfly_negative"] <= 1e-12
            )
            total = comp["fit_rmse"] + comp["calendar_penalty"] + comp["butterfly_penalty"]
            ranked.append((not clean, comp["fit_rmse"] if clean else total, lam))
            search_summary.append(
                {"lambdas": list(lam), "clean": clean, "fit_rmse": comp["fit_rmse"]}
            )
        ranked.sort()
        chosen = PenaltyConfig(
            lambdas=tuple(ranked[0][2]), band=penalty.band,
            n_maturity=penalty.n_maturity, n_moneyness=penalty.n_moneyness,
            maturity_range=penalty.maturity_range,
            moneyness_range=penalty.moneyness_range,
        )

    model, history = _train_once(
        data_t, data_kappa, data_iv, weights, chosen, cfg,
        seed=cfg.seed, spot=spot, epochs=cfg.epochs,
    )
    total, comp = loss(model, data_t, data_kappa, data_iv, weights, chosen)
    report = {
        "final_total": total,
        "components": comp,
        "lambdas": list(chosen.lambdas),
        "epochs": cfg.epochs,
        "n_observations": int(data_t.size),
        "duplicates_collapsed": n_dupes,
        "lambda_search": search_summary,
        "history": history,
    }
    return model, report


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_to_json(model: NnIvModel) -> dict:
    return {
        "version": "nnivmodel/1",
        "hidden": [w.shape[0] for w in model.weights[:-1]],
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "input_mean": model.input_mean.tolist(),
        "input_scale": model.input_scale.tolist(),
        "sigma_lo": model.sigma_lo,
        "sigma_hi": model.sigma_hi,
        "spot": model.spot,
    }


def model_from_json(doc: dict) -> NnIvModel:
    if doc.get("version") != "nnivmodel/1":
        raise ValueError(f"unsupported NN model version {doc.get('version')!r}")
    sizes = [2, *doc["hidden"], 1]
    weights = [
        np.asarray(w, dtype=float).reshape(fan_out, fan_in)
        for w, fan_in, fan_out in zip(doc["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    return NnIvModel(
        weights=weights,
        biases=biases,
        input_mean=np.asarray(doc["input_mean"], dtype=float),
        input_scale=np.asarray(doc["input_scale"], dtype=float),
        sigma_lo=doc["sigma_lo"],
        sigma_hi=doc["sigma_hi"],
        spot=doc["spot"],
    )
