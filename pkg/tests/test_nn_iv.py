import math

import numpy as np
import pytest

from volsurf.black_scholes import put_price
from volsurf.market_data import Curve, CurveSet, QuoteRecord, build_frame
from volsurf.nn_iv import (
    LossWeights,
    NnIvModel,
    PenaltyConfig,
    TrainConfig,
    TrainingError,
    _loss_and_grads,
    _train_once,
    compute_weights,
    dupire_terms,
    loss,
    model_from_json,
    model_to_json,
    train,
)

SPOT = 100.0


def small_model(seed=0, lively=False):
    model = NnIvModel.initialize(seed=seed, hidden=(8, 8, 8), spot=SPOT)
    model.input_mean = np.array([0.1, -0.05])
    model.input_scale = np.array([0.9, 0.25])
    if lively:
        # undo the deliberately small output layer of initialize() so the
        # surface has derivative magnitudes worth checking against FD noise
        model.weights[-1] = model.weights[-1] * 40.0
    return model


def flat_frame(sigma=0.2, n_t=8, n_k=11):
    curves = CurveSet(spot=SPOT, rate_curve=Curve.flat(0.01), dividend_curve=Curve.flat(0.0))
    quotes = []
    for t in np.linspace(0.25, 2.0, n_t):
        fwd = float(curves.forward(t))
        df = float(curves.discount(t))
        for m in np.linspace(0.85, 1.25, n_k):
            strike = m * SPOT
            mid = put_price(fwd, strike, t, sigma, df)
            quotes.append(QuoteRecord(t, strike, mid, mid, listed_iv=sigma))
    return build_frame(quotes, curves)


class TestConstantNetwork:
    def test_flat_surface_calculus(self):
        model = NnIvModel.constant(0.25)
        theta, d_t, d_k, d_kk = model.forward_theta(1.7, 0.3)
        assert theta == pytest.approx(0.25**2 * 1.7, rel=1e-12)
        assert d_t == pytest.approx(0.25**2, rel=1e-12)
        assert d_k == 0.0
        assert d_kk == 0.0

    def test_theta_linear_in_maturity(self):
        model = NnIvModel.constant(0.2)
        t1 = model.theta(1.0, 0.1)
        t4 = model.theta(4.0, 0.1)
        assert t4 == pytest.approx(4.0 * t1, rel=1e-12)

    def test_constant_rejects_out_of_band(self):
        with pytest.raises(ValueError):
            NnIvModel.constant(3.0)

    def test_dupire_terms_flat(self):
        model = NnIvModel.constant(0.2)
        cal, butt = dupire_terms(model, np.array([0.5, 1.0]), np.array([0.2, -0.3]))
        assert cal == pytest.approx([0.04, 0.04])
        assert butt == pytest.approx([1.0, 1.0])


class TestDerivatives:
    def test_analytic_matches_fd_100_cases(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for case in range(100):
            model = small_model(seed=case, lively=True)
            t = float(rng.uniform(0.1, 3.0))
            kappa = float(rng.uniform(-0.5, 0.5))
            theta, d_t, d_k, d_kk = model.forward_theta(t, kappa)
            h_k = 1e-4 * model.input_scale[1]
            fd_k = (model.theta(t, kappa + h_k) - model.theta(t, kappa - h_k)) / (2 * h_k)
            fd_kk = (
                model.theta(t, kappa + h_k)
                - 2 * model.theta(t, kappa)
                + model.theta(t, kappa - h_k)
            ) / h_k**2
            h_t = 1e-5 * t
            fd_t = (model.theta(t + h_t, kappa) - model.theta(t - h_t, kappa)) / (2 * h_t)
            for got, want in ((d_t, fd_t), (d_k, fd_k), (d_kk, fd_kk)):
                # denominator floored at 1e-3: below that the central
                # difference's own roundoff (~1e-8) dominates any comparison
                worst = max(worst, abs(got - want) / max(abs(want), 1e-3))
        assert worst <= 1e-4

    def test_sigma_in_band(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            model = small_model(seed)
            t = rng.uniform(0.05, 5.0, 200)
            kappa = rng.uniform(-1.5, 1.5, 200)
            sig = model.sigma(t, kappa)
            assert np.all(sig > model.sigma_lo)
            assert np.all(sig < model.sigma_hi)

    def test_kappa_only_dependence_gives_unit_butterfly(self):
        # silence the kappa input: Sigma depends on T only, so butt_k = 1
        model = small_model(seed=3)
        model.weights[0][:, 1] = 0.0
        cal, butt = dupire_terms(model, np.array([0.7, 1.3]), np.array([0.25, -0.1]))
        assert butt == pytest.approx([1.0, 1.0], abs=1e-12)

    def test_standardization_shift_consistency(self):
        model = small_model(seed=5)
        shift = 0.37
        shifted = NnIvModel(
            weights=[w.copy() for w in model.weights],
            biases=[b.copy() for b in model.biases],
            input_mean=model.input_mean + np.array([0.0, shift]),
            input_scale=model.input_scale.copy(),
            spot=model.spot,
        )
        t = np.array([0.5, 1.0, 2.0])
        kappa = np.array([-0.2, 0.0, 0.3])
        assert shifted.sigma(t, kappa + shift) == pytest.approx(model.sigma(t, kappa), rel=1e-14)


class TestWeights:
    def test_three_point_example(self):
        w = compute_weights(np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 3.0]]))
        assert w.w == pytest.approx([1.0, 1.0, 2.0])
        assert w.mu_w == pytest.approx(4.0 / 3.0)

    def test_two_points_symmetric(self):
        w = compute_weights(np.array([[0.0, 0.0], [0.3, 0.4]]))
        assert w.w == pytest.approx([0.5, 0.5])

    def test_uniform_lattice(self):
        pts = np.array([[t, k] for t in np.arange(4) for k in np.arange(5)], dtype=float)
        w = compute_weights(pts * 0.25)
        assert w.w == pytest.approx(np.full(20, 0.25))

    def test_duplicates_warn(self, caplog):
        with caplog.at_level("WARNING"):
            w = compute_weights(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]))
        assert any("duplicate" in r.message for r in caplog.records)
        assert w.w[0] == 0.0


class TestLoss:
    def setup_data(self):
        t = np.array([0.5, 1.0, 1.5, 2.0])
        kappa = np.array([-0.1, 0.0, 0.1, 0.2])
        iv = np.array([0.22, 0.2, 0.19, 0.21])
        weights = compute_weights(np.column_stack([t, kappa]))
        return t, kappa, iv, weights

    def test_zero_lambda_is_pure_fit(self):
        t, kappa, iv, weights = self.setup_data()
        model = small_model()
        pen = PenaltyConfig(lambdas=(0.0, 0.0, 0.0), n_maturity=5, n_moneyness=6)
        total, comp = loss(model, t, kappa, iv, weights, pen)
        assert total == pytest.approx(comp["fit_rmse"])
        assert comp["calendar_penalty"] == 0.0
        assert comp["butterfly_penalty"] == 0.0
        assert comp["band_penalty"] == 0.0

    def test_flat_model_in_band_has_zero_penalty(self):
        t, kappa, iv, weights = self.setup_data()
        model = NnIvModel.constant(0.2)
        pen = PenaltyConfig(lambdas=(5.0, 5.0, 5.0), n_maturity=6, n_moneyness=7)
        total, comp = loss(model, t, kappa, iv, weights, pen)
        assert comp["calendar_penalty"] == 0.0
        assert comp["butterfly_penalty"] == 0.0
        assert comp["band_penalty"] == 0.0

    def test_perfect_fit_zero_fit_term(self):
        t, kappa, _, weights = self.setup_data()
        model = NnIvModel.constant(0.2)
        iv = np.full(4, 0.2)
        pen = PenaltyConfig(lambdas=(1.0, 1.0, 1.0), n_maturity=5, n_moneyness=5)
        total, comp = loss(model, t, kappa, iv, weights, pen)
        assert comp["fit_rmse"] == pytest.approx(0.0, abs=1e-14)

    def test_band_violation_penalized(self):
        t, kappa, iv, weights = self.setup_data()
        model = NnIvModel.constant(0.5)  # local variance 0.25 above a 0.04 cap
        pen = PenaltyConfig(lambdas=(0.0, 0.0, 1.0), band=(1e-4, 0.04), n_maturity=5, n_moneyness=5)
        _, comp = loss(model, t, kappa, iv, weights, pen)
        assert comp["band_penalty"] > 0.0

    def test_penalty_components_nonnegative(self):
        t, kappa, iv, weights = self.setup_data()
        for seed in range(5):
            model = small_model(seed)
            pen = PenaltyConfig(lambdas=(1.0, 2.0, 3.0), n_maturity=6, n_moneyness=6)
            _, comp = loss(model, t, kappa, iv, weights, pen)
            assert comp["calendar_penalty"] >= 0.0
            assert comp["butterfly_penalty"] >= 0.0
            assert comp["band_penalty"] >= 0.0


class TestGradients:
    def test_parameter_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        model = small_model(seed=11)
        t = rng.uniform(0.2, 2.5, 12)
        kappa = rng.uniform(-0.4, 0.4, 12)
        iv = rng.uniform(0.15, 0.3, 12)
        weights = compute_weights(np.column_stack([t, kappa]))
        pen = PenaltyConfig(lambdas=(0.7, 1.3, 2.1), band=(0.01, 0.09), n_maturity=6, n_moneyness=7)

        def total_at(params_flat):
            probe = NnIvModel(
                weights=[p.copy() for p in params_flat[: len(model.weights)]],
                biases=[p.copy() for p in params_flat[len(model.weights):]],
                input_mean=model.input_mean,
                input_scale=model.input_scale,
                spot=model.spot,
            )
            tot, _, _ = _loss_and_grads(probe, t, kappa, iv, weights, pen)
            return tot

        total, _, grads = _loss_and_grads(model, t, kappa, iv, weights, pen)
        flat = model.weights + model.biases
        rng2 = np.random.default_rng(3)
        checked = 0
        for layer in range(len(flat)):
            shape = flat[layer].shape
            for _ in range(3):
                idx = tuple(rng2.integers(0, s) for s in shape)
                h = 1e-6
                bumped_up = [p.copy() for p in flat]
                bumped_dn = [p.copy() for p in flat]
                bumped_up[layer][idx] += h
                bumped_dn[layer][idx] -= h
                fd = (total_at(bumped_up) - total_at(bumped_dn)) / (2 * h)
                an = grads[layer][idx]
                assert an == pytest.approx(fd, rel=5e-4, abs=1e-8), (layer, idx)
                checked += 1
        assert checked >= 24


class TestTraining:
    def test_flat_synthetic_recovery(self):
        frame = flat_frame(sigma=0.2)
        cfg = TrainConfig(
            hidden=(20, 20, 20),
            epochs=1500,
            penalty=PenaltyConfig(lambdas=(1.0, 1.0, 1.0), n_maturity=15, n_moneyness=20),
            seed=1,
        )
        model, report = train(frame, cfg)
        # Sigma within half a vol point of 20% on the data hull
        t = np.linspace(0.3, 1.9, 9)
        kappa = np.linspace(-0.14, 0.2, 9)
        tt, kk = np.meshgrid(t, kappa, indexing="ij")
        sig = model.sigma(tt, kk)
        assert np.max(np.abs(sig - 0.2)) < 0.005
        # arbitrage penalties vanish on the grid
        assert report["components"]["mean_calendar_negative"] <= 1e-12
        assert report["components"]["mean_butterfly_negative"] <= 1e-12

    def test_training_deterministic(self):
        frame = flat_frame(n_t=4, n_k=5)
        cfg = TrainConfig(
            hidden=(8, 8), epochs=50,
            penalty=PenaltyConfig(n_maturity=5, n_moneyness=6), seed=3,
        )
        m1, _ = train(frame, cfg)
        m2, _ = train(frame, cfg)
        for w1, w2 in zip(m1.weights, m2.weights):
            assert np.array_equal(w1, w2)

    def test_best_so_far_monotone(self):
        frame = flat_frame(n_t=4, n_k=5)
        cfg = TrainConfig(
            hidden=(8, 8), epochs=120,
            penalty=PenaltyConfig(n_maturity=5, n_moneyness=6), seed=3,
        )
        _, report = train(frame, cfg)
        best = np.minimum.accumulate([h["total"] for h in report["history"]])
        assert np.all(np.diff(best) <= 0.0)

    def test_divergent_loss_raises(self):
        t = np.array([0.5, 1.0])
        kappa = np.array([0.0, 0.1])
        iv = np.array([0.2, np.nan])
        weights = LossWeights(w=np.array([0.5, 0.5]), mu_w=0.5)
        cfg = TrainConfig(hidden=(4,), epochs=5)
        with pytest.raises(TrainingError) as err:
            _train_once(
                t, kappa, iv, weights, PenaltyConfig(n_maturity=3, n_moneyness=3),
                cfg, seed=0, spot=SPOT, epochs=5,
            )
        assert err.value.epoch == 1

    def test_unpenalized_run_on_arbitrable_data_reports_positive_stats(self):
        # total variance decreasing in maturity: calendar-arbitrageable IVs
        curves = CurveSet(
            spot=SPOT, rate_curve=Curve.flat(0.0), dividend_curve=Curve.flat(0.0)
        )
        quotes = []
        for t in (0.5, 1.0, 1.5, 2.0):
            iv = math.sqrt(0.05 * (2.6 - t) / t)
            for m in (0.9, 0.95, 1.0, 1.05, 1.1):
                strike = m * SPOT
                mid = put_price(SPOT, strike, t, iv)
                quotes.append(QuoteRecord(t, strike, mid, mid, listed_iv=iv))
        frame = build_frame(quotes, curves)
        cfg = TrainConfig(
            hidden=(12, 12), epochs=400,
            penalty=PenaltyConfig(lambdas=(0.0, 0.0, 0.0), n_maturity=8, n_moneyness=10,
                                  maturity_range=(0.3, 2.2), moneyness_range=(0.9, 1.1)),
            seed=4,
        )
        model, report = train(frame, cfg)
        comp = report["components"]
        # the unpenalized fit reproduces the decreasing term structure, so the
        # raw calendar statistic is strictly positive even though lambda = 0
        assert comp["mean_calendar_negative"] > 0.0
        assert comp["calendar_penalty"] == 0.0

    def test_lambda_search_selects_and_reports(self):
        frame = flat_frame(n_t=4, n_k=5)
        cfg = TrainConfig(
            hidden=(8, 8), epochs=60, search_epochs=30,
            penalty=PenaltyConfig(n_maturity=5, n_moneyness=6),
            lambda_candidates=((0.1, 0.1, 0.1), (1.0, 1.0, 1.0)),
            seed=2,
        )
        model, report = train(frame, cfg)
        assert len(report["lambda_search"]) == 2
        assert report["lambdas"] in ([0.1, 0.1, 0.1], [1.0, 1.0, 1.0])


class TestSerialization:
    def test_round_trip(self):
        model = small_model(seed=13)
        doc = model_to_json(model)
        back = model_from_json(doc)
        t = np.array([0.5, 1.5])
        kappa = np.array([-0.1, 0.2])
        assert back.sigma(t, kappa) == pytest.approx(model.sigma(t, kappa), rel=1e-15)
        assert model_to_json(back) == doc

    def test_version_rejected(self):
        with pytest.raises(ValueError, match="version"):
            model_from_json({"version": "gpmodel/1"})
