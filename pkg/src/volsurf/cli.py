"""Command-line front end.

Subcommands cover the full pipelines: synthetic data generation,
calibration of the three surface models, local-volatility extraction,
repricing backtests, and arbitrage checks.  Exit codes: 0 success,
2 input problem, 3 numerical failure; failures also emit a one-line
machine-readable JSON error on stderr.

Heavy imports happen inside the handlers so `--help` stays instant and the
VOLSURF_THREADS cap can be applied before the numerics libraries load.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

DEFAULT_SEED = 20240 + 517


class CliInputError(Exception):
    pass


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def _apply_thread_cap() -> None:
    cap = os.environ.get("VOLSURF_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _outdir(path):
    from pathlib import Path

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_market(args):
    from .market_data import CurveSet, build_frame, load_curve, load_quotes

    for path in (args.quotes, args.rates, args.divs):
        if not os.path.exists(path):
            raise CliInputError(f"input file not found: {path}")
    quotes = load_quotes(args.quotes)
    curves = CurveSet(
        spot=args.spot,
        rate_curve=load_curve(args.rates),
        dividend_curve=load_curve(args.divs),
    )
    frame = build_frame(quotes, curves)
    return frame, curves


def _split_frame(frame, holdout: bool):
    """Deterministic alternating train/test split by sorted (T, K)."""
    from .market_data import MarketFrame

    if not holdout:
        return frame, frame
    order = sorted(range(len(frame.points)),
                   key=lambda i: (frame.points[i].maturity, frame.points[i].strike))
    train_idx = order[0::2]
    test_idx = order[1::2]

    def sub(indices):
        return MarketFrame(
            points=tuple(frame.points[i] for i in indices),
            scaling=frame.scaling,
            curves=frame.curves,
        )

    return sub(train_idx), sub(test_idx)


def _fit_report(price_fn, frame_train, frame_test):
    from .backtest import report

    import numpy as np

    out = {}
    for tag, frame in (("train", frame_train), ("test", frame_test)):
        prices = np.asarray(price_fn(frame))
        rep = report(prices, frame, method=tag)
        out[f"{tag}_price_rmse"] = rep.price_rmse
        out[f"{tag}_iv_rmse"] = rep.iv_rmse
        out[f"{tag}_iv_failures"] = rep.n_iv_failures
        out[f"{tag}_n"] = len(frame.points)
    return out


def _gp_price_fn(model):
    import numpy as np

    def fn(frame):
        t = np.array([p.maturity for p in frame.points])
        k = np.array([p.reduced_strike for p in frame.points])
        reduced = model.price(t, k)
        growth = np.array([float(frame.curves.growth(ti)) for ti in t])
        return reduced / growth

    return fn


def _nn_price_fn(model):
    import numpy as np

    from .black_scholes import put_price

    def fn(frame):
        out = []
        for p in frame.points:
            iv = model.sigma(p.maturity, p.log_moneyness)
            out.append(
                put_price(
                    float(frame.curves.forward(p.maturity)), p.strike, p.maturity,
                    iv, float(frame.curves.discount(p.maturity)),
                )
            )
        return np.asarray(out)

    return fn


def _ssvi_price_fn(surface):
    import math

    import numpy as np

    from .black_scholes import put_price
    from .ssvi import interpolate_slice, svi_total_variance

    def fn(frame):
        out = []
        for p in frame.points:
            slice_params = interpolate_slice(surface, p.maturity)
            total = float(svi_total_variance(slice_params, p.log_moneyness))
            iv = math.sqrt(max(total, 1e-14) / p.maturity)
            out.append(
                put_price(
                    float(frame.curves.forward(p.maturity)), p.strike, p.maturity,
                    iv, float(frame.curves.discount(p.maturity)),
                )
            )
        return np.asarray(out)

    return fn


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    from .serialize import dump_json

    out = _outdir(args.out)
    logging.basicConfig(
        filename=str(out / "run.log"), level=logging.INFO, force=True,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    frame, curves = _load_market(args)
    frame_train, frame_test = _split_frame(frame, not args.no_holdout)
    started = time.perf_counter()

    if args.method == "gp":
        from .gp_price_surface import (
            BasisGrid,
            GpFitConfig,
            fit_hyperparameters,
            fit_map,
            model_to_json,
            sample_posterior,
        )

        grid = BasisGrid(n_t=args.grid_t, n_k=args.grid_k)
        params = fit_hyperparameters(
            frame_train, grid, GpFitConfig(n_starts=args.starts, seed=args.seed)
        )
        model = fit_map(frame_train, grid, params)
        dump_json(model_to_json(model), out / "model.json")
        report = {
            "method": "gp",
            "params": model_to_json(model)["params"],
            "grid": {"n_t": grid.n_t, "n_k": grid.n_k},
            "qp": model.qp_diagnostics,
            "min_constraint_slack": model.constraint_slack(),
            **_fit_report(_gp_price_fn(model), frame_train, frame_test),
        }
        if args.paths > 0:
            paths = sample_posterior(model, n_paths=args.paths, seed=args.seed)
            dump_json(
                {"version": "gppaths/1", "n_paths": args.paths,
                 "paths": [list(map(float, row)) for row in paths]},
                out / "paths.json",
            )
            report["posterior_paths"] = args.paths

    elif args.method == "nn":
        from .nn_iv import PenaltyConfig, TrainConfig, model_to_json, train

        lambdas = tuple(float(v) for v in args.lam.split(","))
        penalty = PenaltyConfig(
            lambdas=lambdas, n_maturity=args.penalty_t, n_moneyness=args.penalty_k
        )
        candidates = None
        if args.lambda_search:
            levels = (0.1, 1.0, 10.0)
            candidates = tuple((a, b, c) for a in levels for b in levels for c in levels)
        cfg = TrainConfig(
            epochs=args.epochs, penalty=penalty, seed=args.seed,
            lambda_candidates=candidates,
        )
        model, train_report = train(frame_train, cfg)
        dump_json(model_to_json(model), out / "model.json")
        history = train_report.pop("history")
        report = {
            "method": "nn",
            **train_report,
            **_fit_report(_nn_price_fn(model), frame_train, frame_test),
        }
        dump_json({"history": history}, out / "training_history.json")

    elif args.method == "ssvi":
        from .ssvi import calibrate, check_no_arbitrage, model_to_json

        params, surface = calibrate(frame_train)
        dump_json(model_to_json(params, surface, spot=curves.spot), out / "model.json")
        report = {
            "method": "ssvi",
            "rho": params.rho,
            "eta": params.eta,
            "no_arbitrage": check_no_arbitrage(params),
            **_fit_report(_ssvi_price_fn(surface), frame_train, frame_test),
        }
    else:
        raise CliInputError(f"unknown calibration method {args.method!r}")

    report["runtime_seconds"] = time.perf_counter() - started
    report["seed"] = args.seed
    report["n_quotes"] = len(frame)
    dump_json(report, out / "report.json")
    print(json.dumps({"out": str(out), "method": args.method,
                      "train_iv_rmse": report.get("train_iv_rmse"),
                      "test_iv_rmse": report.get("test_iv_rmse")}))
    return EXIT_OK


def _load_model_doc(path):
    if not os.path.exists(path):
        raise CliInputError(f"model file not found: {path}")
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def cmd_localvol(args) -> int:
    import numpy as np

    from .local_vol import cap_and_report, dupire_fd, dupire_iv, write_grid_csv, write_grid_json
    from .serialize import dump_json

    out = _outdir(args.out)
    doc = _load_model_doc(args.model)
    version = doc.get("version", "")

    if version == "gpmodel/1":
        from .gp_price_surface import model_from_json

        model = model_from_json(doc)
        basis_spacing = model.grid.h_k
        eval_spacing = 1.0 / (args.grid_k - 1)
        if eval_spacing < 2.0 * basis_spacing - 1e-12:
            raise CliInputError(
                f"evaluation grid too fine in strike: {args.grid_k} nodes against "
                f"{model.grid.n_k} basis nodes (need spacing ratio >= 2)"
            )
        scaling = model.scaling
        u = np.linspace(0.0, 1.0, args.grid_t)
        v = np.linspace(0.0, 1.0, args.grid_k)
        t_axis = scaling.t_min + u * (scaling.t_max - scaling.t_min)
        k_axis = scaling.k_min + v * (scaling.k_max - scaling.k_min)
        grid = dupire_fd(model.price, t_axis, k_axis)
    elif version in ("nnivmodel/1", "ssvi/1"):
        if version == "nnivmodel/1":
            from .nn_iv import model_from_json

            model = model_from_json(doc)
            theta_fn = model.forward_theta
            spot = model.spot
            t_lo, t_hi = args.t_range if args.t_range else (0.1, 2.0)
        else:
            from .ssvi import model_from_json, surface_theta_fn

            _, surface, spot = model_from_json(doc)
            theta_fn = surface_theta_fn(surface)
            t_lo, t_hi = (
                args.t_range if args.t_range
                else (surface.maturities[0], surface.maturities[-1])
            )
        k_lo, k_hi = (r * spot for r in args.k_range)
        t_axis = np.linspace(t_lo, t_hi, args.grid_t)
        k_axis = np.linspace(k_lo, k_hi, args.grid_k)
        grid = dupire_iv(theta_fn, t_axis, k_axis, spot=spot)
    else:
        raise CliInputError(f"unsupported model version {version!r}")

    capped, summary = cap_and_report(grid, args.cap)
    write_grid_json(capped, out / "localvol.json")
    write_grid_csv(capped, out / "localvol.csv")
    dump_json({**summary, "diagnostics": grid.diagnostics}, out / "summary.json")
    print(json.dumps({"out": str(out), **summary}))
    return EXIT_OK


def cmd_backtest(args) -> int:
    from .backtest import run_backtest
    from .local_vol import read_grid_json
    from .serialize import dump_json

    out = _outdir(args.out)
    if not os.path.exists(args.localvol):
        raise CliInputError(f"local-vol file not found: {args.localvol}")
    lv = read_grid_json(args.localvol)
    frame, _ = _load_market(args)
    t_needed = max(p.maturity for p in frame.points)
    k_needed = [p.reduced_strike for p in frame.points]
    if min(k_needed) < lv.k_axis[0] - 0.25 * (lv.k_axis[-1] - lv.k_axis[0]) or max(
        k_needed
    ) > lv.k_axis[-1] + 0.25 * (lv.k_axis[-1] - lv.k_axis[0]):
        raise CliInputError("quote strikes fall far outside the local-vol grid domain")
    rep = run_backtest(
        lv, frame, args.method, n_paths=args.paths, n_steps=args.steps, seed=args.seed,
        cn_grid=(args.cn_t, args.cn_k),
    )
    dump_json(rep.to_json(), out / "report.json")
    rep.write_csv(out / "rows.csv")
    print(json.dumps({"method": args.method, "iv_rmse": rep.iv_rmse,
                      "price_rmse": rep.price_rmse, "out": str(out)}))
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    import numpy as np

    from .backtest import SyntheticSpec, generate_synthetic, write_curve_csv, write_quotes_csv
    from .market_data import Curve, CurveSet
    from .serialize import dump_json

    out = _outdir(args.out)
    curves = CurveSet(
        spot=args.spot,
        rate_curve=Curve.flat(args.rate),
        dividend_curve=Curve.flat(args.div),
    )
    spec = SyntheticSpec(
        kind=args.kind,
        sigma=args.sigma,
        rho=args.rho,
        eta=args.eta,
        theta_slope=args.theta_slope,
        sigma0=args.sigma0,
        beta=args.beta,
        maturities=tuple(np.linspace(args.t_min, args.t_max, args.n_maturities).tolist()),
        moneyness=tuple(np.linspace(args.m_min, args.m_max, args.n_strikes).tolist()),
        spread=args.spread,
    )
    quotes = generate_synthetic(spec, curves)
    write_quotes_csv(quotes, out / "quotes.csv")
    horizon = max(50.0, args.t_max * 2)
    write_curve_csv([0.0, horizon], [args.rate, args.rate], out / "rates.csv")
    write_curve_csv([0.0, horizon], [args.div, args.div], out / "divs.csv")
    dump_json(
        {"kind": args.kind, "spot": args.spot, "rate": args.rate, "div": args.div,
         "n_quotes": len(quotes)},
        out / "meta.json",
    )
    print(json.dumps({"out": str(out), "n_quotes": len(quotes)}))
    return EXIT_OK


def cmd_check_arbitrage(args) -> int:
    import numpy as np

    doc = _load_model_doc(args.model)
    version = doc.get("version", "")
    result = {"model": args.model, "version": version}

    if version == "gpmodel/1":
        from .gp_price_surface import build_constraints, model_from_json

        model = model_from_json(doc)
        system = build_constraints(model.grid)
        slack = np.asarray(system.a @ model.map_nodes)
        violated = int(np.sum(slack < -1e-8))
        result.update(
            {
                "constraint_rows": int(slack.size),
                "violated_rows": violated,
                "violation_fraction": violated / slack.size,
                "min_slack": float(slack.min()),
            }
        )
    elif version in ("nnivmodel/1", "ssvi/1"):
        from .local_vol import calendar_butterfly_terms

        if version == "nnivmodel/1":
            from .nn_iv import model_from_json

            model = model_from_json(doc)
            theta_fn = model.forward_theta
            t_lo, t_hi = args.t_range
        else:
            from .ssvi import model_from_json, surface_theta_fn

            _, surface, _ = model_from_json(doc)
            theta_fn = surface_theta_fn(surface)
            t_lo, t_hi = surface.maturities[0], surface.maturities[-1]
        t_axis = np.linspace(t_lo, t_hi, args.grid_t)
        kappa_axis = np.linspace(args.kappa_min, args.kappa_max, args.grid_k)
        tt, kk = np.meshgrid(t_axis, kappa_axis, indexing="ij")
        theta, d_t, d_k, d_kk = theta_fn(tt, kk)
        cal, butt = calendar_butterfly_terms(theta, d_t, d_k, d_kk, kk)
        n = cal.size
        result.update(
            {
                "grid_points": int(n),
                "calendar_violations": int(np.sum(cal < 0.0)),
                "butterfly_violations": int(np.sum(butt < 0.0)),
                "calendar_violation_fraction": float(np.mean(cal < 0.0)),
                "butterfly_violation_fraction": float(np.mean(butt < 0.0)),
                "mean_calendar_negative": float(np.mean(np.maximum(-cal, 0.0))),
                "mean_butterfly_negative": float(np.mean(np.maximum(-butt, 0.0))),
            }
        )
    else:
        raise CliInputError(f"unsupported model version {version!r}")

    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_market_args(parser):
    parser.add_argument("--quotes", required=True, help="quote CSV (maturity,strike,bid,ask,iv)")
    parser.add_argument("--rates", required=True, help="rate curve CSV (tenor,value)")
    parser.add_argument("--divs", required=True, help="dividend curve CSV (tenor,value)")
    parser.add_argument("--spot", type=float, required=True, help="spot level S0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volsurf",
        description="Arbitrage-aware option surface calibration and local volatility extraction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="fit a surface model to quotes")
    cal.add_argument("method", choices=["gp", "nn", "ssvi"])
    _add_market_args(cal)
    cal.add_argument("--out", required=True, help="output directory")
    cal.add_argument("--seed", type=int, default=DEFAULT_SEED)
    cal.add_argument("--no-holdout", action="store_true",
                     help="fit on all quotes instead of the alternating 50/50 split")
    cal.add_argument("--grid-t", type=int, default=25, help="GP maturity basis nodes")
    cal.add_argument("--grid-k", type=int, default=100, help="GP strike basis nodes")
    cal.add_argument("--starts", type=int, default=5, help="GP hyperparameter starts")
    cal.add_argument("--paths", type=int, default=0, help="GP posterior paths to sample")
    cal.add_argument("--lambda", dest="lam", default="1,1,1",
                     help="NN penalty weights lambda1,lambda2,lambda3")
    cal.add_argument("--lambda-search", action="store_true",
                     help="NN: grid-search lambdas over {0.1,1,10}^3")
    cal.add_argument("--epochs", type=int, default=3000, help="NN training epochs")
    cal.add_argument("--penalty-t", type=int, default=50, help="NN penalty grid maturities")
    cal.add_argument("--penalty-k", type=int, default=100, help="NN penalty grid moneyness nodes")
    cal.set_defaults(handler=cmd_calibrate)

    lv = sub.add_parser("localvol", help="extract a Dupire local-vol grid from a model")
    lv.add_argument("--model", required=True, help="model JSON from calibrate")
    lv.add_argument("--out", required=True)
    lv.add_argument("--grid-t", type=int, default=50)
    lv.add_argument("--grid-k", type=int, default=50)
    lv.add_argument("--cap", type=float, default=2.0, help="export cap on local vol")
    lv.add_argument("--t-range", type=float, nargs=2, default=None,
                    metavar=("T_LO", "T_HI"),
                    help="maturity range for nn/ssvi models "
                         "(default: 0.1..2.0 for nn, calibrated range for ssvi)")
    lv.add_argument("--k-range", type=float, nargs=2, default=(0.7, 1.3),
                    metavar=("M_LO", "M_HI"),
                    help="strike range as moneyness of spot (nn/ssvi models)")
    lv.set_defaults(handler=cmd_localvol)

    bt = sub.add_parser("backtest", help="reprice quotes under a local-vol grid")
    bt.add_argument("method", choices=["mc", "cn"])
    bt.add_argument("--localvol", required=True, help="local-vol JSON from localvol")
    _add_market_args(bt)
    bt.add_argument("--out", required=True)
    bt.add_argument("--seed", type=int, default=DEFAULT_SEED)
    bt.add_argument("--paths", type=int, default=100_000)
    bt.add_argument("--steps", type=int, default=100)
    bt.add_argument("--cn-t", type=int, default=100)
    bt.add_argument("--cn-k", type=int, default=100)
    bt.set_defaults(handler=cmd_backtest)

    gen = sub.add_parser("gen-synthetic", help="generate oracle quotes and curves")
    gen.add_argument("--kind", choices=["flat", "ssvi", "cev"], default="flat")
    gen.add_argument("--out", required=True)
    gen.add_argument("--spot", type=float, default=100.0)
    gen.add_argument("--rate", type=float, default=0.02)
    gen.add_argument("--div", type=float, default=0.01)
    gen.add_argument("--sigma", type=float, default=0.2)
    gen.add_argument("--rho", type=float, default=-0.3)
    gen.add_argument("--eta", type=float, default=1.2)
    gen.add_argument("--theta-slope", type=float, default=0.04)
    gen.add_argument("--sigma0", type=float, default=2.0)
    gen.add_argument("--beta", type=float, default=0.5)
    gen.add_argument("--t-min", type=float, default=0.25)
    gen.add_argument("--t-max", type=float, default=2.5)
    gen.add_argument("--m-min", type=float, default=0.85)
    gen.add_argument("--m-max", type=float, default=1.3)
    gen.add_argument("--n-maturities", type=int, default=20)
    gen.add_argument("--n-strikes", type=int, default=40)
    gen.add_argument("--spread", type=float, default=0.005)
    gen.set_defaults(handler=cmd_gen_synthetic)

    chk = sub.add_parser("check-arbitrage", help="count arbitrage violations of a model")
    chk.add_argument("--model", required=True)
    chk.add_argument("--grid-t", type=int, default=30)
    chk.add_argument("--grid-k", type=int, default=50)
    chk.add_argument("--t-range", type=float, nargs=2, default=(0.1, 2.5))
    chk.add_argument("--kappa-min", type=float, default=-0.5)
    chk.add_argument("--kappa-max", type=float, default=0.5)
    chk.set_defaults(handler=cmd_check_arbitrage)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except CliInputError as exc:
        return _fail(EXIT_INPUT, "input", str(exc))
    except (FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_INPUT, "input", str(exc))
    except ArithmeticError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except Exception as exc:  # numerical / solver failures
        from .constrained_sampling import QpError

        import numpy as np

        if isinstance(exc, (QpError, np.linalg.LinAlgError, RuntimeError)):
            return _fail(EXIT_NUMERICAL, "numerical", str(exc))
        raise


if __name__ == "__main__":
    sys.exit(main())
