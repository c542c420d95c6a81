"""Arbitrage-aware option surface calibration and local volatility extraction.

Submodules:

* ``market_data``         quote loading, curves, reduced prices, unit-square scaling
* ``black_scholes``       put pricing, vega, implied-vol inversion
* ``constrained_sampling``  convex QP solver and exact HMC for truncated Gaussians
* ``gp_price_surface``    shape-constrained GP price surfaces (MLE, MAP, posterior)
* ``nn_iv``               penalized implied-vol network with analytic derivatives
* ``ssvi``                SSVI / natural-SVI surfaces and two-step calibration
* ``local_vol``           Dupire local-vol extraction (finite-difference and analytic)
* ``backtest``            Monte Carlo and Crank-Nicolson repricing backtests
* ``cli``                 the ``volsurf`` command-line front end
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    backtest,
    black_scholes,
    constrained_sampling,
    gp_price_surface,
    local_vol,
    market_data,
    nn_iv,
    ssvi,
)
