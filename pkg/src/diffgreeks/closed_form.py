"""Margrabe closed form for the exchange option.

The exact price and Greeks serve as the golden oracle for every other
engine.  With sigma^2 = sigma1^2 + sigma2^2 - 2 rho sigma1 sigma2:

    u = S1 N(d1) - S2 N(d2)
    d1 = [ln(S1/S2) + sigma^2 tau / 2] / (sigma sqrt(tau)),  d2 = d1 - sigma sqrt(tau)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateVolError
from .market import MarketParams

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(x):
    """Standard normal CDF, accurate to full double precision."""
    return ndtr(x)


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class MargrabeInputs:
    s1: float
    s2: float
    sigma1: float
    sigma2: float
    rho: float
    tau: float

    def __post_init__(self):
        if not (self.s1 > 0 and self.s2 > 0):
            raise ValueError("spot prices must be positive")
        if not self.tau > 0:
            raise ValueError("time to maturity must be positive")
        if abs(self.rho) > 1:
            raise ValueError("correlation must lie in [-1, 1]")

    @classmethod
    def from_market(cls, params: MarketParams, t: float = 0.0) -> "MargrabeInputs":
        if params.n != 2:
            raise ValueError("exchange closed form needs exactly two assets")
        return cls(
            s1=float(params.s0[0]),
            s2=float(params.s0[1]),
            sigma1=float(params.sigma[0]),
            sigma2=float(params.sigma[1]),
            rho=float(params.corr[0, 1]),
            tau=params.T - t,
        )


def _effective_vol(inp: MargrabeInputs) -> float:
    var = inp.sigma1**2 + inp.sigma2**2 - 2.0 * inp.rho * inp.sigma1 * inp.sigma2
    if var <= 0.0:
        raise DegenerateVolError(
            "effective volatility is zero; the exchange option is a deterministic "
            "forward and d1 is singular"
        )
    return np.sqrt(var)


def _d12(inp: MargrabeInputs) -> tuple[float, float, float]:
    sigma = _effective_vol(inp)
    sig_sqrt_tau = sigma * np.sqrt(inp.tau)
    d1 = (np.log(inp.s1 / inp.s2) + 0.5 * sigma**2 * inp.tau) / sig_sqrt_tau
    return d1, d1 - sig_sqrt_tau, sigma


def margrabe_price(inp: MargrabeInputs) -> float:
    d1, d2, _ = _d12(inp)
    return inp.s1 * normal_cdf(d1) - inp.s2 * normal_cdf(d2)


def margrabe_greeks(inp: MargrabeInputs) -> tuple[float, float, float]:
    """(delta, gamma, theta) of the exchange option with respect to S1 and t."""
    d1, d2, sigma = _d12(inp)
    sqrt_tau = np.sqrt(inp.tau)
    delta = normal_cdf(d1)
    gamma = normal_pdf(d1) / (inp.s1 * sigma * sqrt_tau)
    theta = -(sigma / (4.0 * sqrt_tau)) * (
        inp.s1 * normal_pdf(d1) + inp.s2 * normal_pdf(d2)
    )
    return float(delta), float(gamma), float(theta)
