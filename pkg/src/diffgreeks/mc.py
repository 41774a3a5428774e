"""Monte Carlo price and Greek estimators.

Pricing averages discounted terminal payoffs.  Because the log-normal step
is distributionally exact, European pricing samples the terminal date in a
single step; the time grid is only needed for training the differential
network.

Greeks use the pathwise method for delta and theta, and the mixed
likelihood-ratio/pathwise estimator for gamma: the likelihood-ratio score
(z' L^-1 A^-1)_i / (sqrt(T) S_i(0)) multiplies the payoff, and the product
is differentiated pathwise once more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ScoreContextError
from .market import MarketParams, simulate_grid
from .payoffs import BASKET, EXCHANGE, OptionSpec, in_the_money, payoff


@dataclass(frozen=True)
class ScoreContext:
    """Cached pieces of the likelihood-ratio score for one market."""

    a_inv: np.ndarray  # 1/sigma_i (diagonal of A^-1)
    l_inv: np.ndarray  # inverse of the correlation Cholesky factor
    sqrt_t: float

    @classmethod
    def from_market(cls, params: MarketParams) -> "ScoreContext":
        if np.any(params.sigma == 0.0):
            raise ScoreContextError(
                "likelihood-ratio score needs strictly positive volatilities"
            )
        L = params.cholesky()
        l_inv = solve_triangular(L, np.eye(params.n), lower=True)
        return cls(a_inv=1.0 / params.sigma, l_inv=l_inv, sqrt_t=float(np.sqrt(params.T)))

    def scores(self, z: np.ndarray) -> np.ndarray:
        """Rows (z' L^-1 A^-1) for a batch of standard normal draws z."""
        return z @ (self.l_inv * self.a_inv[None, :])


def mc_price(spec: OptionSpec, paths, r: float, T: float) -> tuple[float, float]:
    """Discounted mean payoff over a PathBatch, with its standard error."""
    pay = np.exp(-r * T) * payoff(spec, paths.terminal)
    n = pay.shape[0]
    se = pay.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return float(pay.mean()), float(se)


def _correlated(z: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Rows L_i . z for each path (the correlated mix of the terminal draw)."""
    return z @ L.T


def exchange_greek_kernels(
    s_t: np.ndarray, z: np.ndarray, ctx: ScoreContext, params: MarketParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-path (delta, theta, gamma) contributions for the exchange option.

    s_t and z are the terminal prices and the standard normal draws of the
    single exact step to maturity; shapes (m, 2) or (2,).
    """
    s_t = np.atleast_2d(np.asarray(s_t, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    sig, s0, T = params.sigma, params.s0, params.T
    disc = np.exp(-params.r * T)
    itm = (s_t[:, 0] > s_t[:, 1]).astype(float)

    d_delta = disc * (s_t[:, 0] / s0[0]) * itm

    lz = _correlated(z, params.cholesky())
    half_sig2 = 0.5 * sig**2
    tilt = half_sig2[None, :] - sig[None, :] * lz / (2.0 * ctx.sqrt_t)
    d_theta = disc * (s_t[:, 0] * tilt[:, 0] - s_t[:, 1] * tilt[:, 1]) * itm

    score1 = ctx.scores(z)[:, 0]
    d_gamma = disc * (score1 / ctx.sqrt_t) * (s_t[:, 1] / s0[0] ** 2) * itm
    return d_delta, d_theta, d_gamma


def basket_greek_kernels(
    s_t: np.ndarray,
    z: np.ndarray,
    ctx: ScoreContext,
    params: MarketParams,
    spec: OptionSpec,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-path (delta_i, theta, gamma_i) contributions for the basket call."""
    if spec.kind != BASKET:
        raise ValueError("basket kernels need a basket option")
    s_t = np.atleast_2d(np.asarray(s_t, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    w, K = spec.weights, spec.strike
    sig, s0, T = params.sigma, params.s0, params.T
    disc = np.exp(-params.r * T)
    weighted = s_t @ w
    itm = (weighted > K).astype(float)

    d_delta = disc * (s_t / s0[None, :]) * w[None, :] * itm[:, None]

    lz = _correlated(z, params.cholesky())
    tilt = 0.5 * sig[None, :] ** 2 - sig[None, :] * lz / (2.0 * ctx.sqrt_t)
    d_theta = disc * (-params.r * K + (w[None, :] * s_t * tilt).sum(axis=1)) * itm

    scores = ctx.scores(z)
    bracket = w[None, :] * s_t - weighted[:, None] + K
    d_gamma = (
        disc
        * (scores / (ctx.sqrt_t * s0[None, :] ** 2))
        * bracket
        * itm[:, None]
    )
    return d_delta, d_theta, d_gamma


@dataclass(frozen=True)
class GreeksReport:
    """Point estimates with matching standard errors.

    Exchange options report delta and gamma with respect to S1 only (the
    sensitivities the closed form defines); baskets report per-asset
    vectors.
    """

    price: float
    delta: np.ndarray
    gamma: np.ndarray
    theta: float
    price_se: float
    delta_se: np.ndarray
    gamma_se: np.ndarray
    theta_se: float
    paths: int


def _mean_se(a: np.ndarray, axis=0):
    n = a.shape[axis]
    # np.mean reduces pairwise, which keeps accumulation error bounded for
    # large batches without giving up seeded determinism.
    return a.mean(axis=axis), a.std(axis=axis, ddof=1) / np.sqrt(n)


def estimate_greeks(
    spec: OptionSpec, params: MarketParams, paths: int, seed: int
) -> GreeksReport:
    """Monte Carlo price and Greeks from `paths` single-step samples."""
    if paths < 2:
        raise ValueError("need at least two paths for standard errors")
    ctx = ScoreContext.from_market(params)
    batch = simulate_grid(params, 1, paths, seed)
    s_t = batch.terminal
    z = batch.z[:, 0, :]

    disc_pay = np.exp(-params.r * params.T) * payoff(spec, s_t)
    price, price_se = _mean_se(disc_pay)

    if spec.kind == EXCHANGE:
        d_delta, d_theta, d_gamma = exchange_greek_kernels(s_t, z, ctx, params)
        delta, delta_se = _mean_se(d_delta)
        gamma, gamma_se = _mean_se(d_gamma)
        delta, delta_se = np.atleast_1d(delta), np.atleast_1d(delta_se)
        gamma, gamma_se = np.atleast_1d(gamma), np.atleast_1d(gamma_se)
    else:
        d_delta, d_theta, d_gamma = basket_greek_kernels(s_t, z, ctx, params, spec)
        delta, delta_se = _mean_se(d_delta)
        gamma, gamma_se = _mean_se(d_gamma)
    theta, theta_se = _mean_se(d_theta)

    return GreeksReport(
        price=float(price),
        delta=delta,
        gamma=gamma,
        theta=float(theta),
        price_se=float(price_se),
        delta_se=delta_se,
        gamma_se=gamma_se,
        theta_se=float(theta_se),
        paths=paths,
    )


def in_the_money_fraction(spec: OptionSpec, s_t) -> float:
    """Fraction of paths finishing in the money (diagnostic)."""
    return float(np.mean(in_the_money(spec, s_t)))
