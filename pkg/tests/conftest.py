"""Shared fixtures and finite-difference oracles for the test suite."""

import numpy as np
import pytest

from diffgreeks.market import MarketParams
from diffgreeks.payoffs import OptionSpec


@pytest.fixture
def exchange_market() -> MarketParams:
    """The two-asset benchmark market used throughout the exchange tests."""
    return MarketParams(
        r=0.1,
        sigma=np.array([0.4, 0.2]),
        corr=np.array([[1.0, 0.4], [0.4, 1.0]]),
        s0=np.array([60.0, 60.0]),
        T=1.0,
    )


@pytest.fixture
def basket_market() -> MarketParams:
    """Four independent assets of the basket benchmark."""
    return MarketParams(
        r=0.06,
        sigma=np.array([0.2, 0.2, 0.2, 0.2]),
        corr=np.eye(4),
        s0=np.array([40.0, 50.0, 60.0, 70.0]),
        T=0.5,
    )


@pytest.fixture
def exchange_spec() -> OptionSpec:
    return OptionSpec.exchange()


def fd_gradient(f, x, rel_h=1e-4):
    """Central-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_h * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_hessian(f, x, rel_h=1e-4):
    """Central-difference Hessian of scalar f at x."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = np.array([rel_h * max(abs(x[i]), 1.0) for i in range(n)])
    hess = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        hess[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / h[i] ** 2
        for j in range(i + 1, n):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += [h[i], h[j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[[i, j]] -= [h[i], h[j]]
            hess[i, j] = hess[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (
                4.0 * h[i] * h[j]
            )
    return hess


def param_fd_gradient(loss_of_flat, theta, rel_h=1e-6):
    """Central-difference gradient in parameter space."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        h = rel_h * max(abs(theta[i]), 1e-3)
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (loss_of_flat(tp) - loss_of_flat(tm)) / (2.0 * h)
    return g
