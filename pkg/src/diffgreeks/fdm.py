"""Explicit finite-difference solver for the multi-asset Black-Scholes PDE.

    u_t + 1/2 sum_ij sigma_i sigma_j rho_ij S_i S_j u_SiSj + r sum_i S_i u_Si = r u

The solver discretizes a rectangular price grid, applies the payoff at
maturity, and marches backward with forward Euler in time and central
differences in price (four-corner stencil for the cross derivative).

Boundary policy: on S_i = 0 faces every S_i-coefficient vanishes, so the
faces evolve under the degenerate (lower-dimensional) equation, which
also pins u = 0 wherever the payoff is identically zero on the face.  Far
faces impose linearity (one-sided second difference zero) by extrapolation,
clamped at zero: unclamped extrapolation is slowly unstable where the
payoff kink meets the boundary corner, and call-type values never go
negative.  Supports one and two assets; higher dimensions are out of range
for a dense grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryError, DimensionError, StabilityError
from .market import MarketParams
from .payoffs import OptionSpec, payoff


@dataclass(frozen=True)
class FdmGrid:
    """Uniform rectangular grid: per-asset [0, s_max] and [0, T] in time."""

    s_max: np.ndarray
    m_s: np.ndarray
    m_t: int
    T: float

    def __post_init__(self):
        object.__setattr__(self, "s_max", np.atleast_1d(np.asarray(self.s_max, dtype=float)))
        object.__setattr__(self, "m_s", np.atleast_1d(np.asarray(self.m_s, dtype=int)))
        if self.s_max.shape != self.m_s.shape:
            raise ValueError("s_max and m_s must have one entry per asset")
        if np.any(self.s_max <= 0) or np.any(self.m_s < 2):
            raise ValueError("need s_max > 0 and at least two spatial intervals")
        if self.m_t < 1 or self.T <= 0:
            raise ValueError("need m_t >= 1 and T > 0")

    @property
    def n(self) -> int:
        return self.s_max.shape[0]

    @property
    def delta_s(self) -> np.ndarray:
        return self.s_max / self.m_s

    @property
    def delta_t(self) -> float:
        return self.T / self.m_t

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(0.0, self.s_max[i], self.m_s[i] + 1) for i in range(self.n)]

    def node_near(self, prices) -> tuple[int, ...]:
        """Indices of the grid node closest to the given price vector."""
        prices = np.atleast_1d(np.asarray(prices, dtype=float))
        idx = np.rint(prices / self.delta_s).astype(int)
        return tuple(int(i) for i in np.clip(idx, 0, self.m_s))

    def cfl_number(self, params: MarketParams) -> float:
        """Max over the grid of dt * sum_i sigma_i^2 S_i^2 / ds_i^2."""
        return float(
            self.delta_t * np.sum(params.sigma**2 * self.s_max**2 / self.delta_s**2)
        )


@dataclass(frozen=True)
class ValueSurface:
    """Option values on the full price grid at one time level."""

    u: np.ndarray
    time: float


def terminal_condition(spec: OptionSpec, grid: FdmGrid) -> ValueSurface:
    """Payoff sampled at every grid node."""
    if grid.n > 2:
        raise DimensionError("dense grids support at most two assets")
    if spec.n_assets != grid.n:
        raise DimensionError(
            f"grid has {grid.n} assets but the contract has {spec.n_assets}"
        )
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    s = np.stack(mesh, axis=-1)
    return ValueSurface(u=payoff(spec, s), time=grid.T)


def _check_stability(grid: FdmGrid, params: MarketParams, strict: bool) -> float:
    cfl = grid.cfl_number(params)
    if cfl > 1.0:
        msg = f"explicit step is unstable: CFL indicator {cfl:.3f} > 1"
        if strict:
            raise StabilityError(msg)
        warnings.warn(msg, stacklevel=3)
    return cfl


def step_backward(
    u_next: ValueSurface, grid: FdmGrid, params: MarketParams, strict: bool = False
) -> ValueSurface:
    """One explicit Euler step backward in time.

    Central differences everywhere they are formable; terms whose
    coefficients vanish on the S_i = 0 faces are dropped there, and far
    faces are refilled by zero-clamped linear extrapolation afterwards.
    """
    _check_stability(grid, params, strict)
    u = u_next.u
    dt = grid.delta_t
    r = params.r
    sig = params.sigma
    ds = grid.delta_s
    axes = grid.axes()

    if grid.n == 1:
        (s1,) = axes
        rhs = -r * u.copy()
        rhs[1:-1] += 0.5 * sig[0] ** 2 * s1[1:-1] ** 2 * (
            u[2:] - 2.0 * u[1:-1] + u[:-2]
        ) / ds[0] ** 2 + r * s1[1:-1] * (u[2:] - u[:-2]) / (2.0 * ds[0])
        new = u + dt * rhs
        new[-1] = max(2.0 * new[-2] - new[-3], 0.0)
        return ValueSurface(u=new, time=u_next.time - dt)

    s1 = axes[0][:, None]
    s2 = axes[1][None, :]
    rho = params.corr[0, 1]

    rhs = -r * u.copy()
    rhs[1:-1, :] += 0.5 * sig[0] ** 2 * s1[1:-1, :] ** 2 * (
        u[2:, :] - 2.0 * u[1:-1, :] + u[:-2, :]
    ) / ds[0] ** 2 + r * s1[1:-1, :] * (u[2:, :] - u[:-2, :]) / (2.0 * ds[0])
    rhs[:, 1:-1] += 0.5 * sig[1] ** 2 * s2[:, 1:-1] ** 2 * (
        u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]
    ) / ds[1] ** 2 + r * s2[:, 1:-1] * (u[:, 2:] - u[:, :-2]) / (2.0 * ds[1])
    rhs[1:-1, 1:-1] += (
        rho
        * sig[0]
        * sig[1]
        * s1[1:-1, :]
        * s2[:, 1:-1]
        * (u[2:, 2:] - u[2:, :-2] - u[:-2, 2:] + u[:-2, :-2])
        / (4.0 * ds[0] * ds[1])
    )
    new = u + dt * rhs
    np.maximum(2.0 * new[-2, :] - new[-3, :], 0.0, out=new[-1, :])
    np.maximum(2.0 * new[:, -2] - new[:, -3], 0.0, out=new[:, -1])
    return ValueSurface(u=new, time=u_next.time - dt)


def solve(
    spec: OptionSpec, params: MarketParams, grid: FdmGrid, strict: bool = False
) -> tuple[ValueSurface, ValueSurface]:
    """March from the payoff at T to t = 0.

    Returns the surfaces at t = 0 and t = delta_t (the latter feeds the
    theta quotient).
    """
    _check_stability(grid, params, strict)
    surface = terminal_condition(spec, grid)
    one_step_level = surface
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # stability already reported once
        for _ in range(grid.m_t):
            one_step_level = surface
            surface = step_backward(surface, grid, params, strict=False)
    return surface, one_step_level


def fdm_greeks(
    u0: ValueSurface, u1: ValueSurface, grid: FdmGrid, at: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray, float]:
    """Central-difference Greeks at an interior node.

    delta_i and gamma_i are first/second differences of the t = 0 surface;
    theta is the forward quotient (u(delta_t) - u(0)) / delta_t.
    """
    at = tuple(int(i) for i in np.atleast_1d(at))
    if len(at) != grid.n:
        raise DimensionError(f"node index has {len(at)} entries, grid has {grid.n}")
    for i, idx in enumerate(at):
        if not 0 < idx < grid.m_s[i]:
            raise BoundaryError(f"node {at} lacks neighbours along axis {i}")
    ds = grid.delta_s
    delta = np.empty(grid.n)
    gamma = np.empty(grid.n)
    for i in range(grid.n):
        up = tuple(idx + (1 if j == i else 0) for j, idx in enumerate(at))
        dn = tuple(idx - (1 if j == i else 0) for j, idx in enumerate(at))
        delta[i] = (u0.u[up] - u0.u[dn]) / (2.0 * ds[i])
        gamma[i] = (u0.u[up] - 2.0 * u0.u[at] + u0.u[dn]) / ds[i] ** 2
    theta = (u1.u[at] - u0.u[at]) / grid.delta_t
    return delta, gamma, float(theta)
