"""Correlated geometric Brownian motion under the risk-neutral measure.

Asset ``i`` follows dS_i = r S_i dt + sigma_i S_i dW_i with
Cov(W_i(t), W_j(t)) = rho_ij t.  Steps use the exact log-normal solution,
so paths are positive and distributionally exact for any step size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import FactorizationError

PSD_TOL = 1e-12


@dataclass(frozen=True)
class MarketParams:
    """Market model inputs: rate, vols, correlation, spots, maturity."""

    r: float
    sigma: np.ndarray
    corr: np.ndarray
    s0: np.ndarray
    T: float

    def __post_init__(self):
        for name in ("sigma", "corr", "s0"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            if name != "corr":
                arr = np.atleast_1d(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.sigma.shape[0]
        if n < 1:
            raise ValueError("need at least one asset")
        if self.s0.shape != (n,):
            raise ValueError(f"s0 has shape {self.s0.shape}, expected ({n},)")
        if self.corr.shape != (n, n):
            raise ValueError(f"corr has shape {self.corr.shape}, expected ({n}, {n})")
        if np.any(self.sigma < 0):
            raise ValueError("volatilities must be nonnegative")
        if not self.T > 0:
            raise ValueError("maturity must be positive")
        if not np.allclose(self.corr, self.corr.T, atol=PSD_TOL, rtol=0):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(self.corr), 1.0, atol=PSD_TOL, rtol=0):
            raise ValueError("correlation matrix must have unit diagonal")
        if np.any(np.abs(self.corr) > 1 + PSD_TOL):
            raise ValueError("correlations must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    def cholesky(self) -> np.ndarray:
        return cholesky_factor(self.corr)


def cholesky_factor(corr: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Lower-triangular L with L @ L.T == corr.

    Handles singular (rank-deficient) correlation matrices by zeroing the
    affected columns.  Pivots in (-tol, 0) are clamped to zero with a
    warning; anything more negative raises FactorizationError.
    """
    a = np.asarray(corr, dtype=float)
    n = a.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d < -tol:
            raise FactorizationError(
                f"correlation matrix is not positive semi-definite "
                f"(pivot {d:.3e} at index {j})"
            )
        if d < 0.0:
            warnings.warn(
                f"clamping slightly negative Cholesky pivot {d:.3e} at index {j}",
                stacklevel=2,
            )
            d = 0.0
        L[j, j] = np.sqrt(d)
        if L[j, j] > 0.0:
            for i in range(j + 1, n):
                L[i, j] = (a[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
        # else: column stays zero, which is the PSD completion
    return L


@dataclass(frozen=True)
class PathBatch:
    """Simulated paths on a uniform grid, with the draws that produced them.

    s has shape (batch, N+1, n); z and dw have shape (batch, N, n) where
    dw[b, k] = sqrt(dt) * L @ z[b, k] is the correlated Brownian increment
    over (t_k, t_{k+1}).  Immutable after construction.
    """

    grid: np.ndarray
    s: np.ndarray
    z: np.ndarray
    dw: np.ndarray
    seed: int

    def __post_init__(self):
        for arr in (self.grid, self.s, self.z, self.dw):
            arr.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.s.shape[0]

    @property
    def n_steps(self) -> int:
        return self.z.shape[1]

    @property
    def terminal(self) -> np.ndarray:
        return self.s[:, -1, :]


def _apply_increment(params: MarketParams, s_prev, dt, dw):
    """Exact log-step given a correlated Brownian increment dw."""
    drift = (params.r - 0.5 * params.sigma**2) * dt
    return s_prev * np.exp(drift + params.sigma * dw)


def gbm_step(params: MarketParams, s_prev, dt: float, z, L: np.ndarray):
    """Advance prices by dt using the exact solution of the GBM SDE.

    s_prev and z broadcast over leading batch dimensions; the last axis is
    the asset axis.
    """
    s_prev = np.asarray(s_prev, dtype=float)
    z = np.asarray(z, dtype=float)
    dw = np.sqrt(dt) * (z @ L.T)
    return _apply_increment(params, s_prev, dt, dw)


def simulate_grid(
    params: MarketParams,
    n_steps: int,
    n_paths: int,
    seed: int,
    stream: int = 0,
    first_path: int = 0,
) -> PathBatch:
    """Simulate paths on the uniform grid t_k = k T / N.

    Bit-reproducible for a fixed seed; a shard starting at `first_path`
    reproduces exactly the corresponding slice of the full batch.
    """
    if n_steps < 1 or n_paths < 1:
        raise ValueError("need n_steps >= 1 and n_paths >= 1")
    L = params.cholesky()
    n = params.n
    dt = params.T / n_steps
    grid = np.linspace(0.0, params.T, n_steps + 1)
    z = rng.path_normals(seed, n_paths, n_steps, n, stream=stream, first_path=first_path)
    dw = np.sqrt(dt) * (z @ L.T)
    s = np.empty((n_paths, n_steps + 1, n))
    s[:, 0, :] = params.s0
    for k in range(n_steps):
        s[:, k + 1, :] = _apply_increment(params, s[:, k, :], dt, dw[:, k, :])
    return PathBatch(grid=grid, s=s, z=z, dw=dw, seed=seed)


def simulate_stream(
    params: MarketParams,
    n_steps: int,
    n_paths: int,
    seed: int,
    on_step,
    stream: int = 0,
    chunk_paths: int = 100_000,
) -> None:
    """Streaming simulation for batches too large to hold in memory.

    Calls ``on_step(chunk_slice, k, t_k, s_k, z_k, dw_k)`` for each step of
    each chunk of paths; only one step is alive at a time.  Draws match
    simulate_grid exactly.
    """
    L = params.cholesky()
    n = params.n
    dt = params.T / n_steps
    for start in range(0, n_paths, chunk_paths):
        count = min(chunk_paths, n_paths - start)
        z = rng.path_normals(seed, count, n_steps, n, stream=stream, first_path=start)
        dw = np.sqrt(dt) * (z @ L.T)
        s_k = np.broadcast_to(params.s0, (count, n)).copy()
        for k in range(n_steps):
            s_k = _apply_increment(params, s_k, dt, dw[:, k, :])
            on_step(slice(start, start + count), k + 1, (k + 1) * dt, s_k, z[:, k, :], dw[:, k, :])
