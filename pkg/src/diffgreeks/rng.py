"""Counter-based random number streams for reproducible simulation.

All randomness in the library flows through Philox-4x64 streams keyed by
(seed, stream id).  Draw ``j`` of a stream is a fixed function of the key
and the counter, so any contiguous block of draws can be regenerated
without producing its predecessors.  Each simulated path owns a dedicated,
padded block of draws, which makes path generation pure in
(seed, path index, step, asset) and lets shards of a batch be produced
independently with bit-identical results.

Standard normals are obtained by applying the inverse normal CDF to
uniforms (monotone, no rejection, one draw per variate).
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

# Philox-4x64 emits four 64-bit words per counter increment, and
# Generator.random consumes one word per double, so stream offsets must be
# multiples of four draws.
_BLOCK = 4

# Smallest uniform below the generator's nonzero minimum (2^-53); substituted
# for exact zeros so the inverse CDF never sees 0.
_TINY_U = 2.0 ** -54


def philox(seed: int, stream: int = 0) -> Philox:
    """Bit generator for the given (seed, stream) pair."""
    return Philox(key=[int(seed) & (2**64 - 1), int(stream) & (2**64 - 1)])


def path_stride(draws_per_path: int) -> int:
    """Per-path draw budget padded up to a whole Philox counter block."""
    return _BLOCK * ((draws_per_path + _BLOCK - 1) // _BLOCK)


def uniforms(seed: int, count: int, stream: int = 0, skip: int = 0) -> np.ndarray:
    """`count` uniforms in (0, 1) after skipping `skip` draws (skip % 4 == 0)."""
    if skip % _BLOCK:
        raise ValueError(f"skip must be a multiple of {_BLOCK}, got {skip}")
    bg = philox(seed, stream)
    if skip:
        bg = bg.advance(skip // _BLOCK)
    u = Generator(bg).random(count)
    u[u == 0.0] = _TINY_U
    return u


def standard_normals(
    seed: int, shape: tuple[int, ...], stream: int = 0, skip: int = 0
) -> np.ndarray:
    """Standard normal draws via the inverse-CDF transform."""
    count = int(np.prod(shape)) if shape else 1
    return ndtri(uniforms(seed, count, stream=stream, skip=skip)).reshape(shape)


def path_normals(
    seed: int,
    n_paths: int,
    n_steps: int,
    n_assets: int,
    stream: int = 0,
    first_path: int = 0,
) -> np.ndarray:
    """Normal draws for a block of paths, shaped (n_paths, n_steps, n_assets).

    Path ``b`` always consumes the same draws no matter how the batch is
    sharded: its block starts at ``b * path_stride(n_steps * n_assets)``.
    """
    per_path = n_steps * n_assets
    stride = path_stride(per_path)
    u = uniforms(seed, n_paths * stride, stream=stream, skip=first_path * stride)
    u = u.reshape(n_paths, stride)[:, :per_path]
    return ndtri(u).reshape(n_paths, n_steps, n_assets)
