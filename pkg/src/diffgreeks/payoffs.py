"""Terminal payoffs for exchange and basket options."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

EXCHANGE = "exchange"
BASKET = "basket"


@dataclass(frozen=True)
class OptionSpec:
    """Contract descriptor shared by every pricing engine.

    Exchange options swap asset 2 for asset 1 at maturity (two assets, no
    strike).  Basket options are calls on the weighted sum of assets.
    """

    kind: str
    weights: np.ndarray | None = None
    strike: float | None = None

    def __post_init__(self):
        if self.kind == EXCHANGE:
            if self.weights is not None or self.strike is not None:
                raise ValueError("exchange options take no weights or strike")
        elif self.kind == BASKET:
            if self.weights is None or self.strike is None:
                raise ValueError("basket options need weights and a strike")
            w = np.array(self.weights, dtype=float, copy=True).reshape(-1)
            if w.size < 1:
                raise ValueError("weights must be a nonempty vector")
            if self.strike < 0:
                raise ValueError("strike must be nonnegative")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        else:
            raise ValueError(f"unknown option kind {self.kind!r}")

    @classmethod
    def exchange(cls) -> "OptionSpec":
        return cls(kind=EXCHANGE)

    @classmethod
    def basket(cls, weights, strike: float) -> "OptionSpec":
        return cls(kind=BASKET, weights=np.asarray(weights, dtype=float), strike=float(strike))

    @property
    def n_assets(self) -> int:
        return 2 if self.kind == EXCHANGE else self.weights.shape[0]


def _check_dim(spec: OptionSpec, s_t: np.ndarray) -> np.ndarray:
    s_t = np.asarray(s_t, dtype=float)
    if s_t.shape[-1] != spec.n_assets:
        raise DimensionError(
            f"price vector has {s_t.shape[-1]} assets, contract expects {spec.n_assets}"
        )
    return s_t


def payoff(spec: OptionSpec, s_t) -> np.ndarray:
    """Terminal payoff; vectorized over any leading batch dimensions."""
    s_t = _check_dim(spec, s_t)
    if spec.kind == EXCHANGE:
        return np.maximum(s_t[..., 0] - s_t[..., 1], 0.0)
    return np.maximum(s_t @ spec.weights - spec.strike, 0.0)


def in_the_money(spec: OptionSpec, s_t) -> np.ndarray:
    """Indicator of a strictly positive payoff; ties count as out of the money."""
    s_t = _check_dim(spec, s_t)
    if spec.kind == EXCHANGE:
        return (s_t[..., 0] > s_t[..., 1]).astype(np.int64)
    return (s_t @ spec.weights > spec.strike).astype(np.int64)
