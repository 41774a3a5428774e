"""Multi-asset option pricing lab.

Four mutually cross-validating engines: the Margrabe closed form for
exchange options, Monte Carlo with pathwise and likelihood-ratio Greek
estimators, an explicit finite-difference Black-Scholes solver, and a
differential neural network trained to satisfy both the price SDE and the
Black-Scholes equation.
"""

from .market import MarketParams, PathBatch, cholesky_factor, gbm_step, simulate_grid
from .payoffs import OptionSpec, in_the_money, payoff
from .closed_form import MargrabeInputs, margrabe_greeks, margrabe_price, normal_cdf
from .mc import GreeksReport, ScoreContext, estimate_greeks, mc_price
from .fdm import FdmGrid, ValueSurface, fdm_greeks, solve, step_backward, terminal_condition
from .net import Activation, EvalRecord, Network, eval_with_derivatives, forward, init_params
from .sdbs import AdamState, LossBreakdown, TrainConfig, adam_step, estimate, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "MarketParams",
    "PathBatch",
    "cholesky_factor",
    "gbm_step",
    "simulate_grid",
    "OptionSpec",
    "payoff",
    "in_the_money",
    "MargrabeInputs",
    "margrabe_price",
    "margrabe_greeks",
    "normal_cdf",
    "GreeksReport",
    "ScoreContext",
    "estimate_greeks",
    "mc_price",
    "FdmGrid",
    "ValueSurface",
    "terminal_condition",
    "step_backward",
    "solve",
    "fdm_greeks",
    "Activation",
    "Network",
    "EvalRecord",
    "init_params",
    "forward",
    "eval_with_derivatives",
    "TrainConfig",
    "LossBreakdown",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "train",
    "estimate",
]
