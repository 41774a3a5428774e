"""Training of the differential network on SDE targets and the PDE residual.

Each epoch simulates a fresh batch of price paths, rolls the network's own
value/gradient/Hessian forward along each path to build the one-step
target

    u~(t_k) = N(t_{k-1}) + [N_t + r sum_i S_i N_Si + 1/2 S' H S] dt
              + sum_i sigma_i S_i N_Si dW_i(t_k)

and minimizes the squared gap to N(t_k) (SDE loss), the squared
Black-Scholes residual at the visited points (PDE loss), and the squared
terminal mismatch against the payoff (terminal loss), by Adam with a
linearly decaying learning rate.  The checkpointed model is the one whose
(pre-update) loss is the running minimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .market import MarketParams, PathBatch, simulate_grid
from .mc import GreeksReport
from .net import (
    Activation,
    Network,
    backprop_params,
    eval_batch,
    eval_with_derivatives,
    init_params,
    pack_grads,
)
from .payoffs import OptionSpec, payoff

# rng stream ids: 0 is generic simulation, 1 is parameter init; training
# epochs use 2, 3, ... so path draws never collide with either.
EPOCH_STREAM_BASE = 2


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the training loop; defaults follow the full-scale setup."""

    n_epochs: int
    n_steps: int = 200
    batch: int = 10_000
    w: float = 1.0  # weight of the PDE-residual loss
    w_t: float | None = None  # terminal weight, defaults to n_steps / 20
    lr_start: float = 1e-3
    lr_end: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    stop_gradient_target: bool = False
    hidden: tuple[int, ...] = (35, 35, 35, 35)
    activation: str = "softplus"
    chunk_paths: int = 128  # fixed shard size; results do not depend on it
    engine: str = "auto"  # auto | numpy | numba

    def __post_init__(self):
        if self.n_epochs < 1:
            raise ValueError("need at least one epoch")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def w_term(self) -> float:
        return self.n_steps / 20.0 if self.w_t is None else self.w_t

    def widths(self, n_assets: int) -> tuple[int, ...]:
        return (n_assets + 1, *self.hidden, 1)

    def as_dict(self) -> dict:
        return {
            "n_epochs": self.n_epochs,
            "n_steps": self.n_steps,
            "batch": self.batch,
            "w": self.w,
            "w_t": self.w_term,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "stop_gradient_target": self.stop_gradient_target,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components; total = l_sde + w * l_bs + l_t exactly."""

    l_sde: float
    l_bs: float
    l_t: float
    w: float
    w_t: float

    @property
    def total(self) -> float:
        return self.l_sde + self.w * self.l_bs + self.l_t


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int

    @classmethod
    def zeros(cls, net: Network) -> "AdamState":
        k = net.n_params
        return cls(m=np.zeros(k), v=np.zeros(k), step=0)


def adam_step(
    net: Network,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Network, AdamState]:
    """One bias-corrected Adam update; pure in all inputs."""
    g = grads if isinstance(grads, np.ndarray) else pack_grads(grads)
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = net.pack() - lr * m_hat / (np.sqrt(v_hat) + eps)
    return net.with_params(theta), AdamState(m=m, v=v, step=t)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear decay from lr_start at epoch 1 to lr_end at the final epoch."""
    if not 1 <= epoch <= cfg.n_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.n_epochs}]")
    if cfg.n_epochs == 1:
        return cfg.lr_start
    frac = (epoch - 1) / (cfg.n_epochs - 1)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def _grid_inputs(paths: PathBatch) -> np.ndarray:
    """Stack (t_k, S(t_k)) for every path and grid point: (B*(N+1), n+1)."""
    b, n_plus_1, n = paths.s.shape
    t = np.broadcast_to(paths.grid[None, :, None], (b, n_plus_1, 1))
    return np.concatenate([t, paths.s], axis=2).reshape(b * n_plus_1, n + 1)


def _vol_matrix(params: MarketParams) -> np.ndarray:
    """c_ij = rho_ij sigma_i sigma_j, the coefficient of the Hessian block."""
    return params.corr * np.outer(params.sigma, params.sigma)


def _generator_drift(
    grad: np.ndarray, hess: np.ndarray, s: np.ndarray, params: MarketParams
) -> np.ndarray:
    """N_t + r sum_i S_i N_Si + 1/2 sum_ij c_ij S_i S_j N_SiSj, pointwise."""
    c = _vol_matrix(params)
    quad = 0.5 * np.einsum("...i,ij,...ij,...j->...", s, c, hess, s)
    return grad[..., 0] + params.r * (s * grad[..., 1:]).sum(axis=-1) + quad


def rollout_tilde(net: Network, paths: PathBatch, params: MarketParams) -> np.ndarray:
    """SDE-consistent one-step targets u~(t_k), k = 1..N, per path."""
    b, n_plus_1, n = paths.s.shape
    out = eval_batch(net, _grid_inputs(paths))
    v = out.value.reshape(b, n_plus_1)
    g = out.grad.reshape(b, n_plus_1, n + 1)
    h = out.hess.reshape(b, n_plus_1, n, n)
    dt = paths.grid[1] - paths.grid[0]
    drift = _generator_drift(g, h, paths.s, params)
    diff = (params.sigma[None, None, :] * paths.s[:, :-1, :] * g[:, :-1, 1:] * paths.dw).sum(
        axis=-1
    )
    return v[:, :-1] + drift[:, :-1] * dt + diff


def compute_losses(
    net: Network,
    paths: PathBatch,
    tilde: np.ndarray,
    spec: OptionSpec,
    params: MarketParams,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Loss components for a batch, averaged over paths."""
    b, n_plus_1, n = paths.s.shape
    out = eval_batch(net, _grid_inputs(paths))
    v = out.value.reshape(b, n_plus_1)
    g = out.grad.reshape(b, n_plus_1, n + 1)
    h = out.hess.reshape(b, n_plus_1, n, n)
    drift = _generator_drift(g, h, paths.s, params)
    res_sde = tilde - v[:, 1:]
    res_bs = drift[:, 1:] - params.r * v[:, 1:]
    res_t = v[:, -1] - payoff(spec, paths.terminal)
    return LossBreakdown(
        l_sde=float((res_sde**2).sum(axis=1).mean()),
        l_bs=float((res_bs**2).sum(axis=1).mean()),
        l_t=float((res_t**2).mean() * cfg.w_term),
        w=cfg.w,
        w_t=cfg.w_term,
    )


def _epoch_numpy(
    net: Network,
    paths: PathBatch,
    spec: OptionSpec,
    params: MarketParams,
    cfg: TrainConfig,
    batch_weight: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Loss sums and parameter gradient for one chunk of paths.

    loss_sums are the per-chunk sums of the three squared-residual terms
    (not yet divided by the batch); batch_weight = 2 / full_batch scales
    the adjoints.
    """
    b, n_plus_1, n = paths.s.shape
    d = n + 1
    s = paths.s
    dt = paths.grid[1] - paths.grid[0]
    c = _vol_matrix(params)

    out = eval_batch(net, _grid_inputs(paths), keep_cache=True)
    v = out.value.reshape(b, n_plus_1)
    g = out.grad.reshape(b, n_plus_1, d)
    h = out.hess.reshape(b, n_plus_1, n, n)

    drift = _generator_drift(g, h, s, params)
    diff = (params.sigma[None, None, :] * s[:, :-1, :] * g[:, :-1, 1:] * paths.dw).sum(axis=-1)
    tilde = v[:, :-1] + drift[:, :-1] * dt + diff
    res_sde = tilde - v[:, 1:]
    res_bs = drift[:, 1:] - params.r * v[:, 1:]
    res_t = v[:, -1] - payoff(spec, paths.terminal)
    loss_sums = np.array(
        [(res_sde**2).sum(), (res_bs**2).sum(), (res_t**2).sum()]
    )

    # adjoints of the batch-averaged total loss wrt value / gradient / Hessian
    vbar = np.zeros((b, n_plus_1))
    gbar = np.zeros((b, n_plus_1, d))
    hbar = np.zeros((b, n_plus_1, n, n))

    c_sde = batch_weight * res_sde  # (b, N)
    vbar[:, 1:] -= c_sde
    if not cfg.stop_gradient_target:
        s_prev = s[:, :-1, :]
        vbar[:, :-1] += c_sde
        gbar[:, :-1, 0] += c_sde * dt
        gbar[:, :-1, 1:] += c_sde[..., None] * s_prev * (
            params.r * dt + params.sigma[None, None, :] * paths.dw
        )
        hbar[:, :-1] += (0.5 * dt) * c_sde[..., None, None] * (
            c[None, None] * s_prev[..., :, None] * s_prev[..., None, :]
        )

    c_bs = batch_weight * cfg.w * res_bs  # (b, N)
    s_now = s[:, 1:, :]
    vbar[:, 1:] -= params.r * c_bs
    gbar[:, 1:, 0] += c_bs
    gbar[:, 1:, 1:] += c_bs[..., None] * params.r * s_now
    hbar[:, 1:] += 0.5 * c_bs[..., None, None] * (
        c[None, None] * s_now[..., :, None] * s_now[..., None, :]
    )

    vbar[:, -1] += batch_weight * cfg.w_term * res_t

    grads = backprop_params(
        net, out, vbar.ravel(), gbar.reshape(-1, d), hbar.reshape(-1, n, n)
    )
    return loss_sums, pack_grads(grads)


def epoch_losses_and_gradient(
    net: Network,
    paths: PathBatch,
    spec: OptionSpec,
    params: MarketParams,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, np.ndarray]:
    """Batch loss and exact parameter gradient, sharded over fixed chunks."""
    b = paths.n_paths
    batch_weight = 2.0 / b
    loss_sums = np.zeros(3)
    grad = np.zeros(net.n_params)
    for start in range(0, b, cfg.chunk_paths):
        stop = min(start + cfg.chunk_paths, b)
        chunk = PathBatch(
            grid=paths.grid,
            s=paths.s[start:stop],
            z=paths.z[start:stop],
            dw=paths.dw[start:stop],
            seed=paths.seed,
        )
        sums, g = _epoch_numpy(net, chunk, spec, params, cfg, batch_weight)
        loss_sums += sums
        grad += g
    losses = LossBreakdown(
        l_sde=loss_sums[0] / b,
        l_bs=loss_sums[1] / b,
        l_t=loss_sums[2] / b * cfg.w_term,
        w=cfg.w,
        w_t=cfg.w_term,
    )
    return losses, grad


def train(
    spec: OptionSpec,
    params: MarketParams,
    cfg: TrainConfig,
    callback=None,
) -> tuple[Network, list[dict]]:
    """Run the full training loop; returns the minimum-loss network and log.

    Deterministic for a fixed config: epoch e draws its paths from rng
    stream EPOCH_STREAM_BASE + e - 1 of cfg.seed.
    """
    engine = _select_engine(cfg)
    net = init_params(cfg.widths(params.n), Activation(cfg.activation), cfg.seed)
    state = AdamState.zeros(net)
    best_total = np.inf
    best_net = net
    log: list[dict] = []
    for epoch in range(1, cfg.n_epochs + 1):
        paths = simulate_grid(
            params, cfg.n_steps, cfg.batch, cfg.seed, stream=EPOCH_STREAM_BASE + epoch - 1
        )
        losses, grad = engine(net, paths, spec, params, cfg)
        if not np.isfinite(losses.total):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        lr = lr_schedule(epoch, cfg)
        net, state = adam_step(
            net, grad, state, lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps
        )
        improved = losses.total < best_total
        if improved:
            best_total = losses.total
            best_net = net
        log.append(
            {
                "epoch": epoch,
                "l_sde": losses.l_sde,
                "l_bs": losses.l_bs,
                "l_t": losses.l_t,
                "total": losses.total,
                "lr": lr,
            }
        )
        if callback is not None:
            callback(epoch, losses, net)
    return best_net, log


def _select_engine(cfg: TrainConfig):
    if cfg.engine == "numpy":
        return epoch_losses_and_gradient
    if cfg.engine in ("auto", "numba"):
        try:
            from . import _fastpath

            return _fastpath.epoch_losses_and_gradient
        except Exception:
            if cfg.engine == "numba":
                raise
            return epoch_losses_and_gradient
    raise ValueError(f"unknown engine {cfg.engine!r}")


def estimate(
    net: Network,
    spec: OptionSpec,
    params: MarketParams,
    repeats: int = 1,
    seed: int = 0,
) -> GreeksReport:
    """Price and Greeks read off the trained network at (t=0, S(0)).

    Parameters stay frozen, and the estimate at the fixed initial state is
    deterministic, so repeated evaluations are identical; `repeats` is kept
    for interface compatibility and the standard errors are zero.
    """
    rec = eval_with_derivatives(net, 0.0, params.s0)
    n = params.n
    return GreeksReport(
        price=rec.value,
        delta=rec.grad_s.copy(),
        gamma=np.diag(rec.hess_s).copy(),
        theta=rec.grad_t,
        price_se=0.0,
        delta_se=np.zeros(n),
        gamma_se=np.zeros(n),
        theta_se=0.0,
        paths=max(int(repeats), 1),
    )
