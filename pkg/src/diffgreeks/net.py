"""Differential multilayer perceptron with exact input derivatives.

The network maps (t, S_1..S_n) to a scalar through four activated affine
layers and a final affine layer.  Alongside the value, a forward pass
propagates the exact Jacobian with respect to the inputs and the exact
Hessian block over the asset coordinates, layer by layer:

    z = W a + b,   a' = f(z)
    da'/dx   = f'(z) (W da/dx)
    d2a'/dx2 = f''(z) (W da/dx)(W da/dx)' + f'(z) (W d2a/dx2)

Nothing is approximated by finite differences.  A reverse pass yields the
gradient of any scalar loss built from (value, gradient, Hessian) with
respect to every weight and bias, which requires third derivatives of the
activation where the loss touches Hessian entries.

Hessians are stored packed (upper triangle of the asset block), so
symmetry holds by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import rng
from .errors import UnsupportedActivationError

INIT_STREAM = 1  # rng stream id reserved for parameter initialization

SELU_ALPHA = 1.67326324
SELU_LAMBDA = 1.05070098

# activations that fail strict mode for Hessian-bearing losses: their second
# derivative is not continuous, so the propagated Hessian is identically zero
# (or meaningless) and gradient flow through it is ill-defined
NON_SMOOTH = frozenset({"relu", "selu"})
C_INF = frozenset({"sigmoid", "tanh", "sin", "softplus"})


@dataclass(frozen=True)
class Activation:
    """Pointwise nonlinearity together with its first three derivatives."""

    kind: str

    def __post_init__(self):
        if self.kind not in {"sigmoid", "tanh", "sin", "relu", "elu", "selu", "softplus"}:
            raise ValueError(f"unknown activation {self.kind!r}")

    @property
    def hessian_ok(self) -> bool:
        return self.kind not in NON_SMOOTH

    def eval(self, z: np.ndarray, order: int = 3) -> tuple[np.ndarray, ...]:
        """(f, f', .., f^(order)) evaluated elementwise at z."""
        k = self.kind
        if k == "softplus":
            s = expit(z)
            # ln(1 + e^z) = max(z, 0) + ln(1 + e^-|z|) avoids overflow
            f = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
            out = (f, s)
            if order >= 2:
                f2 = s * (1.0 - s)
                out += (f2,)
                if order >= 3:
                    out += (f2 * (1.0 - 2.0 * s),)
            return out[: order + 1]
        if k == "sigmoid":
            s = expit(z)
            f1 = s * (1.0 - s)
            out = (s, f1, f1 * (1.0 - 2.0 * s), f1 * (1.0 - 6.0 * s + 6.0 * s * s))
            return out[: order + 1]
        if k == "tanh":
            f = np.tanh(z)
            f1 = 1.0 - f * f
            f2 = -2.0 * f * f1
            out = (f, f1, f2, -2.0 * (f1 * f1 + f * f2))
            return out[: order + 1]
        if k == "sin":
            f, f1 = np.sin(z), np.cos(z)
            out = (f, f1, -f, -f1)
            return out[: order + 1]
        if k == "relu":
            pos = z > 0.0
            zero = np.zeros_like(z)
            out = (np.where(pos, z, 0.0), pos.astype(float), zero, zero)
            return out[: order + 1]
        # elu / selu: alpha (e^z - 1) on z <= 0, linear above, times lambda
        alpha, lam = (SELU_ALPHA, SELU_LAMBDA) if k == "selu" else (1.0, 1.0)
        neg = z <= 0.0
        ez = alpha * np.exp(np.minimum(z, 0.0))
        f = lam * np.where(neg, ez - alpha, z)
        f1 = lam * np.where(neg, ez, 1.0)
        f2 = lam * np.where(neg, ez, 0.0)
        out = (f, f1, f2, f2)
        return out[: order + 1]


@dataclass(frozen=True)
class Network:
    """Weights and biases of the scalar-output MLP.

    weights[l] has shape (fan_out, fan_in); the last layer is affine with a
    single output and no activation.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: Activation

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            w.setflags(write=False)
            b.setflags(write=False)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_assets(self) -> int:
        return self.n_inputs - 1

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def pack(self) -> np.ndarray:
        """All parameters as one flat vector (row-major, layer by layer)."""
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)]
        )

    def with_params(self, flat: np.ndarray) -> "Network":
        """New network with parameters taken from a flat vector."""
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(flat[pos : pos + b.size].copy())
            pos += b.size
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return Network(tuple(weights), tuple(biases), self.activation)


def init_params(widths, activation: Activation | str, seed: int) -> Network:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    if isinstance(activation, str):
        activation = Activation(activation)
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or widths[-1] != 1:
        raise ValueError("widths must end in a single output")
    counts = [widths[i] * widths[i + 1] for i in range(len(widths) - 1)]
    u = rng.uniforms(seed, sum(counts), stream=INIT_STREAM)
    weights, biases, pos = [], [], 0
    for i, count in enumerate(counts):
        fan_in, fan_out = widths[i], widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = (2.0 * u[pos : pos + count] - 1.0) * limit
        weights.append(w.reshape(fan_out, fan_in))
        biases.append(np.zeros(fan_out))
        pos += count
    return Network(tuple(weights), tuple(biases), activation)


def _hess_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def unpack_hessian(packed: np.ndarray, n: int) -> np.ndarray:
    """(..., p) packed upper triangle -> (..., n, n) symmetric matrices."""
    out = np.zeros(packed.shape[:-1] + (n, n))
    for t, (i, j) in enumerate(_hess_pairs(n)):
        out[..., i, j] = packed[..., t]
        out[..., j, i] = packed[..., t]
    return out


def pack_hessian_adjoint(full: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of unpack_hessian: off-diagonal entries accumulate both mirrors."""
    pairs = _hess_pairs(n)
    out = np.empty(full.shape[:-2] + (len(pairs),))
    for t, (i, j) in enumerate(pairs):
        out[..., t] = full[..., i, j] if i == j else full[..., i, j] + full[..., j, i]
    return out


@dataclass
class EvalBatch:
    """Network outputs over a batch of input points.

    value: (M,); grad: (M, d) with the time derivative in column 0;
    hess: (M, n, n) symmetric asset-block Hessian.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    _cache: list | None = None


@dataclass(frozen=True)
class EvalRecord:
    """Value and exact input derivatives at a single (t, S) point."""

    value: float
    grad_t: float
    grad_s: np.ndarray
    hess_s: np.ndarray


def _forward_values(net: Network, x: np.ndarray) -> np.ndarray:
    a = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        a = z if l == last else net.activation.eval(z, order=0)[0]
    return a[:, 0]


def forward(net: Network, t, s) -> float | np.ndarray:
    """Network value at (t, S); same code path as the derivative evaluation."""
    x, scalar = _assemble_inputs(t, s, net.n_assets)
    v = _forward_values(net, x)
    return float(v[0]) if scalar else v


def _assemble_inputs(t, s, n: int) -> tuple[np.ndarray, bool]:
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    scalar = s.ndim == 1
    s2 = np.atleast_2d(s)
    t2 = np.broadcast_to(np.atleast_1d(t), (s2.shape[0],))
    if s2.shape[1] != n:
        raise ValueError(f"expected {n} asset prices, got {s2.shape[1]}")
    return np.concatenate([t2[:, None], s2], axis=1), scalar


def eval_batch(net: Network, x: np.ndarray, keep_cache: bool = False) -> EvalBatch:
    """Value, input gradient and asset Hessian at each row of x = (t, S)."""
    x = np.asarray(x, dtype=float)
    m, d = x.shape
    n = d - 1
    pairs = _hess_pairs(n)
    p = len(pairs)

    a = x
    g = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    h = np.zeros((m, p, d))
    cache: list | None = [] if keep_cache else None
    last = len(net.weights) - 1

    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        m_in = w.shape[1]
        z = a @ w.T + b
        pj = (g.reshape(m * d, m_in) @ w.T).reshape(m, d, -1)
        q = (h.reshape(m * p, m_in) @ w.T).reshape(m, p, -1)
        if l == last:
            if keep_cache:
                cache.append((a, g, h, None, None, None))
            value, grad, hess_p = z[:, 0], pj[:, :, 0], q[:, :, 0]
            break
        f, f1, f2, f3 = net.activation.eval(z, order=3)
        pp = np.empty_like(q)
        for idx, (i, j) in enumerate(pairs):
            np.multiply(pj[:, 1 + i, :], pj[:, 1 + j, :], out=pp[:, idx, :])
        if keep_cache:
            cache.append((a, g, h, pj, q, (f1, f2, f3)))
        a = f
        g = f1[:, None, :] * pj
        h = f2[:, None, :] * pp + f1[:, None, :] * q

    return EvalBatch(value=value, grad=grad, hess=unpack_hessian(hess_p, n), _cache=cache)


def eval_with_derivatives(net: Network, t: float, s) -> EvalRecord:
    """Exact value, gradient and asset-block Hessian at one point."""
    x, _ = _assemble_inputs(t, s, net.n_assets)
    out = eval_batch(net, x)
    return EvalRecord(
        value=float(out.value[0]),
        grad_t=float(out.grad[0, 0]),
        grad_s=out.grad[0, 1:].copy(),
        hess_s=out.hess[0],
    )


def backprop_params(
    net: Network,
    batch: EvalBatch,
    vbar: np.ndarray,
    gbar: np.ndarray,
    hbar: np.ndarray,
    strict: bool = False,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradient of scalar loss L given its output adjoints.

    vbar = dL/dvalue (M,), gbar = dL/dgrad (M, d), hbar = dL/dhess (M, n, n)
    as if value/grad/hess were independent; the reverse pass handles all
    shared structure, including third-derivative flow through the Hessian.
    """
    if batch._cache is None:
        raise ValueError("eval_batch must be called with keep_cache=True")
    n = net.n_assets
    d = n + 1
    pairs = _hess_pairs(n)
    p = len(pairs)
    m = batch.value.shape[0]

    hbar = np.zeros((m, n, n)) if hbar is None else np.asarray(hbar, dtype=float)
    if strict and not net.activation.hessian_ok and np.any(hbar != 0.0):
        raise UnsupportedActivationError(
            f"{net.activation.kind} has no continuous second derivative; "
            "Hessian-bearing losses are refused in strict mode"
        )
    hbar_p = pack_hessian_adjoint(hbar, n)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)
    last = len(net.weights) - 1

    # final affine layer
    a_prev, g_prev, h_prev, _, _, _ = batch._cache[last]
    w = net.weights[last]
    vbar = np.asarray(vbar, dtype=float)
    gbar = np.asarray(gbar, dtype=float)
    w_bar = (
        vbar @ a_prev
        + np.einsum("md,mdv->v", gbar, g_prev)
        + np.einsum("mp,mpv->v", hbar_p, h_prev)
    )[None, :]
    grads[last] = (w_bar, np.array([vbar.sum()]))
    abar = vbar[:, None] * w[0][None, :]
    gbar_l = gbar[:, :, None] * w[0][None, None, :]
    hbar_l = hbar_p[:, :, None] * w[0][None, None, :]

    for l in range(last - 1, -1, -1):
        a_prev, g_prev, h_prev, pj, q, (f1, f2, f3) = batch._cache[l]
        w = net.weights[l]
        m_in = w.shape[1]

        qbar = f1[:, None, :] * hbar_l
        f2bar = np.zeros_like(f1)
        for idx, (i, j) in enumerate(pairs):
            f2bar += hbar_l[:, idx, :] * pj[:, 1 + i, :] * pj[:, 1 + j, :]
        f1bar = np.einsum("mpu,mpu->mu", hbar_l, q) + np.einsum("mdu,mdu->mu", gbar_l, pj)
        pbar = f1[:, None, :] * gbar_l
        for idx, (i, j) in enumerate(pairs):
            fh = f2 * hbar_l[:, idx, :]
            pbar[:, 1 + i, :] += fh * pj[:, 1 + j, :]
            pbar[:, 1 + j, :] += fh * pj[:, 1 + i, :]
        zbar = abar * f1 + f1bar * f2 + f2bar * f3

        w_bar = (
            zbar.T @ a_prev
            + pbar.reshape(m * d, -1).T @ g_prev.reshape(m * d, m_in)
            + qbar.reshape(m * p, -1).T @ h_prev.reshape(m * p, m_in)
        )
        grads[l] = (w_bar, zbar.sum(axis=0))
        if l > 0:
            abar = zbar @ w
            gbar_l = (pbar.reshape(m * d, -1) @ w).reshape(m, d, m_in)
            hbar_l = (qbar.reshape(m * p, -1) @ w).reshape(m, p, m_in)

    return grads


def loss_param_gradient(net: Network, x: np.ndarray, loss_fn, strict: bool = False):
    """(loss, parameter gradient) for a scalar loss over an EvalBatch.

    loss_fn maps the EvalBatch to (loss_value, (vbar, gbar, hbar)), the
    adjoints of the loss with respect to the value/gradient/Hessian arrays.
    """
    batch = eval_batch(net, x, keep_cache=True)
    loss, (vbar, gbar, hbar) = loss_fn(batch)
    grads = backprop_params(net, batch, vbar, gbar, hbar, strict=strict)
    return loss, grads


def pack_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def config_hash(config: dict) -> str:
    """Stable short hash of a JSON-serializable training configuration."""
    blob = json.dumps(config, sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    """Self-describing binary checkpoint; round-trips parameters bit-exactly."""
    header = {
        "widths": list(net.widths),
        "activation": net.activation.kind,
        "meta": meta or {},
    }
    arrays = {}
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{l}"] = w
        arrays[f"b{l}"] = b
    np.savez(path, header=json.dumps(header, sort_keys=True), **arrays)


def load_checkpoint(path) -> tuple[Network, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        n_layers = len(header["widths"]) - 1
        weights = tuple(data[f"w{l}"].copy() for l in range(n_layers))
        biases = tuple(data[f"b{l}"].copy() for l in range(n_layers))
    net = Network(weights, biases, Activation(header["activation"]))
    return net, header["meta"]
