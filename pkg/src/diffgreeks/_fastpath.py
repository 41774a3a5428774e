"""Fused training kernel for the differential network.

Numba implementation of one epoch's loss and parameter gradient.  Each
path's forward/adjoint sweep runs in cache-resident scratch buffers, which
removes the memory traffic that dominates the vectorized numpy engine on
small networks.  The per-layer loop bodies live in small helper functions
so LLVM sees few live arrays per scope and vectorizes the inner loops.

Paths are grouped into fixed shards; every shard accumulates its own
gradient buffer and the buffers are combined in shard order, so results
are bit-identical for a given shard plan no matter how threads are
scheduled.  Produces the same numbers as sdbs.epoch_losses_and_gradient
up to summation roundoff.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .market import MarketParams, PathBatch
from .net import Network
from .payoffs import OptionSpec, payoff

_ACT_CODES = {
    "softplus": 0,
    "sigmoid": 1,
    "tanh": 2,
    "sin": 3,
    "relu": 4,
    "elu": 5,
    "selu": 6,
}

_SELU_ALPHA = 1.67326324
_SELU_LAMBDA = 1.05070098

_FASTMATH = {"reassoc", "contract", "nsz", "arcp"}


@njit(cache=True, inline="always")
def _act_value_slope(code, z):
    """(f(z), f'(z)) for the activation identified by code; one exp call."""
    if code == 0:  # softplus
        if z > 0.0:
            ez = np.exp(-z)
            return z + np.log1p(ez), 1.0 / (1.0 + ez)
        ez = np.exp(z)
        return np.log1p(ez), ez / (1.0 + ez)
    if code == 1:  # sigmoid
        if z >= 0.0:
            s = 1.0 / (1.0 + np.exp(-z))
        else:
            ez = np.exp(z)
            s = ez / (1.0 + ez)
        return s, s * (1.0 - s)
    if code == 2:  # tanh
        f = np.tanh(z)
        return f, 1.0 - f * f
    if code == 3:  # sin
        return np.sin(z), np.cos(z)
    if code == 4:  # relu
        if z > 0.0:
            return z, 1.0
        return 0.0, 0.0
    if code == 5:  # elu, alpha = 1
        if z > 0.0:
            return z, 1.0
        ez = np.exp(z)
        return ez - 1.0, ez
    # selu
    if z > 0.0:
        return _SELU_LAMBDA * z, _SELU_LAMBDA
    ez = _SELU_ALPHA * np.exp(z)
    return _SELU_LAMBDA * (ez - _SELU_ALPHA), _SELU_LAMBDA * ez


@njit(cache=True, inline="always")
def _act_f2(code, a, f1):
    """f''(z) recovered from the stored value and slope (no exp)."""
    if code == 0:
        return f1 * (1.0 - f1)
    if code == 1:
        return f1 * (1.0 - 2.0 * a)
    if code == 2:
        return -2.0 * a * f1
    if code == 3:
        return -a
    if code == 4:
        return 0.0
    if code == 5:
        if a <= 0.0:
            return a + 1.0
        return 0.0
    if a <= 0.0:
        return a + _SELU_LAMBDA * _SELU_ALPHA
    return 0.0


@njit(cache=True, inline="always")
def _act_f3(code, a, f1, f2):
    """f'''(z) from the stored value, slope and curvature (no exp)."""
    if code == 0:
        return f2 * (1.0 - 2.0 * f1)
    if code == 1:
        return f1 * (1.0 - 6.0 * a + 6.0 * a * a)
    if code == 2:
        return -2.0 * (f1 * f1 + a * f2)
    if code == 3:
        return -f1
    if code == 4:
        return 0.0
    return f2  # elu / selu: every derivative equals f'' below the kink


@njit(cache=True, fastmath=_FASTMATH)
def _fwd_first(wt, bias, xs, cal, cf1l, cf2l, cpl, act_code):
    """Input layer: z = W x + b; the pre-activation Jacobian is W itself."""
    n_points, d = xs.shape
    m_out = bias.shape[0]
    for k in range(n_points):
        for u in range(m_out):
            z = bias[u]
            for v in range(d):
                z += xs[k, v] * wt[v, u]
            av, f1v = _act_value_slope(act_code, z)
            cal[k, u] = av
            cf1l[k, u] = f1v
            cf2l[k, u] = _act_f2(act_code, av, f1v)
        for q in range(d):
            for u in range(m_out):
                cpl[k, q, u] = wt[q, u]


@njit(cache=True, fastmath=_FASTMATH)
def _fwd_hidden(
    wt, bias, cap, cf1p, cf2p, cpp, cqp, cal, cf1l, cf2l, cpl, cql,
    act_code, pair_i, pair_j, ztmp,
):
    """Hidden layer: propagate value, Jacobian and packed Hessian."""
    n_points = cap.shape[0]
    m_in = wt.shape[0]
    m_out = wt.shape[1]
    d = cpp.shape[1]
    p = cqp.shape[1]
    for k in range(n_points):
        for u in range(m_out):
            ztmp[u] = bias[u]
        for v in range(m_in):
            av = cap[k, v]
            for u in range(m_out):
                ztmp[u] += av * wt[v, u]
        for u in range(m_out):
            av, f1v = _act_value_slope(act_code, ztmp[u])
            cal[k, u] = av
            cf1l[k, u] = f1v
            cf2l[k, u] = _act_f2(act_code, av, f1v)
        for q in range(d):
            for u in range(m_out):
                ztmp[u] = 0.0
            for v in range(m_in):
                gv = cf1p[k, v] * cpp[k, q, v]
                for u in range(m_out):
                    ztmp[u] += gv * wt[v, u]
            for u in range(m_out):
                cpl[k, q, u] = ztmp[u]
        for t in range(p):
            i1 = 1 + pair_i[t]
            j1 = 1 + pair_j[t]
            for u in range(m_out):
                ztmp[u] = 0.0
            for v in range(m_in):
                hv = cf2p[k, v] * cpp[k, i1, v] * cpp[k, j1, v] + cf1p[k, v] * cqp[k, t, v]
                for u in range(m_out):
                    ztmp[u] += hv * wt[v, u]
            for u in range(m_out):
                cql[k, t, u] = ztmp[u]


@njit(cache=True, fastmath=_FASTMATH)
def _fwd_last(wt, bias, cap, cf1p, cf2p, cpp, cqp, vv, gg, hh, pair_i, pair_j):
    """Output layer (affine, scalar): value, gradient, packed Hessian."""
    n_points = cap.shape[0]
    m_in = wt.shape[0]
    d = cpp.shape[1]
    p = cqp.shape[1]
    for k in range(n_points):
        z = bias[0]
        for v in range(m_in):
            z += cap[k, v] * wt[v, 0]
        vv[k] = z
        for q in range(d):
            acc = 0.0
            for v in range(m_in):
                acc += cf1p[k, v] * cpp[k, q, v] * wt[v, 0]
            gg[k, q] = acc
        for t in range(p):
            i1 = 1 + pair_i[t]
            j1 = 1 + pair_j[t]
            acc = 0.0
            for v in range(m_in):
                hv = cf2p[k, v] * cpp[k, i1, v] * cpp[k, j1, v] + cf1p[k, v] * cqp[k, t, v]
                acc += hv * wt[v, 0]
            hh[k, t] = acc


@njit(cache=True, fastmath=_FASTMATH)
def _bwd_last(
    wt, cap, cf1p, cf2p, cpp, cqp, vbar, gbar, hbar, ab, gb, hb,
    grad_w, pair_i, pair_j,
):
    """Reverse through the output layer; returns the bias gradient term."""
    n_points = cap.shape[0]
    m_in = cap.shape[1]
    d = cpp.shape[1]
    p = cqp.shape[1]
    bias_acc = 0.0
    for k in range(n_points):
        vb = vbar[k]
        bias_acc += vb
        for v in range(m_in):
            f1v = cf1p[k, v]
            f2v = cf2p[k, v]
            acc = vb * cap[k, v]
            wv = wt[v, 0]
            ab[k, v] = vb * wv
            for q in range(d):
                gq = gbar[k, q]
                acc += gq * f1v * cpp[k, q, v]
                gb[k, q, v] = gq * wv
            for t in range(p):
                i1 = 1 + pair_i[t]
                j1 = 1 + pair_j[t]
                hq = hbar[k, t]
                acc += hq * (f2v * cpp[k, i1, v] * cpp[k, j1, v] + f1v * cqp[k, t, v])
                hb[k, t, v] = hq * wv
            grad_w[v] += acc
    return bias_acc


@njit(cache=True, fastmath=_FASTMATH)
def _bwd_pointwise(
    cal, cf1l, cf2l, cpl, cql, ab, gb, hb, zbar, pbar, qbar,
    act_code, pair_i, pair_j,
):
    """Adjoints of z, P, Q at every point of one hidden layer."""
    n_points = cal.shape[0]
    m_out = cal.shape[1]
    d = cpl.shape[1]
    p = cql.shape[1]
    for k in range(n_points):
        for u in range(m_out):
            f1u = cf1l[k, u]
            f2u = cf2l[k, u]
            f3u = _act_f3(act_code, cal[k, u], f1u, f2u)
            f2b = 0.0
            f1b = 0.0
            for t in range(p):
                hbv = hb[k, t, u]
                qbar[k, t, u] = f1u * hbv
                i1 = 1 + pair_i[t]
                j1 = 1 + pair_j[t]
                f2b += hbv * cpl[k, i1, u] * cpl[k, j1, u]
                f1b += hbv * cql[k, t, u]
            for q in range(d):
                gbu = gb[k, q, u]
                f1b += gbu * cpl[k, q, u]
                pbar[k, q, u] = f1u * gbu
            for t in range(p):
                fh = f2u * hb[k, t, u]
                i1 = 1 + pair_i[t]
                j1 = 1 + pair_j[t]
                pbar[k, i1, u] += fh * cpl[k, j1, u]
                pbar[k, j1, u] += fh * cpl[k, i1, u]
            zbar[k, u] = ab[k, u] * f1u + f1b * f2u + f2b * f3u


@njit(cache=True, fastmath=_FASTMATH)
def _bwd_weights(
    grad_w, grad_b, zbar, pbar, qbar, cap, cf1p, cf2p, cpp, cqp,
    gprev, hprev, pair_i, pair_j, m_out, m_in,
):
    """Accumulate the layer's weight/bias gradient over all points."""
    n_points = cap.shape[0]
    d = gprev.shape[0]
    p = hprev.shape[0]
    for k in range(n_points):
        for q in range(d):
            for v in range(m_in):
                gprev[q, v] = cf1p[k, v] * cpp[k, q, v]
        for t in range(p):
            i1 = 1 + pair_i[t]
            j1 = 1 + pair_j[t]
            for v in range(m_in):
                hprev[t, v] = (
                    cf2p[k, v] * cpp[k, i1, v] * cpp[k, j1, v]
                    + cf1p[k, v] * cqp[k, t, v]
                )
        for u in range(m_out):
            zu = zbar[k, u]
            grad_b[u] += zu
            base = u * m_in
            for v in range(m_in):
                grad_w[base + v] += zu * cap[k, v]
        for q in range(d):
            for u in range(m_out):
                pq = pbar[k, q, u]
                base = u * m_in
                for v in range(m_in):
                    grad_w[base + v] += pq * gprev[q, v]
        for t in range(p):
            for u in range(m_out):
                qt = qbar[k, t, u]
                base = u * m_in
                for v in range(m_in):
                    grad_w[base + v] += qt * hprev[t, v]


@njit(cache=True, fastmath=_FASTMATH)
def _bwd_weights_first(grad_w, grad_b, zbar, pbar, xs, m_out):
    """Input-layer weight/bias gradient: the incoming Jacobian is identity."""
    n_points = xs.shape[0]
    d = xs.shape[1]
    for k in range(n_points):
        for u in range(m_out):
            zu = zbar[k, u]
            grad_b[u] += zu
            base = u * d
            for v in range(d):
                grad_w[base + v] += zu * xs[k, v] + pbar[k, v, u]


@njit(cache=True, fastmath=_FASTMATH)
def _bwd_propagate(wt, zbar, pbar, qbar, ab2, gb2, hb2, m_out, m_in):
    """Push adjoints through the affine maps to the previous layer."""
    n_points = zbar.shape[0]
    d = gb2.shape[1]
    p = hb2.shape[1]
    for k in range(n_points):
        for v in range(m_in):
            abn = 0.0
            for u in range(m_out):
                abn += zbar[k, u] * wt[v, u]
            ab2[k, v] = abn
            for q in range(d):
                acc = 0.0
                for u in range(m_out):
                    acc += pbar[k, q, u] * wt[v, u]
                gb2[k, q, v] = acc
            for t in range(p):
                acc = 0.0
                for u in range(m_out):
                    acc += qbar[k, t, u] * wt[v, u]
                hb2[k, t, v] = acc


@njit(cache=True, parallel=True, fastmath=_FASTMATH)
def _epoch_kernel(
    wt_flat,
    b_flat,
    w_off,
    b_off,
    g_off,
    widths,
    act_code,
    s,
    dw,
    grid,
    h_term,
    r,
    sigma,
    cmat,
    pair_i,
    pair_j,
    w_bs,
    w_term,
    stop_grad,
    batch_weight,
    shard_starts,
    loss_out,
    grad_out,
):
    n_shards = shard_starts.shape[0] - 1
    n_layers = widths.shape[0] - 1
    n_hidden = n_layers - 1
    n_points = s.shape[1]  # N + 1
    n_assets = s.shape[2]
    d = n_assets + 1
    p = pair_i.shape[0]
    m_max = 0
    for l in range(n_layers):
        if widths[l + 1] > m_max:
            m_max = widths[l + 1]
    dt = grid[1] - grid[0]

    for shard in prange(n_shards):
        grad_l = grad_out[shard]
        ca = np.zeros((n_hidden, n_points, m_max))
        cf1 = np.zeros((n_hidden, n_points, m_max))
        cf2 = np.zeros((n_hidden, n_points, m_max))
        cp = np.zeros((n_hidden, n_points, d, m_max))
        cq = np.zeros((n_hidden, n_points, p, m_max))
        xs = np.zeros((n_points, d))
        vv = np.zeros(n_points)
        gg = np.zeros((n_points, d))
        hh = np.zeros((n_points, p))
        ztmp = np.zeros(m_max)
        res_sde = np.zeros(n_points)
        res_bs = np.zeros(n_points)
        drift = np.zeros(n_points)
        diffsum = np.zeros(n_points)
        vbar = np.zeros(n_points)
        gbar = np.zeros((n_points, d))
        hbar = np.zeros((n_points, p))
        ab = np.zeros((n_points, m_max))
        ab2 = np.zeros((n_points, m_max))
        gb = np.zeros((n_points, d, m_max))
        gb2 = np.zeros((n_points, d, m_max))
        hb = np.zeros((n_points, p, m_max))
        hb2 = np.zeros((n_points, p, m_max))
        pbar = np.zeros((n_points, d, m_max))
        qbar = np.zeros((n_points, p, m_max))
        zbar = np.zeros((n_points, m_max))
        gprev = np.zeros((d, m_max))
        hprev = np.zeros((p, m_max))

        for b in range(shard_starts[shard], shard_starts[shard + 1]):
            for k in range(n_points):
                xs[k, 0] = grid[k]
                for i in range(n_assets):
                    xs[k, 1 + i] = s[b, k, i]

            # ---------------- forward sweep, layer by layer ----------------
            for l in range(n_layers):
                m_in = widths[l]
                m_out = widths[l + 1]
                wt = wt_flat[w_off[l] : w_off[l] + m_in * m_out].reshape(m_in, m_out)
                bias = b_flat[b_off[l] : b_off[l] + m_out]
                if l == 0:
                    _fwd_first(
                        wt, bias, xs, ca[0], cf1[0], cf2[0], cp[0], act_code
                    )
                elif l == n_layers - 1:
                    _fwd_last(
                        wt, bias, ca[l - 1], cf1[l - 1], cf2[l - 1], cp[l - 1],
                        cq[l - 1], vv, gg, hh, pair_i, pair_j,
                    )
                else:
                    _fwd_hidden(
                        wt, bias, ca[l - 1], cf1[l - 1], cf2[l - 1], cp[l - 1],
                        cq[l - 1], ca[l], cf1[l], cf2[l], cp[l], cq[l],
                        act_code, pair_i, pair_j, ztmp,
                    )

            # ---------------- residuals and loss ----------------
            for k in range(n_points):
                quad = 0.0
                for t in range(p):
                    i = pair_i[t]
                    j = pair_j[t]
                    w2 = 0.5 if i == j else 1.0
                    quad += w2 * cmat[i, j] * s[b, k, i] * s[b, k, j] * hh[k, t]
                dr = gg[k, 0] + quad
                for i in range(n_assets):
                    dr += r * s[b, k, i] * gg[k, 1 + i]
                drift[k] = dr
            for k in range(n_points - 1):
                acc = 0.0
                for i in range(n_assets):
                    acc += sigma[i] * s[b, k, i] * gg[k, 1 + i] * dw[b, k, i]
                diffsum[k] = acc
            sde_sum = 0.0
            bs_sum = 0.0
            for k in range(1, n_points):
                res_sde[k] = vv[k - 1] + drift[k - 1] * dt + diffsum[k - 1] - vv[k]
                res_bs[k] = drift[k] - r * vv[k]
                sde_sum += res_sde[k] * res_sde[k]
                bs_sum += res_bs[k] * res_bs[k]
            res_t = vv[n_points - 1] - h_term[b]
            loss_out[shard, 0] += sde_sum
            loss_out[shard, 1] += bs_sum
            loss_out[shard, 2] += res_t * res_t

            # ---------------- adjoints ----------------
            for k in range(n_points):
                vbar[k] = 0.0
                for q in range(d):
                    gbar[k, q] = 0.0
                for t in range(p):
                    hbar[k, t] = 0.0
            for k in range(1, n_points):
                cs = batch_weight * res_sde[k]
                vbar[k] -= cs
                if stop_grad == 0:
                    vbar[k - 1] += cs
                    gbar[k - 1, 0] += cs * dt
                    for i in range(n_assets):
                        gbar[k - 1, 1 + i] += (
                            cs * s[b, k - 1, i] * (r * dt + sigma[i] * dw[b, k - 1, i])
                        )
                    for t in range(p):
                        i = pair_i[t]
                        j = pair_j[t]
                        w2 = 0.5 if i == j else 1.0
                        hbar[k - 1, t] += (
                            cs * dt * w2 * cmat[i, j] * s[b, k - 1, i] * s[b, k - 1, j]
                        )
                cb = batch_weight * w_bs * res_bs[k]
                vbar[k] -= r * cb
                gbar[k, 0] += cb
                for i in range(n_assets):
                    gbar[k, 1 + i] += cb * r * s[b, k, i]
                for t in range(p):
                    i = pair_i[t]
                    j = pair_j[t]
                    w2 = 0.5 if i == j else 1.0
                    hbar[k, t] += cb * w2 * cmat[i, j] * s[b, k, i] * s[b, k, j]
            vbar[n_points - 1] += batch_weight * w_term * res_t

            # ---------------- backward sweep, layer by layer ----------------
            l = n_layers - 1
            m_in = widths[l]
            wt = wt_flat[w_off[l] : w_off[l] + m_in].reshape(m_in, 1)
            go = g_off[l]
            bias_acc = _bwd_last(
                wt, ca[l - 1], cf1[l - 1], cf2[l - 1], cp[l - 1], cq[l - 1],
                vbar, gbar, hbar, ab, gb, hb,
                grad_l[go : go + m_in], pair_i, pair_j,
            )
            grad_l[go + m_in] += bias_acc

            for l in range(n_layers - 2, -1, -1):
                m_in = widths[l]
                m_out = widths[l + 1]
                wt = wt_flat[w_off[l] : w_off[l] + m_in * m_out].reshape(m_in, m_out)
                go = g_off[l]
                grad_w = grad_l[go : go + m_out * m_in]
                grad_b = grad_l[go + m_out * m_in : go + m_out * m_in + m_out]
                first = l == 0
                _bwd_pointwise(
                    ca[l], cf1[l], cf2[l], cp[l], cq[l], ab, gb, hb,
                    zbar, pbar, qbar, act_code, pair_i, pair_j,
                )
                if first:
                    _bwd_weights_first(grad_w, grad_b, zbar, pbar, xs, m_out)
                else:
                    _bwd_weights(
                        grad_w, grad_b, zbar, pbar, qbar, ca[l - 1],
                        cf1[l - 1], cf2[l - 1], cp[l - 1], cq[l - 1],
                        gprev, hprev, pair_i, pair_j, m_out, m_in,
                    )
                    _bwd_propagate(wt, zbar, pbar, qbar, ab2, gb2, hb2, m_out, m_in)
                if not first:
                    tmp = ab
                    ab = ab2
                    ab2 = tmp
                    tmpg = gb
                    gb = gb2
                    gb2 = tmpg
                    tmph = hb
                    hb = hb2
                    hb2 = tmph


def epoch_losses_and_gradient(
    net: Network,
    paths: PathBatch,
    spec: OptionSpec,
    params: MarketParams,
    cfg,
):
    """Drop-in fused replacement for sdbs.epoch_losses_and_gradient."""
    from .sdbs import LossBreakdown  # local import to avoid a cycle

    widths = np.array(net.widths, dtype=np.int64)
    n_layers = len(net.weights)
    wt_parts = []
    w_off = np.zeros(n_layers, dtype=np.int64)
    b_off = np.zeros(n_layers, dtype=np.int64)
    g_off = np.zeros(n_layers, dtype=np.int64)
    b_parts = []
    pos_w = 0
    pos_b = 0
    pos_g = 0
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        w_off[l] = pos_w
        b_off[l] = pos_b
        g_off[l] = pos_g
        wt = np.ascontiguousarray(w.T)
        wt_parts.append(wt.ravel())
        pos_w += wt.size
        b_parts.append(b)
        pos_b += b.size
        pos_g += w.size + b.size
    wt_flat = np.concatenate(wt_parts)
    b_flat = np.concatenate(b_parts)

    n = params.n
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    pair_i = np.array([i for i, _ in pairs], dtype=np.int64)
    pair_j = np.array([j for _, j in pairs], dtype=np.int64)
    cmat = params.corr * np.outer(params.sigma, params.sigma)

    b_total = paths.n_paths
    starts = list(range(0, b_total, cfg.chunk_paths)) + [b_total]
    shard_starts = np.array(starts, dtype=np.int64)
    n_shards = len(starts) - 1

    h_term = payoff(spec, paths.terminal)
    loss_out = np.zeros((n_shards, 3))
    grad_out = np.zeros((n_shards, net.n_params))

    _epoch_kernel(
        wt_flat,
        b_flat,
        w_off,
        b_off,
        g_off,
        widths,
        _ACT_CODES[net.activation.kind],
        paths.s,
        paths.dw,
        paths.grid,
        h_term,
        params.r,
        params.sigma,
        cmat,
        pair_i,
        pair_j,
        cfg.w,
        cfg.w_term,
        1 if cfg.stop_gradient_target else 0,
        2.0 / b_total,
        shard_starts,
        loss_out,
        grad_out,
    )

    # combine shards in fixed order for bit-reproducibility
    loss_sums = np.zeros(3)
    grad = np.zeros(net.n_params)
    for sh in range(n_shards):
        loss_sums += loss_out[sh]
        grad += grad_out[sh]
    losses = LossBreakdown(
        l_sde=loss_sums[0] / b_total,
        l_bs=loss_sums[1] / b_total,
        l_t=loss_sums[2] / b_total * cfg.w_term,
        w=cfg.w,
        w_t=cfg.w_term,
    )
    return losses, grad
