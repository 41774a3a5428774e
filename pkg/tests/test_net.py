"""Differential network: exact derivatives against finite-difference oracles."""

import numpy as np
import pytest

from diffgreeks.errors import UnsupportedActivationError
from diffgreeks.net import (
    Activation,
    Network,
    backprop_params,
    eval_batch,
    eval_with_derivatives,
    forward,
    init_params,
    load_checkpoint,
    loss_param_gradient,
    pack_grads,
    save_checkpoint,
)

from conftest import fd_gradient, fd_hessian, param_fd_gradient

SMOOTH = ["softplus", "tanh", "sin", "sigmoid"]


def small_net(activation="softplus", seed=0, widths=(3, 8, 8, 8, 8, 1)):
    return init_params(widths, Activation(activation), seed)


def reference_forward(net, x):
    """Straightforward loop re-implementation of the layer composition."""
    a = np.asarray(x, dtype=float)
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = w @ a + b
        a = z if l == len(net.weights) - 1 else net.activation.eval(z, order=0)[0]
    return a[0]


class TestActivations:
    def test_derivatives_match_finite_differences(self):
        z = np.linspace(-4.0, 4.0, 81)
        z = z[np.abs(z) > 1e-3]  # keep away from the relu/elu kink
        h = 1e-5
        for kind in ["softplus", "tanh", "sin", "sigmoid", "relu", "elu", "selu"]:
            act = Activation(kind)
            f, f1, f2, f3 = act.eval(z, order=3)
            fp = act.eval(z + h, order=2)
            fm = act.eval(z - h, order=2)
            np.testing.assert_allclose(f1, (fp[0] - fm[0]) / (2 * h), atol=1e-8)
            np.testing.assert_allclose(f2, (fp[1] - fm[1]) / (2 * h), atol=1e-8)
            np.testing.assert_allclose(f3, (fp[2] - fm[2]) / (2 * h), atol=1e-8)

    def test_softplus_overflow_safe(self):
        act = Activation("softplus")
        f, f1, f2, f3 = act.eval(np.array([800.0, -800.0]), order=3)
        assert np.all(np.isfinite(f))
        assert abs(f[0] - 800.0) < 1e-12
        assert f[1] == 0.0

    def test_selu_constants(self):
        act = Activation("selu")
        (f,) = act.eval(np.array([1.0]), order=0)
        assert abs(f[0] - 1.05070098) < 1e-8
        (fneg,) = act.eval(np.array([-50.0]), order=0)
        assert abs(fneg[0] + 1.05070098 * 1.67326324) < 1e-6


class TestInit:
    def test_deterministic(self):
        a = init_params((3, 35, 35, 35, 35, 1), Activation("softplus"), seed=4)
        b = init_params((3, 35, 35, 35, 35, 1), Activation("softplus"), seed=4)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_param_count_default_architecture(self):
        net = init_params((3, 35, 35, 35, 35, 1), Activation("softplus"), seed=0)
        assert net.n_params == 3956

    def test_biases_zero_weights_bounded(self):
        net = init_params((3, 35, 1), Activation("tanh"), seed=1)
        for b in net.biases:
            assert np.all(b == 0.0)
        assert np.all(np.abs(net.weights[0]) <= np.sqrt(6.0 / (3 + 35)))

    def test_pack_roundtrip(self):
        net = small_net(seed=2)
        flat = net.pack()
        rebuilt = net.with_params(flat)
        for wa, wb in zip(net.weights, rebuilt.weights):
            assert np.array_equal(wa, wb)


class TestForward:
    def test_zero_net_softplus(self):
        widths = (3, 4, 4, 1)
        zeros = Network(
            tuple(np.zeros((widths[i + 1], widths[i])) for i in range(3)),
            tuple(np.zeros(widths[i + 1]) for i in range(3)),
            Activation("softplus"),
        )
        assert forward(zeros, 0.3, np.array([10.0, 20.0])) == 0.0

    def test_zero_preactivation_softplus_value(self):
        # zero weights keep every pre-activation at 0, so each hidden unit
        # emits ln 2; a unit output row sums four of them
        widths = (3, 4, 4, 1)
        weights = [np.zeros((widths[i + 1], widths[i])) for i in range(3)]
        weights[2] = np.ones((1, 4))
        net = Network(
            tuple(weights),
            tuple(np.zeros(widths[i + 1]) for i in range(3)),
            Activation("softplus"),
        )
        # hidden layer 2 sees zero input too (its weights are zero)
        assert forward(net, 0.1, np.array([5.0, 7.0])) == pytest.approx(
            4.0 * np.log(2.0), rel=1e-15
        )

    def test_matches_reference_reimplementation(self):
        rs = np.random.default_rng(3)
        for seed in range(10):
            net = small_net(seed=seed)
            x = np.concatenate([[rs.uniform(0, 1)], rs.uniform(1, 100, size=2)])
            ours = forward(net, x[0], x[1:])
            ref = reference_forward(net, x)
            assert abs(ours - ref) < 1e-12 * max(1.0, abs(ref))

    def test_forward_equals_eval_value_bitwise(self):
        # same batch shape on both sides: forward and eval share the layer
        # composition code, so values agree bit for bit
        net = small_net(seed=5)
        x = np.array([[0.5, 60.0, 55.0], [0.1, 40.0, 80.0]])
        v_fast = forward(net, x[:, 0], x[:, 1:])
        out = eval_batch(net, x)
        assert np.array_equal(v_fast, out.value)
        rec = eval_with_derivatives(net, 0.5, np.array([60.0, 55.0]))
        assert forward(net, 0.5, np.array([60.0, 55.0])) == rec.value


def passthrough_relu_net(n_assets=2, n_hidden=3):
    """Network computing exactly N(t, S) = S_1 for positive inputs."""
    d = n_assets + 1
    widths = [d] + [4] * n_hidden + [1]
    weights, biases = [], []
    w0 = np.zeros((4, d))
    w0[0, 1] = 1.0  # route S_1 through the first hidden unit
    weights.append(w0)
    biases.append(np.zeros(4))
    for _ in range(n_hidden - 1):
        w = np.zeros((4, 4))
        w[0, 0] = 1.0
        weights.append(w)
        biases.append(np.zeros(4))
    w_out = np.zeros((1, 4))
    w_out[0, 0] = 1.0
    weights.append(w_out)
    biases.append(np.zeros(1))
    return Network(tuple(weights), tuple(biases), Activation("relu"))


class TestEvalWithDerivatives:
    def test_linear_passthrough_surrogate(self):
        net = passthrough_relu_net()
        rec = eval_with_derivatives(net, 0.4, np.array([60.0, 55.0]))
        assert rec.value == 60.0
        assert rec.grad_t == 0.0
        np.testing.assert_array_equal(rec.grad_s, [1.0, 0.0])
        np.testing.assert_array_equal(rec.hess_s, np.zeros((2, 2)))

    def test_relu_hessian_exactly_zero(self):
        for seed in range(5):
            net = small_net("relu", seed=seed)
            rec = eval_with_derivatives(net, 0.7, np.array([63.0, 41.0]))
            assert np.all(rec.hess_s == 0.0)

    @pytest.mark.parametrize("kind", SMOOTH)
    def test_gradient_and_hessian_match_finite_differences(self, kind):
        # O(1) inputs and O(1) weights keep every unit in its curved regime,
        # where the finite-difference oracle actually resolves the Hessian.
        # Sigmoid nets carry a value scale well above their curvature scale,
        # so their second differences are roundoff-dominated at h = 1e-4 and
        # need a larger step; truncation remains far below the tolerance.
        rel_h = 4e-4 if kind == "sigmoid" else 1e-4
        rs = np.random.default_rng(17)
        worst = 0.0
        for seed in range(5):
            net = small_net(kind, seed=seed)
            net = net.with_params(rs.uniform(-1.2, 1.2, size=net.n_params))
            for _ in range(4):
                t = rs.uniform(0.0, 1.0)
                s = rs.uniform(0.5, 4.0, size=2)
                rec = eval_with_derivatives(net, t, s)
                f = lambda ss: forward(net, t, ss)
                g_ref = fd_gradient(f, s, rel_h=1e-4)
                h_ref = fd_hessian(f, s, rel_h=rel_h)
                scale_g = max(np.abs(g_ref).max(), 1e-8)
                scale_h = max(np.abs(h_ref).max(), 1e-8)
                worst = max(worst, np.abs(rec.grad_s - g_ref).max() / scale_g)
                worst = max(worst, np.abs(rec.hess_s - h_ref).max() / scale_h)
                # time derivative against a central difference in t
                ht = 1e-5
                gt_ref = (forward(net, t + ht, s) - forward(net, t - ht, s)) / (2 * ht)
                worst = max(worst, abs(rec.grad_t - gt_ref) / max(abs(gt_ref), 1e-8))
        assert worst < 1e-5, f"{kind}: max rel err {worst:.2e}"

    def test_hessian_symmetric(self):
        for kind in SMOOTH + ["elu", "relu", "selu"]:
            net = small_net(kind, seed=3)
            rec = eval_with_derivatives(net, 0.2, np.array([70.0, 30.0]))
            assert np.array_equal(rec.hess_s, rec.hess_s.T)

    def test_elu_derivatives_away_from_kinks(self):
        """C1 activation: gradient everywhere continuous, Hessian valid off
        the kinks (where it has bounded jumps), both matching finite
        differences at generic points."""
        rs = np.random.default_rng(9)
        worst_g, worst_h = 0.0, 0.0
        for seed in range(4):
            net = small_net("elu", seed=seed)
            net = net.with_params(rs.uniform(-1.2, 1.2, size=net.n_params))
            for _ in range(3):
                t = rs.uniform(0.0, 1.0)
                s = rs.uniform(0.5, 4.0, size=2)
                rec = eval_with_derivatives(net, t, s)
                assert np.all(np.isfinite(rec.hess_s))
                f = lambda ss: forward(net, t, ss)
                g_ref = fd_gradient(f, s, rel_h=1e-4)
                h_ref = fd_hessian(f, s, rel_h=1e-4)
                worst_g = max(worst_g, np.abs(rec.grad_s - g_ref).max() / max(np.abs(g_ref).max(), 1e-8))
                worst_h = max(worst_h, np.abs(rec.hess_s - h_ref).max() / max(np.abs(h_ref).max(), 1e-8))
        assert worst_g < 1e-5
        assert worst_h < 1e-4  # kink jumps exist but generic points are clean


class TestParameterGradient:
    def test_squared_value_loss(self):
        net = small_net(seed=11)
        x = np.array([[0.5, 60.0, 55.0]])

        def loss_fn(batch):
            v = batch.value[0]
            vbar = np.array([2.0 * v])
            return v**2, (vbar, np.zeros((1, 3)), np.zeros((1, 2, 2)))

        loss, grads = loss_param_gradient(net, x, loss_fn)
        flat = pack_grads(grads)

        def loss_of_flat(theta):
            out = eval_batch(net.with_params(theta), x)
            return out.value[0] ** 2

        ref = param_fd_gradient(loss_of_flat, net.pack())
        scale = max(np.abs(ref).max(), 1e-10)
        assert np.abs(flat - ref).max() / scale < 1e-4

    def test_constant_loss_zero_gradient(self):
        net = small_net(seed=1)
        x = np.array([[0.2, 50.0, 50.0]])
        loss_fn = lambda batch: (
            3.14,
            (np.zeros(1), np.zeros((1, 3)), np.zeros((1, 2, 2))),
        )
        _, grads = loss_param_gradient(net, x, loss_fn)
        assert np.all(pack_grads(grads) == 0.0)

    def test_pde_residual_loss_gradient(self):
        """Loss touching the Hessian exercises third-derivative flow."""
        net = small_net(seed=13, widths=(3, 6, 6, 1))
        x = np.array([[0.4, 55.0, 55.0]])
        r, sig1, sig2, rho = 0.1, 0.4, 0.2, 0.4
        c = np.array([[sig1**2, rho * sig1 * sig2], [rho * sig1 * sig2, sig2**2]])
        s = x[0, 1:]

        def residual(batch):
            quad = 0.5 * np.einsum("i,ij,mij,j->m", s, c, batch.hess, s)
            return (
                batch.grad[:, 0]
                + r * (s * batch.grad[:, 1:]).sum(axis=1)
                + quad
                - r * batch.value
            )

        def loss_fn(batch):
            res = residual(batch)[0]
            vbar = np.array([2.0 * res * (-r)])
            gbar = np.zeros((1, 3))
            gbar[0, 0] = 2.0 * res
            gbar[0, 1:] = 2.0 * res * r * s
            hbar = 2.0 * res * 0.5 * c * np.outer(s, s)
            return res**2, (vbar, gbar, hbar[None])

        loss, grads = loss_param_gradient(net, x, loss_fn)
        flat = pack_grads(grads)

        def loss_of_flat(theta):
            out = eval_batch(net.with_params(theta), x)
            return residual(out)[0] ** 2

        ref = param_fd_gradient(loss_of_flat, net.pack())
        scale = max(np.abs(ref).max(), 1e-10)
        assert np.abs(flat - ref).max() / scale < 1e-3

    def test_strict_mode_rejects_relu_hessian_loss(self):
        net = small_net("relu", seed=2)
        x = np.array([[0.5, 60.0, 55.0]])
        hbar = np.ones((1, 2, 2))
        loss_fn = lambda batch: (0.0, (np.zeros(1), np.zeros((1, 3)), hbar))
        with pytest.raises(UnsupportedActivationError):
            loss_param_gradient(net, x, loss_fn, strict=True)
        # permissive mode runs (zero second derivative kills the flow)
        loss_param_gradient(net, x, loss_fn, strict=False)

    def test_strict_mode_allows_gradient_only_loss_for_relu(self):
        net = small_net("relu", seed=2)
        x = np.array([[0.5, 60.0, 55.0]])
        loss_fn = lambda batch: (
            float(batch.value[0]),
            (np.ones(1), np.zeros((1, 3)), np.zeros((1, 2, 2))),
        )
        loss_param_gradient(net, x, loss_fn, strict=True)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        net = init_params((3, 35, 35, 35, 35, 1), Activation("softplus"), seed=8)
        path = tmp_path / "model.npz"
        save_checkpoint(net, path, meta={"note": "roundtrip", "config_hash": "abc123"})
        loaded, meta = load_checkpoint(path)
        assert meta["config_hash"] == "abc123"
        assert loaded.activation.kind == "softplus"
        assert loaded.widths == net.widths
        for wa, wb in zip(net.weights, loaded.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(net.biases, loaded.biases):
            assert np.array_equal(ba, bb)
