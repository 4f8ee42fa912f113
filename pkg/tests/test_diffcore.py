import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dab import diffcore as dc


def _mlp_loss(params, x, y, act=dc.elu):
    h = act(dc.constant(x) @ params["W1"] + params["b1"])
    out = h @ params["W2"] + params["b2"]
    return dc.square(out[:, 0] - dc.constant(y)).mean()


def _mlp_params(rng, d_in=3, hidden=5):
    return {
        "W1": rng.normal(size=(d_in, hidden)),
        "b1": rng.normal(size=hidden),
        "W2": rng.normal(size=(hidden, 1)),
        "b2": rng.normal(size=1),
    }


class TestForward:
    def test_identity(self):
        g = dc.Graph(lambda p, i: p["x"], {"x": 2.0})
        assert g.forward()["out"] == 2.0

    def test_softplus_at_zero(self):
        assert dc.softplus(0.0).item() == pytest.approx(math.log(1 + math.exp(0.0)), abs=1e-15)
        assert dc.softplus(0.0).item() == pytest.approx(0.693147, abs=1e-6)

    def test_identity_matmul(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = dc.Graph(lambda p, i: dc.matmul(i["I"], p["A"]), {"A": a})
        np.testing.assert_array_equal(g.forward({"I": np.eye(2)})["out"], a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            dc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_names_node(self):
        with pytest.raises(FloatingPointError, match="log"):
            dc.log(dc.constant(-1.0))

    def test_elu_matches_definition(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
        expected = np.where(x > 0, x, np.exp(x) - 1)
        np.testing.assert_allclose(dc.elu(x).data, expected, atol=1e-15)

    def test_logsumexp_is_stable(self):
        x = np.array([1000.0, 1000.0])
        assert dc.logsumexp(x).item() == pytest.approx(1000.0 + math.log(2))

    def test_topological_order(self):
        p = dc.parameter(np.ones(2), "p")
        out = dc.exp(p * 2.0).sum()
        order = dc.topological_order(out)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]


class TestBackward:
    def test_square(self):
        x = dc.parameter(3.0)
        assert dc.grad(dc.square(x), {"x": x})["x"] == 6.0

    def test_exp_at_zero(self):
        x = dc.parameter(0.0)
        assert dc.grad(dc.exp(x), {"x": x})["x"] == 1.0

    def test_non_scalar_output(self):
        x = dc.parameter(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            dc.grad(x * 2.0, {"x": x})

    def test_unused_parameter_gets_exact_zero(self):
        x, unused = dc.parameter(np.ones(2)), dc.parameter(np.ones((2, 2)))
        g = dc.grad((x * x).sum(), {"x": x, "u": unused})
        assert np.array_equal(g["u"], np.zeros((2, 2)))

    def test_stop_gradient(self):
        x = dc.parameter(2.0)
        y = dc.stop_gradient(dc.square(x)) * x
        assert y.item() == 8.0
        # d/dx [c * x] with c = x^2 frozen = 4
        assert dc.grad(y, {"x": x})["x"] == 4.0

    def test_stop_gradient_blocks_all(self):
        x = dc.parameter(np.ones(3))
        g = dc.grad(dc.stop_gradient(x * 3.0).sum(), {"x": x})
        assert np.array_equal(g["x"], np.zeros(3))

    def test_graph_backward(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=4)
        g = dc.Graph(lambda p, i: _mlp_loss(p, i["x"].data, i["y"].data), _mlp_params(rng))
        g.forward({"x": x, "y": y})
        grads = g.backward()
        assert set(grads) == {"W1", "b1", "W2", "b2"}
        assert grads["W1"].shape == (3, 5)

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=6)
        err = dc.finite_difference_check(lambda p: _mlp_loss(p, x, y), _mlp_params(rng))
        assert err < 1e-4

    @pytest.mark.parametrize("op", [dc.relu, dc.softplus, dc.exp, dc.elu])
    def test_unary_ops(self, op):
        rng = np.random.default_rng(2)
        # keep away from the relu kink
        x0 = rng.uniform(0.1, 1.0, size=4) * rng.choice([-1, 1], size=4)
        assert dc.finite_difference_check(lambda p: (op(p["x"]) * 1.3).sum(), {"x": x0}) < 1e-4

    def test_log_sqrt_div_logsumexp(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(0.5, 2.0, size=(3, 4))

        def loss(p):
            a = dc.log(p["x"]) + dc.sqrt(p["x"]) / (p["x"] + 1.0)
            return dc.logsumexp(a, axis=1).sum() + dc.clip_min(p["x"], 1.0).mean()

        assert dc.finite_difference_check(loss, {"x": x0}) < 1e-4

    def test_broadcast_and_getitem(self):
        rng = np.random.default_rng(4)
        params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}

        def loss(p):
            s = p["a"] * p["b"] - p["b"]
            return dc.square(s[:, :2]).sum() + dc.concat([s[:, 2:], s[:, :1]]).sum()

        assert dc.finite_difference_check(loss, params) < 1e-4


class TestFiniteDifference:
    def test_quadratic(self):
        assert dc.finite_difference_check(lambda p: dc.square(p["x"]).sum(), {"x": 3.0}) < 1e-6

    def test_disconnected_parameter(self):
        err = dc.finite_difference_check(lambda p: dc.square(p["x"]).sum(),
                                         {"x": 1.5, "unused": np.ones(3)})
        assert err < 1e-6

    def test_rejects_non_deterministic_loss(self):
        rng = np.random.default_rng()

        def noisy(p):
            return (p["x"] * rng.normal()).sum()

        with pytest.raises(RuntimeError, match="deterministic"):
            dc.finite_difference_check(noisy, {"x": 1.0})

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            dc.finite_difference_check(lambda p: p["x"], {"x": 1.0}, step=0.0)


class TestOptimizers:
    def test_sgd_scalar(self):
        w = {"w": dc.parameter(1.0)}
        dc.SGD(0.1).step(w, {"w": np.array(0.5)})
        assert w["w"].item() == pytest.approx(0.95, abs=1e-15)

    def test_sgd_zero_grad(self):
        w = {"w": dc.parameter(np.array([1.0, -2.0]))}
        dc.SGD(0.1).step(w, {"w": np.zeros(2)})
        np.testing.assert_array_equal(w["w"].data, [1.0, -2.0])

    def test_sgd_vector_matches_loop(self):
        rng = np.random.default_rng(5)
        w0, g = rng.normal(size=7), rng.normal(size=7)
        w = {"w": dc.parameter(w0.copy())}
        dc.SGD(0.03).step(w, {"w": g})
        expected = [w0[i] - 0.03 * g[i] for i in range(7)]
        np.testing.assert_array_equal(w["w"].data, expected)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            dc.SGD(0.1).step({"w": dc.parameter(np.ones(2))}, {"w": np.ones(3)})

    def test_adam_zero_grad_fresh(self):
        w = {"w": dc.parameter(0.7)}
        dc.Adam(0.1).step(w, {"w": np.array(0.0)})
        assert w["w"].item() == 0.7

    def test_adam_first_step(self):
        # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        w = {"w": dc.parameter(0.0)}
        dc.Adam(0.1).step(w, {"w": np.array(1.0)})
        assert w["w"].item() == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_adam_two_steps_vs_recurrence(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        grads = [0.3, -1.2]
        w_ref, m, v = 0.4, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        w = {"w": dc.parameter(0.4)}
        opt = dc.Adam(lr)
        for g in grads:
            opt.step(w, {"w": np.array(g)})
        assert abs(w["w"].item() - w_ref) < 1e-12
        assert opt.t == 2

    def test_make_optimizer(self):
        assert isinstance(dc.make_optimizer("Adam", 0.1), dc.Adam)
        with pytest.raises(ValueError):
            dc.make_optimizer("rmsprop", 0.1)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
    def test_gradient_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=4)
        params = _mlp_params(rng)

        def f(p):
            return _mlp_loss(p, x, y)

        def g(p):
            return dc.softplus(p["W1"]).sum() + dc.square(p["b2"]).sum()

        t = {k: dc.parameter(v) for k, v in params.items()}
        combo = dc.grad(a * f(t) + b * g(t), t)
        gf, gg = dc.grad(f(t), t), dc.grad(g(t), t)
        for k in params:
            np.testing.assert_allclose(combo[k], a * gf[k] + b * gg[k], atol=1e-10)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            x, y = rng.normal(size=(5, 3)), rng.normal(size=5)
            t = {k: dc.parameter(v) for k, v in _mlp_params(rng).items()}
            loss = _mlp_loss(t, x, y)
            return loss.data, dc.grad(loss, t)

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes()
        for k in g1:
            assert g1[k].tobytes() == g2[k].tobytes()

    def test_truncated_normal_bounds(self):
        w = dc.truncated_normal(np.random.default_rng(0), (200, 50), stddev=0.1)
        assert np.abs(w).max() <= 0.2
        assert abs(w.std() - 0.088) < 0.01  # std of N(0,1) truncated at 2 is ~0.88
