import numpy as np
import pytest

from birl.nn import (
    AdamState,
    Linear,
    Mlp,
    ParamBundle,
    adam_step,
    grad_check,
    load_checkpoint,
    orthogonal,
    save_checkpoint,
    softplus,
)
from oracles import central_difference_gradient


def make_mlp(rng, widths, final_tanh=False):
    layers = [Linear(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
    return Mlp(layers, final_tanh=final_tanh)


class TestForward:
    def test_zero_weights_gives_bias(self):
        rng = np.random.default_rng(0)
        net = make_mlp(rng, [3, 4, 2])
        for layer in net.layers:
            layer.w.value[...] = 0.0
        net.layers[-1].b.value[...] = [1.5, -2.0]
        out, _ = net.forward(np.ones(3))
        np.testing.assert_allclose(out, [1.5, -2.0])

    def test_identity_linear_passthrough(self):
        rng = np.random.default_rng(0)
        net = Mlp([Linear(rng, 3, 3)])
        net.layers[0].w.value[...] = np.eye(3)
        net.layers[0].b.value[...] = 0.0
        x = np.array([0.3, -1.2, 2.0])
        out, _ = net.forward(x)
        np.testing.assert_allclose(out, x)

    def test_fixed_seed_regression(self):
        # golden values frozen from the first verified run of this layout
        rng = np.random.default_rng(42)
        net = make_mlp(rng, [2, 4, 3])
        out, _ = net.forward(np.array([0.5, -0.25]))
        np.testing.assert_allclose(
            out,
            [-0.3275045732409625, 0.0899098291753074, 0.5743286270045690],
            rtol=1e-10,
        )

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        net = make_mlp(rng, [3, 8, 2])
        xs = rng.standard_normal((5, 3))
        batch, _ = net.forward(xs)
        singles = np.stack([net.forward(x)[0] for x in xs])
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        net = make_mlp(rng, [3, 2])
        with pytest.raises(ValueError):
            net.forward(np.ones(4))


class TestBackward:
    def test_linear_least_squares_gradient(self):
        rng = np.random.default_rng(2)
        net = Mlp([Linear(rng, 3, 2)])
        x = rng.standard_normal(3)
        target = rng.standard_normal(2)
        out, cache = net.forward(x)
        net.backward(2.0 * (out - target), cache)
        w_grad = np.outer(2.0 * (out - target), x)
        np.testing.assert_allclose(net.layers[0].w.grad, w_grad, atol=1e-12)
        np.testing.assert_allclose(net.layers[0].b.grad, 2.0 * (out - target))

    def test_zero_output_grad(self):
        rng = np.random.default_rng(3)
        net = make_mlp(rng, [3, 5, 2])
        out, cache = net.forward(rng.standard_normal(3))
        net.backward(np.zeros(2), cache)
        for p in ParamBundle(net.parameters()).params:
            assert np.all(p.grad == 0.0)

    def test_backward_before_forward_raises(self):
        rng = np.random.default_rng(0)
        net = make_mlp(rng, [2, 2])
        with pytest.raises(RuntimeError):
            net.backward(np.ones(2))

    @pytest.mark.parametrize("final_tanh", [False, True])
    def test_matches_finite_differences(self, final_tanh):
        rng = np.random.default_rng(4)
        net = make_mlp(rng, [3, 6, 4, 2], final_tanh=final_tanh)
        bundle = ParamBundle(net.parameters())
        x = rng.standard_normal(3)
        coef = rng.standard_normal(2)

        def loss_and_grad(flat):
            bundle.set_flat(flat)
            bundle.zero_grads()
            out, cache = net.forward(x)
            val = coef @ out + 0.5 * np.sum(out ** 2)
            net.backward(coef + out, cache)
            return val, bundle.grad_flat()

        err = grad_check(loss_and_grad, bundle.get_flat())
        assert err < 1e-4

    def test_input_gradient(self):
        rng = np.random.default_rng(5)
        net = make_mlp(rng, [3, 6, 1])
        x = rng.standard_normal(3)

        def f(xv):
            out, _ = net.forward(xv)
            return out[0]

        out, cache = net.forward(x)
        dx = net.backward(np.ones(1), cache)
        np.testing.assert_allclose(dx, central_difference_gradient(f, x),
                                   atol=1e-6)


class TestSharedLayer:
    def test_shared_first_layer_accumulates_both_paths(self):
        rng = np.random.default_rng(6)
        shared = Linear(rng, 3, 4)
        net_a = Mlp([shared, Linear(rng, 4, 1)])
        net_b = Mlp([shared, Linear(rng, 4, 1)])
        params = ParamBundle(net_a.parameters() + net_b.parameters())
        # dedup: shared layer counted once
        assert params.size == (3 * 4 + 4) + 2 * (4 * 1 + 1)
        xa = rng.standard_normal(3)
        xb = rng.standard_normal(3)

        def loss_and_grad(flat):
            params.set_flat(flat)
            params.zero_grads()
            ya, ca = net_a.forward(xa)
            yb, cb = net_b.forward(xb)
            val = ya[0] ** 2 + 3.0 * yb[0]
            net_a.backward(np.array([2.0 * ya[0]]), ca)
            net_b.backward(np.array([3.0]), cb)
            return val, params.grad_flat()

        assert grad_check(loss_and_grad, params.get_flat()) < 1e-4


class TestAdam:
    def test_zero_gradient_no_change(self):
        state = AdamState(lr=1e-3)
        params = np.array([1.0, -2.0, 3.0])
        new = adam_step(state, params, np.zeros(3))
        np.testing.assert_array_equal(new, params)

    def test_first_step_magnitude(self):
        # bias correction makes the first step ~lr in each coordinate
        state = AdamState(lr=1e-3, eps=1e-8)
        params = np.zeros(4)
        new = adam_step(state, params, np.full(4, 0.7))
        np.testing.assert_allclose(np.abs(new), 1e-3, rtol=1e-4)

    def test_quadratic_descent(self):
        state = AdamState(lr=0.05)
        x = np.array([3.0, -4.0])
        losses = []
        for _ in range(200):
            losses.append(float(x @ x))
            x = adam_step(state, x, 2.0 * x)
        # monotone after the warmup phase
        assert all(b <= a + 1e-12 for a, b in zip(losses[10:], losses[11:]))
        assert losses[-1] < 1e-2

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), np.zeros(3), np.zeros(2))

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            net = make_mlp(rng, [2, 8, 1])
            bundle = ParamBundle(net.parameters())
            state = AdamState(lr=1e-3)
            flat = bundle.get_flat()
            data = rng.standard_normal((16, 2))
            for i in range(25):
                bundle.set_flat(flat)
                bundle.zero_grads()
                out, cache = net.forward(data)
                net.backward(out / out.size, cache)
                flat = adam_step(state, flat, bundle.grad_flat())
            return flat

        np.testing.assert_array_equal(run(), run())


class TestGradCheck:
    def test_quadratic_exact(self):
        def f(x):
            return float(x @ x), 2.0 * x

        assert grad_check(f, np.array([0.5, -1.5, 2.0])) < 1e-8

    def test_detects_wrong_gradient(self):
        def f(x):
            return float(x @ x), 3.0 * x  # wrong scale

        assert grad_check(f, np.array([1.0, 2.0])) > 0.1


class TestUtilities:
    def test_orthogonal_rows(self):
        rng = np.random.default_rng(8)
        w = orthogonal(rng, 4, 6, gain=1.0)
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-10)

    def test_orthogonal_gain(self):
        rng = np.random.default_rng(8)
        w = orthogonal(rng, 3, 3, gain=2.0)
        np.testing.assert_allclose(w @ w.T, 4.0 * np.eye(3), atol=1e-10)

    def test_softplus_stable(self):
        assert softplus(0.0) == pytest.approx(np.log(2.0))
        assert softplus(800.0) == pytest.approx(800.0)
        assert softplus(-800.0) == pytest.approx(0.0, abs=1e-12)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        net = make_mlp(rng, [3, 4, 2])
        bundle = ParamBundle(net.parameters())
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, bundle.get_flat(), {"widths": net.widths})
        flat, meta = load_checkpoint(path)
        np.testing.assert_array_equal(flat, bundle.get_flat())
        assert meta["widths"] == [3, 4, 2]

    def test_rejects_bad_version(self, tmp_path):
        path = tmp_path / "ckpt.npz"
        np.savez(path, params=np.zeros(3), meta='{"format_version": 99}')
        with pytest.raises(ValueError):
            load_checkpoint(path)
