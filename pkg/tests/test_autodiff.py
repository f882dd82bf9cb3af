"""Unit tests for the reverse-mode engine, losses, and Adam."""

import numpy as np
import pytest

from sparsegrad import autodiff as ad
from sparsegrad.autodiff import Adam, Linear, MLP, Tape, Tensor
from sparsegrad.gradcheck import check_gradients

rng = np.random.default_rng(20260809)


class TestElementwise:
    def test_sigmoid_values(self):
        out = ad.sigmoid(Tensor([0.0, 1.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.7310586], atol=1e-7)

    def test_sigmoid_saturation(self):
        x = Tensor(np.array([-500.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.tsum(ad.sigmoid(x))
            tape.backward(y)
        assert y.data < 1e-100
        assert abs(x.grad[0]) < 1e-100

    def test_softplus_values(self):
        out = ad.softplus(Tensor([0.0, 2.0]))
        np.testing.assert_allclose(out.data, [np.log(2.0), 2.1269280], atol=1e-7)

    def test_softplus_stable_branch(self):
        out = ad.softplus(Tensor([50.0, -50.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0], 50.0, atol=1e-12)
        assert 0.0 < out.data[1] < 1e-20

    def test_clamp_gradient_window(self):
        x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        with Tape() as tape:
            tape.backward(ad.tsum(ad.clamp(x, 0.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestLosses:
    def test_mse_zero_when_equal(self):
        x = Tensor(rng.normal(size=5))
        assert ad.mse_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_mse_unit_offsets(self):
        assert ad.mse_loss(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item() == 1.0

    def test_mse_matches_hand_computation(self):
        p = rng.normal(size=(3, 4))
        t = rng.normal(size=(3, 4))
        assert ad.mse_loss(Tensor(p), Tensor(t)).item() == pytest.approx(
            np.mean((p - t) ** 2), rel=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_bce_symmetric_point(self):
        assert ad.bce_loss(Tensor([0.5]), Tensor([0.5])).item() == pytest.approx(np.log(2.0))

    def test_bce_clamp_keeps_loss_finite(self):
        loss = ad.bce_loss(Tensor([1.0]), Tensor([1.0])).item()
        assert 0.0 < loss < 1.1e-6

    def test_bce_one_sided(self):
        assert ad.bce_loss(Tensor([0.8]), Tensor([1.0])).item() == pytest.approx(
            -np.log(0.8), rel=1e-9)

    def test_bce_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.bce_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_softmax_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((4, 3)))
        loss = ad.softmax_cross_entropy(logits, np.array([0, 1, 2, 0]))
        assert loss.item() == pytest.approx(np.log(3.0))


class TestBackward:
    def test_constant_loss_leaves_grads_zero(self):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape() as tape:
            tape.backward(Tensor(5.0))
        assert w.grad is None

    def test_sum_sigmoid_at_zero(self):
        w = Tensor(np.zeros(4), requires_grad=True)
        with Tape() as tape:
            tape.backward(ad.tsum(ad.sigmoid(w)))
        np.testing.assert_allclose(w.grad, 0.25)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.zeros(4), requires_grad=True)
        with Tape() as tape:
            y = ad.sigmoid(w)
            with pytest.raises(ValueError):
                tape.backward(y)

    def test_loss_from_other_tape_rejected(self):
        w = Tensor(np.zeros(2), requires_grad=True)
        with Tape():
            loss = ad.tsum(w)
        with Tape() as other:
            with pytest.raises(ValueError):
                other.backward(loss)

    def test_backward_is_linear(self):
        w0 = rng.normal(size=4)

        def combined(a, b):
            w = Tensor(w0, requires_grad=True)
            with Tape() as tape:
                l1 = ad.tsum(ad.sigmoid(w))
                l2 = ad.mse_loss(ad.softplus(w), Tensor(np.ones(4)))
                tape.backward(ad.add(ad.mul(l1, a), ad.mul(l2, b)))
            return w.grad

        def single(f, scale):
            w = Tensor(w0, requires_grad=True)
            with Tape() as tape:
                tape.backward(f(w))
            return scale * w.grad

        lhs = combined(2.0, -3.0)
        rhs = (single(lambda w: ad.tsum(ad.sigmoid(w)), 2.0)
               + single(lambda w: ad.mse_loss(ad.softplus(w), Tensor(np.ones(4))), -3.0))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_gradients_accumulate_across_passes(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(ad.mul(w, w))
            tape.backward(loss)
            once = w.grad.copy()
            tape.backward(loss)
        np.testing.assert_allclose(w.grad, 2.0 * once)

    def test_shared_operand_paths_sum(self):
        x0 = np.array([1.3])

        def build(x):
            return ad.tsum(ad.sub(ad.mul(ad.mul(x, x), x), ad.mul(x, 2.0)))

        check_gradients(build, [x0], tol=1e-6)

    def test_forward_deterministic(self):
        x = rng.normal(size=(4, 4))
        a = ad.sigmoid(ad.matmul(Tensor(x), Tensor(x))).data
        b = ad.sigmoid(ad.matmul(Tensor(x), Tensor(x))).data
        np.testing.assert_array_equal(a, b)


class TestFiniteDifferences:
    """Composite graphs match central differences within 1e-4."""

    @pytest.mark.parametrize("trial", range(10))
    def test_random_composites(self, trial):
        r = np.random.default_rng(1000 + trial)
        a0 = r.normal(size=(3, 5))
        b0 = r.normal(size=(5, 2))

        def build(a, b):
            h = ad.sigmoid(ad.matmul(a, b))
            return ad.add(ad.tsum(ad.mul(h, h)),
                          ad.tmean(ad.softplus(ad.sub(a, 0.3))))

        check_gradients(build, [a0, b0], tol=1e-4)

    def test_reductions_and_shapes(self):
        r = np.random.default_rng(77)
        a0 = r.normal(size=(2, 3, 4))

        def build(a):
            s = ad.tsum(a, axis=1)
            m = ad.tmean(ad.exp(ad.mul(s, 0.2)), axis=0)
            return ad.tsum(ad.mul(ad.transpose(ad.reshape(m, (2, 2))), 1.5))

        check_gradients(build, [a0], tol=1e-4)

    def test_index_rows_gradients(self):
        r = np.random.default_rng(78)
        a0 = r.normal(size=(5, 3))
        idx = np.array([0, 2, 2, 4, 1])

        def build(a):
            return ad.tsum(ad.mul(ad.index_rows(a, idx), ad.index_rows(a, idx)))

        check_gradients(build, [a0], tol=1e-4)

    def test_concat_gradients(self):
        r = np.random.default_rng(79)
        a0 = r.normal(size=(2, 3))
        b0 = r.normal(size=(2, 2))

        def build(a, b):
            return ad.tsum(ad.sigmoid(ad.concat([a, b], axis=1)))

        check_gradients(build, [a0, b0], tol=1e-4)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        p.grad = np.array([3.7])
        opt.step()
        assert p.data[0] == pytest.approx(-0.05, rel=1e-6)

    def test_three_step_trace_matches_reference(self):
        # scalar quadratic f(x) = (x - 1)^2 / 2, gradient x - 1
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x_ref, m_ref, v_ref = 0.0, 0.0, 0.0
        trace = []
        for t in range(1, 4):
            g = x_ref - 1.0
            m_ref = b1 * m_ref + (1 - b1) * g
            v_ref = b2 * v_ref + (1 - b2) * g * g
            x_ref -= lr * (m_ref / (1 - b1 ** t)) / (np.sqrt(v_ref / (1 - b2 ** t)) + eps)
            trace.append(x_ref)

        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        for want in trace:
            p.zero_grad()
            p.grad = p.data - 1.0
            opt.step()
            assert p.data[0] == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.data = np.zeros(4)
        p.grad = np.zeros(4)
        with pytest.raises(ValueError):
            opt.step()


class TestLayers:
    def test_linear_shapes_and_grads(self):
        r = np.random.default_rng(5)
        layer = Linear(4, 3, r)
        x = r.normal(size=(7, 4))
        with Tape() as tape:
            y = layer(Tensor(x))
            assert y.shape == (7, 3)
            tape.backward(ad.tsum(y))
        assert layer.weight.grad.shape == (4, 3)
        np.testing.assert_allclose(layer.bias.grad, 7.0)

    def test_mlp_forward_finite(self):
        r = np.random.default_rng(6)
        net = MLP(8, [16], 2, r)
        out = net(Tensor(r.normal(size=(5, 8))))
        assert out.shape == (5, 2)
        assert np.isfinite(out.data).all()

    def test_glorot_bound(self):
        r = np.random.default_rng(7)
        w = ad.glorot_uniform(r, 30, 10)
        bound = np.sqrt(6.0 / 40.0)
        assert np.all(np.abs(w) <= bound)


class TestCooMatmul:
    def test_identity_matrix(self):
        n = 6
        idx = np.arange(n)
        x = rng.normal(size=n)
        y = ad.coo_matmul(Tensor(np.ones(n)), idx, idx, n, Tensor(x))
        np.testing.assert_allclose(y.data, x, atol=1e-15)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(IndexError):
            ad.coo_matmul(Tensor(np.ones(1)), np.array([5]), np.array([0]), 4,
                          Tensor(np.zeros(3)))
        with pytest.raises(IndexError):
            ad.coo_matmul(Tensor(np.ones(1)), np.array([0]), np.array([7]), 4,
                          Tensor(np.zeros(3)))

    def test_duplicate_entries_sum(self):
        values = Tensor(np.array([2.0, 3.0]))
        y = ad.coo_matmul(values, np.array([1, 1]), np.array([0, 0]), 2,
                          Tensor(np.array([1.0])))
        np.testing.assert_allclose(y.data, [0.0, 5.0])

    def test_gradients_both_paths(self):
        r = np.random.default_rng(11)
        n_rows, n_cols, nnz, width = 5, 4, 9, 3
        rows = r.integers(0, n_rows, nnz)
        cols = r.integers(0, n_cols, nnz)
        v0 = r.normal(size=nnz)
        x0 = r.normal(size=(n_cols, width))

        def build(v, x):
            y = ad.coo_matmul(v, rows, cols, n_rows, x)
            return ad.tsum(ad.mul(y, y))

        check_gradients(build, [v0, x0], tol=1e-4)
