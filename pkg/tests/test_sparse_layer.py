"""Unit tests for the sparse layer pipeline against independent oracles."""

import numpy as np
import pytest

from sparsegrad import autodiff as ad
from sparsegrad.autodiff import Tape, Tensor
from sparsegrad.cantor import cantor_code, first_occurrence_mask
from sparsegrad.gradcheck import finite_difference, max_relative_error, taped_gradients
from sparsegrad.rng import SeedStream
from sparsegrad.sparse import (
    DegenerateSampleError,
    HyperlayerShape,
    SamplingConfig,
    SparseLayer,
    accumulate_gradients,
    assemble_flat_indices,
    distribute_values,
    duplicate_mask,
    flat_index,
    gaussian_proportions,
    nearest_corners,
    sample_global,
    sample_integer_tuples,
    sample_local,
    sparse_matmul,
    tuple_means,
    tuple_variances,
)

rng = SeedStream(41).child("unit").generator()


def densify(values, tuples, shape):
    """O(nnz) reference: scatter-add the sparse entries into a dense matrix."""
    w = np.zeros((shape.out_size, shape.in_size))
    rows, cols = assemble_flat_indices(tuples, shape)
    np.add.at(w, (rows, cols), values)
    return w


def diagonal_layer(n, tau=0.1, variance_raw=-30.0):
    """A layer whose tuples sit exactly on the diagonal with unit values."""
    layer = SparseLayer(HyperlayerShape((n,), (n,)), n, rng, tau=tau)
    target = np.arange(n, dtype=np.float64)[:, None].repeat(2, axis=1)
    frac = np.clip(target / n, 1e-12, 1 - 1e-12)
    layer.d_raw.data = np.log(frac / (1 - frac))
    layer.sigma_raw.data = np.full(n, variance_raw)
    layer.values.data = np.ones(n)
    return layer


class TestParameterMaps:
    def test_center_of_index_space(self):
        means = tuple_means(Tensor(np.zeros((1, 2))), (8, 8))
        np.testing.assert_allclose(means.data, [[4.0, 4.0]])

    def test_sigmoid_scaling(self):
        means = tuple_means(Tensor(np.array([[1.0]])), (8,))
        assert means.data[0, 0] == pytest.approx(5.8484686, abs=1e-6)

    def test_saturated_raw_stays_inside(self):
        means = tuple_means(Tensor(np.full((1, 2), -30.0)), (8, 8))
        assert np.all(means.data > 0.0)
        assert np.all(means.data < 1e-10)

    def test_variance_at_zero_raw(self):
        var = tuple_variances(Tensor(np.zeros(1)), (10, 10), 0.1)
        np.testing.assert_allclose(var.data, 2.2269280, atol=1e-6)

    def test_variance_at_minus_two_raw(self):
        var = tuple_variances(Tensor(np.array([-2.0])), (10, 10), 0.1)
        np.testing.assert_allclose(var.data, np.log(2.0) + 0.1, atol=1e-9)

    def test_variance_floor(self):
        var = tuple_variances(Tensor(np.array([-200.0])), (10, 10), 0.1)
        np.testing.assert_allclose(var.data, 0.1, atol=1e-12)


class TestCorners:
    def test_interior_point(self):
        got = nearest_corners(np.array([[1.3, 2.7]]), (8, 8))[0]
        want = {(1, 2), (1, 3), (2, 2), (2, 3)}
        assert set(map(tuple, got)) == want

    def test_low_corner(self):
        got = nearest_corners(np.array([[0.2, 0.2]]), (8, 8))[0]
        assert set(map(tuple, got)) == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_boundary_clamp_creates_repeats(self):
        got = nearest_corners(np.array([[7.9, 7.9]]), (8, 8))[0]
        assert got.min() >= 0 and got.max() <= 7
        assert (got == 7).all()


class TestSampling:
    def test_local_box_membership(self):
        pts = sample_local(np.array([[4.2, 4.0]]), (3, 3), (8, 8), 200, rng)
        assert pts.min() >= 3 and pts.max() <= 5

    def test_local_box_aligned_to_bound(self):
        pts = sample_local(np.array([[0.1, 0.1]]), (3, 3), (8, 8), 200, rng)
        assert pts.min() >= 0 and pts.max() <= 2

    def test_local_empty(self):
        assert sample_local(np.array([[1.0, 1.0]]), (3, 3), (8, 8), 0, rng).shape == (1, 0, 2)

    def test_global_empty(self):
        assert sample_global((8, 8), 1, 0, rng).shape == (1, 0, 2)

    def test_global_within_bounds(self):
        dims = tuple(rng.integers(2, 9, size=3))
        pts = sample_global(dims, 4, 100, rng)
        assert pts.min() >= 0
        assert np.all(pts.max(axis=(0, 1)) < np.array(dims))

    def test_global_uniformity(self):
        draws = sample_global((2, 2), 1, 10_000, rng).reshape(-1, 2)
        codes = draws[:, 0] * 2 + draws[:, 1]
        counts = np.bincount(codes, minlength=4)
        chi2 = np.sum((counts - 2500.0) ** 2 / 2500.0)
        assert chi2 < 16.27  # chi-square(3) at p=0.001

    def test_tuple_major_layout(self):
        d = np.array([[1.0, 1.0], [5.0, 5.0]])
        cfg = SamplingConfig(2, 3, (3, 3))
        tuples = sample_integer_tuples(d, cfg, (8, 8), rng)
        assert tuples.shape == (2 * (4 + 2 + 3), 2)


class TestProportions:
    def test_density_at_mode(self):
        means = Tensor(np.array([[3.0, 4.0]]))
        var = Tensor(np.array([[1.0, 1.0]]))
        p = gaussian_proportions(means, var, np.array([[3, 4]]))
        assert p.data[0, 0] == pytest.approx(1.0 / (2 * np.pi), rel=1e-12)

    def test_far_tail_vanishes(self):
        means = Tensor(np.array([[0.0, 0.0]]))
        var = Tensor(np.array([[1.0, 1.0]]))
        p = gaussian_proportions(means, var, np.array([[15, 15]]))
        assert p.data[0, 0] < 1e-20

    def test_symmetric_tuples_equal_density(self):
        means = Tensor(np.array([[2.0, 2.0]]))
        var = Tensor(np.array([[0.7, 0.7]]))
        p = gaussian_proportions(means, var, np.array([[1, 2], [3, 2], [2, 1], [2, 3]]))
        np.testing.assert_allclose(p.data[0], p.data[0, 0])


class TestDuplicateMask:
    def test_cantor_pair_example(self):
        assert cantor_code((1, 2)) == 8

    def test_simple_duplicate(self):
        mask = duplicate_mask(np.array([[1, 2], [3, 0], [1, 2]]))
        np.testing.assert_array_equal(mask, [1.0, 1.0, 0.0])

    def test_keeps_smallest_original_index(self):
        mask = duplicate_mask(np.array([[5, 5], [1, 1], [5, 5], [1, 1], [1, 1]]))
        np.testing.assert_array_equal(mask, [1.0, 1.0, 0.0, 0.0, 0.0])

    @pytest.mark.parametrize("trial", range(20))
    def test_matches_pairwise_oracle(self, trial):
        r = np.random.default_rng(300 + trial)
        rows = r.integers(0, 4, size=(r.integers(2, 40), r.integers(2, 5)))
        oracle = np.ones(len(rows))
        for i in range(len(rows)):
            for j in range(i):
                if np.array_equal(rows[i], rows[j]):
                    oracle[i] = 0.0
                    break
        np.testing.assert_array_equal(duplicate_mask(rows), oracle)

    def test_code_overflow_detected(self):
        big = int(2 ** 63)
        rows = np.array([[big, big, big, big]], dtype=object)
        with pytest.raises(OverflowError):
            first_occurrence_mask(rows)

    def test_object_path_matches_u64_path(self):
        r = np.random.default_rng(9)
        rows = r.integers(0, 50, size=(64, 3))
        fast = first_occurrence_mask(rows)
        slow = first_occurrence_mask(rows, max_bits=None)
        np.testing.assert_array_equal(fast, slow)


class TestDistributeValues:
    def test_equal_densities_split_evenly(self):
        p = Tensor(np.array([[0.3, 0.3]]))
        v = distribute_values(p, np.ones(2), Tensor(np.array([1.0])))
        np.testing.assert_allclose(v.data, [0.5, 0.5])

    def test_single_unmasked_tuple_carries_value(self):
        p = Tensor(np.array([[0.9, 0.4]]))
        v = distribute_values(p, np.array([0.0, 1.0]), Tensor(np.array([2.5])))
        np.testing.assert_allclose(v.data, [0.0, 2.5])

    def test_matches_dense_computation(self):
        r = np.random.default_rng(13)
        p = r.uniform(0.1, 1.0, size=(3, 7))
        mask = (r.uniform(size=7) > 0.3).astype(float)
        mask[0] = 1.0
        v = r.normal(size=3)
        got = distribute_values(Tensor(p), mask, Tensor(v)).data
        pm = p * mask
        want = (pm / pm.sum(axis=1, keepdims=True)).T @ v
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_degenerate_row_raises(self):
        p = Tensor(np.array([[0.5, 0.5]]))
        with pytest.raises(DegenerateSampleError):
            distribute_values(p, np.zeros(2), Tensor(np.array([1.0])))

    def test_mass_conservation(self):
        r = np.random.default_rng(14)
        p = r.uniform(0.1, 1.0, size=(5, 11))
        v = r.normal(size=5)
        got = distribute_values(Tensor(p), np.ones(11), Tensor(v)).data
        assert got.sum() == pytest.approx(v.sum(), abs=1e-9)


class TestFlatten:
    def test_rank_two_is_already_flat(self):
        rows, cols = assemble_flat_indices(np.array([[2, 3]]), HyperlayerShape((5,), (4,)))
        assert (rows[0], cols[0]) == (2, 3)

    def test_hand_computed_pair(self):
        shape = HyperlayerShape(input_dims=(5, 6), output_dims=(3, 4))
        rows, cols = assemble_flat_indices(np.array([[1, 0, 2, 1]]), shape)
        assert (rows[0], cols[0]) == (4, 13)

    def test_batch_block_diagonal_identity(self):
        shape = HyperlayerShape((3,), (3,))
        tuples = np.tile(np.arange(3)[:, None], (2, 2))
        batch = np.repeat([0, 1], 3)
        rows, cols = assemble_flat_indices(tuples, shape, batch_index=batch)
        w = np.zeros((6, 6))
        w[rows, cols] = 1.0
        np.testing.assert_array_equal(w, np.eye(6))

    def test_flat_index_matches_row_major_formula(self):
        r = np.random.default_rng(15)
        dims = (3, 4, 5)
        pts = np.stack([r.integers(0, d, size=20) for d in dims], axis=1)
        manual = pts[:, 0] * 20 + pts[:, 1] * 5 + pts[:, 2]
        np.testing.assert_array_equal(flat_index(pts, dims), manual)


class TestSparseMatmul:
    def test_identity_passthrough(self):
        n = 5
        shape = HyperlayerShape((n,), (n,))
        tuples = np.tile(np.arange(n)[:, None], (1, 2))
        x = rng.normal(size=n)
        y = sparse_matmul(Tensor(np.ones(n)), tuples, shape, Tensor(x))
        np.testing.assert_allclose(y.data, x, atol=1e-15)

    @pytest.mark.parametrize("trial", range(20))
    def test_matches_dense_oracle(self, trial):
        r = np.random.default_rng(500 + trial)
        shape = HyperlayerShape(tuple(r.integers(2, 9, 2)), tuple(r.integers(2, 9, 2)))
        nnz = int(r.integers(1, 40))
        tuples = np.stack([r.integers(0, d, nnz) for d in shape.dims], axis=1)
        values = r.normal(size=nnz)
        x = r.normal(size=shape.input_dims)
        y = sparse_matmul(Tensor(values), tuples, shape, Tensor(x))
        want = (densify(values, tuples, shape) @ x.reshape(-1)).reshape(shape.output_dims)
        np.testing.assert_allclose(y.data, want, atol=1e-12)

    def test_batched_matches_loop(self):
        r = np.random.default_rng(21)
        shape = HyperlayerShape((4,), (6,))
        tuples = np.stack([r.integers(0, 6, 10), r.integers(0, 4, 10)], axis=1)
        values = r.normal(size=10)
        xb = r.normal(size=(3, 4))
        got = sparse_matmul(Tensor(values), tuples, shape, Tensor(xb)).data
        for i in range(3):
            single = sparse_matmul(Tensor(values), tuples, shape, Tensor(xb[i])).data
            np.testing.assert_allclose(got[i], single, atol=1e-12)

    def test_value_gradient_matches_fd(self):
        r = np.random.default_rng(22)
        shape = HyperlayerShape(input_dims=(4,), output_dims=(3,))
        tuples = np.stack([r.integers(0, 3, 8), r.integers(0, 4, 8)], axis=1)
        x = r.normal(size=4)
        v0 = r.normal(size=8)

        def build(v):
            y = sparse_matmul(v, tuples, shape, Tensor(x))
            return ad.tsum(ad.mul(y, y))

        analytic, _ = taped_gradients(build, [v0])
        numeric = finite_difference(lambda v: build(Tensor(v)).item(), [v0])
        assert max_relative_error(analytic, numeric) < 1e-6

    def test_out_of_bounds_tuple_rejected(self):
        shape = HyperlayerShape((3,), (3,))
        with pytest.raises(IndexError):
            sparse_matmul(Tensor(np.ones(1)), np.array([[3, 0]]), shape,
                          Tensor(np.zeros(3)))


class TestForwardLayer:
    def test_exact_identity_configuration(self):
        layer = diagonal_layer(6)
        x = rng.normal(size=6)
        y = layer.forward(x, SamplingConfig(0, 0, (2, 2)), rng)
        # mass leaks to lattice corners by at most the density ratio exp(-1/(2 tau))
        assert np.abs(y.data - x).max() < 0.15
        np.testing.assert_allclose(layer.eval_forward(x), x, atol=1e-12)

    def test_tight_variance_concentrates_mass(self):
        layer = diagonal_layer(6, tau=0.01)
        tuples = layer.sample(SamplingConfig(0, 0, (2, 2)), rng)
        mask = duplicate_mask(tuples)
        p = gaussian_proportions(layer.means(), layer.variances(), tuples)
        v_prime = distribute_values(p, mask, layer.values).data
        on_target = tuples[:, 0] == tuples[:, 1]
        assert v_prime[~on_target].max() < 1e-6

    def test_proportion_rows_sum_to_one(self):
        layer = SparseLayer(HyperlayerShape((8,), (8,)), 8, rng)
        tuples = layer.sample(SamplingConfig(2, 2, (3, 3)), rng)
        mask = duplicate_mask(tuples)
        p = gaussian_proportions(layer.means(), layer.variances(), tuples)
        masked = p.data * mask[None, :]
        norm = masked / masked.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(norm.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(norm[:, mask == 0.0] == 0.0)

    def test_eval_mode_deterministic(self):
        layer = SparseLayer(HyperlayerShape((5,), (5,)), 5, rng)
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(layer.eval_forward(x), layer.eval_forward(x))

    def test_eval_mode_sums_duplicate_rounded_tuples(self):
        layer = SparseLayer(HyperlayerShape((4,), (4,)), 2, rng)
        frac = np.clip(np.array([[1.0, 1.0], [1.2, 1.2]]) / 4.0, 0, 1)
        layer.d_raw.data = np.log(frac / (1 - frac))
        layer.values.data = np.array([2.0, 3.0])
        x = np.zeros(4)
        x[1] = 1.0
        y = layer.eval_forward(x)
        np.testing.assert_allclose(y, [0.0, 5.0, 0.0, 0.0], atol=1e-12)

    def test_full_layer_gradient_fixed_sample(self):
        shape = HyperlayerShape((5,), (5,))
        layer = SparseLayer(shape, 4, rng)
        cfg = SamplingConfig(2, 2, (3, 3))
        tuples = layer.sample(cfg, rng)
        x = rng.normal(size=5)
        base = [layer.d_raw.data.copy(), layer.sigma_raw.data.copy(), layer.values.data.copy()]

        def build(d_raw, sigma_raw, values):
            y = layer.forward_with_sample(tuples, Tensor(x), params=(d_raw, sigma_raw, values))
            return ad.mse_loss(y, Tensor(np.ones(5)))

        analytic, _ = taped_gradients(build, base)
        numeric = finite_difference(lambda *ps: build(*map(Tensor, ps)).item(), base)
        assert max_relative_error(analytic, numeric) < 1e-3

    @pytest.mark.parametrize("chunks", [2, 3, 7])
    def test_chunked_equals_unchunked(self, chunks):
        shape = HyperlayerShape((7,), (7,))
        stream = SeedStream(1234)
        layer = SparseLayer(shape, 7, stream.child("init").generator())
        tuples = layer.sample(SamplingConfig(2, 2, (3, 3)), stream.child("s").generator())
        x = stream.child("x").generator().normal(size=(3, 7))
        target = Tensor(np.flip(x, axis=1).copy())

        def loss_fn(y):
            return ad.mse_loss(y, target)

        def grads(n_chunks):
            for p in layer.parameters():
                p.zero_grad()
            loss = accumulate_gradients(layer, tuples, x, loss_fn, chunks=n_chunks)
            return loss, [p.grad.copy() for p in layer.parameters()]

        loss1, single = grads(1)
        loss2, split = grads(chunks)
        assert loss1 == pytest.approx(loss2, abf := 1e-12)
        for a, b in zip(single, split):
            np.testing.assert_allclose(a, b, atol=1e-9)
