"""Unit and property tests for the autodiff tensor core."""

import math

import numpy as np
import pytest

from routerank import tensor as T


@pytest.fixture
def f64():
    """Run a test in float64 mode for crisp finite differences."""
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)


def leaf(arr, rg=True):
    return T.Tensor(np.asarray(arr), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = leaf([[1.0, 0.0], [0.0, 1.0]])
        b = leaf([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(a, b)
        np.testing.assert_allclose(out.data, [[5, 6], [7, 8]])

    def test_inner_product(self):
        out = T.matmul(leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_triple_loop_oracle(self, f64):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(leaf(a), leaf(b)).data, expect, atol=1e-6)

    def test_batched(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(2, 2, 3, 4))
        b = rng.normal(size=(4, 5))
        out = T.matmul(leaf(a), leaf(b))
        assert out.shape == (2, 2, 3, 5)
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-5)

    def test_shape_error_names_both(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 2))))
        with pytest.raises(T.ShapeError):
            T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((3, 2, 2))))


class TestConcatGather:
    def test_simple(self):
        out = T.concat_last([leaf([[1.0]]), leaf([[2.0]])])
        np.testing.assert_allclose(out.data, [[1.0, 2.0]])

    def test_shape_law_and_recovery(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 4, 3))
        b = rng.normal(size=(4, 4, 5))
        out = T.concat_last([leaf(a), leaf(b)])
        assert out.shape == (4, 4, 8)
        sliced = T.gather_last(out, list(range(3)))
        np.testing.assert_allclose(sliced.data, a, rtol=1e-6)

    def test_leading_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat_last([leaf(np.ones((2, 3))), leaf(np.ones((3, 3)))])

    def test_gather_out_of_range(self):
        with pytest.raises(T.ShapeError):
            T.gather_last(leaf(np.ones((2, 3))), [0, 3])

    def test_gather_grad_scatters(self, f64):
        x = leaf(np.arange(6.0).reshape(2, 3))
        out = T.sum_all(T.gather_last(x, [2, 0, 2]))
        out.backward()
        np.testing.assert_allclose(x.grad, [[1, 0, 2], [1, 0, 2]])


class TestTileAndTranspose:
    def test_tile_definition(self):
        out = T.tile_rows(leaf([[1.0], [2.0]]))
        np.testing.assert_allclose(out.data, [[[1], [1]], [[2], [2]]])

    def test_tile_single_row(self):
        out = T.tile_rows(leaf([[3.0, 4.0]]))
        assert out.shape == (1, 1, 2)

    def test_tile_index_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        out = T.tile_rows(leaf(x)).data
        for i, j in rng.integers(0, 5, size=(10, 2)):
            np.testing.assert_allclose(out[i, j], x[i], rtol=1e-6)

    def test_tile_wrong_rank(self):
        with pytest.raises(T.ShapeError):
            T.tile_rows(leaf(np.ones((2, 2, 2))))

    def test_pair_transpose_involution_and_diagonal(self):
        rng = np.random.default_rng(3)
        x = leaf(rng.normal(size=(4, 4, 3)))
        once = T.pair_transpose(x)
        twice = T.pair_transpose(once)
        np.testing.assert_array_equal(twice.data, x.data)
        for i in range(4):
            np.testing.assert_array_equal(once.data[i, i], x.data[i, i])

    def test_pair_transpose_index_oracle(self):
        rng = np.random.default_rng(4)
        x = leaf(rng.normal(size=(3, 3, 2)))
        out = T.pair_transpose(x).data
        for i in range(3):
            for j in range(3):
                np.testing.assert_array_equal(out[i, j], x.data[j, i])

    def test_pair_transpose_requires_square(self):
        with pytest.raises(T.ShapeError):
            T.pair_transpose(leaf(np.ones((2, 3, 4))))


class TestActivationsAndReductions:
    def test_softmax_uniform(self):
        out = T.softmax_last(leaf([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_softmax_rows_sum_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 7)) * 50
        out = T.softmax_last(leaf(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-6)
        assert (out >= 0).all()

    def test_sigmoid_zero(self):
        assert T.sigmoid(leaf([0.0])).data[0] == pytest.approx(0.5)

    def test_sum_pool(self):
        out = T.sum_pool(leaf(np.ones((2, 3, 1))), axis=1)
        np.testing.assert_allclose(out.data, [[3.0], [3.0]])

    def test_reshape_preserves_order_and_roundtrips(self):
        x = np.arange(12.0).reshape(3, 4)
        out = T.reshape(T.reshape(leaf(x), (2, 6)), (3, 4))
        np.testing.assert_array_equal(out.data, x)

    def test_reshape_count_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.reshape(leaf(np.ones((2, 3))), (4, 2))

    def test_no_nan_inf_from_extreme_inputs(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            x = rng.uniform(-1e3, 1e3, size=(3, 4)).astype(np.float32)
            checks = [
                T.sigmoid(leaf(x)).data,
                T.softmax_last(leaf(x)).data,
                T.relu(leaf(x)).data,
                T.matmul(leaf(x), leaf(rng.uniform(-1e3, 1e3, size=(4, 2)))).data,
                T.batch_norm(leaf(x), leaf(np.ones(4)), leaf(np.zeros(4)),
                             T.BatchNormState.create(4), "train").data,
            ]
            for arr in checks:
                assert np.isfinite(arr).all()


class TestCrossEntropy:
    def test_confident_correct(self):
        p = leaf([0.0, 1.0, 0.0])
        assert float(T.cross_entropy(p, np.array([0.0, 1.0, 0.0])).data) <= 1e-6

    def test_uniform_four_classes(self):
        p = leaf([0.25] * 4)
        y = np.array([0.0, 1.0, 0.0, 0.0])
        assert float(T.cross_entropy(p, y).data) == pytest.approx(math.log(4), rel=1e-5)

    def test_hand_formula(self, f64):
        rng = np.random.default_rng(9)
        p = rng.dirichlet([1, 1, 1])
        y = np.array([0.0, 1.0, 0.0])
        expect = -(y * np.log(np.maximum(p, 1e-7))).sum()
        assert float(T.cross_entropy(leaf(p), y).data) == pytest.approx(expect)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.cross_entropy(leaf([0.5, 0.5]), np.array([1.0, 0.0, 0.0]))


class TestBatchNorm:
    def test_constant_column_zeroes(self):
        x = leaf(np.full((8, 3), 2.5))
        out = T.batch_norm(x, leaf(np.ones(3)), leaf(np.zeros(3)),
                           T.BatchNormState.create(3), "train")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_train_mode_standardizes(self):
        rng = np.random.default_rng(10)
        x = leaf(rng.normal(3.0, 2.0, size=(4, 4, 5)))
        out = T.batch_norm(x, leaf(np.ones(5)), leaf(np.zeros(5)),
                           T.BatchNormState.create(5), "train").data.reshape(-1, 5)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-3)

    def test_running_stats_track_batches(self):
        rng = np.random.default_rng(11)
        state = T.BatchNormState.create(2)
        gamma, beta = leaf(np.ones(2)), leaf(np.zeros(2))
        for _ in range(200):
            x = leaf(rng.normal(5.0, 1.0, size=(32, 2)))
            T.batch_norm(x, gamma, beta, state, "train")
        assert state.updates == 200
        np.testing.assert_allclose(state.mean, 5.0, atol=0.2)

    def test_eval_before_train_warns(self, caplog):
        state = T.BatchNormState.create(2)
        with caplog.at_level("WARNING"):
            T.batch_norm(leaf(np.ones((3, 2))), leaf(np.ones(2)), leaf(np.zeros(2)),
                         state, "eval")
        assert any("initialized stats" in r.message for r in caplog.records)

    def test_gradient_matches_finite_differences(self, f64):
        rng = np.random.default_rng(12)
        x = leaf(rng.normal(size=(6, 3)))
        gamma = leaf(rng.uniform(0.5, 1.5, size=3))
        beta = leaf(rng.normal(size=3))
        state = T.BatchNormState.create(3)
        weights = rng.normal(size=(6, 3))

        def f():
            out = T.batch_norm(x, gamma, beta, state, "train")
            return T.sum_all(T.mul(out, weights))

        report = T.grad_check(f, [x, gamma, beta], eps=1e-4, tol=1e-4)
        assert report.passed, report


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_two_x(self):
        x = leaf(np.arange(1.0, 5.0))
        T.sum_all(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            leaf(np.ones((2, 2))).backward()

    def test_backward_twice_rejected(self):
        x = leaf(np.ones(3))
        out = T.sum_all(x)
        out.backward()
        with pytest.raises(RuntimeError):
            out.backward()

    def test_grad_accumulates_across_uses(self):
        x = leaf(np.array([2.0]))
        out = T.add(T.mul(x, x), x)  # x^2 + x -> grad 2x + 1 = 5
        T.sum_all(out).backward()
        assert x.grad[0] == pytest.approx(5.0)

    def test_composite_pair_graph_matches_finite_differences(self, f64):
        """Pair-lift -> dense -> softmax -> cross-entropy, end to end."""
        rng = np.random.default_rng(13)
        x = leaf(rng.normal(size=(3, 2)))
        w1 = leaf(rng.normal(size=(4, 5)) * 0.5)
        w2 = leaf(rng.normal(size=(5, 1)) * 0.5)
        y = np.zeros(3)
        y[1] = 1.0

        def f():
            tiled = T.tile_rows(x)
            c = T.concat_last([tiled, T.pair_transpose(tiled)])  # [3,3,4]
            h = T.relu(T.matmul(c, w1))
            o = T.matmul(h, w2)  # [3,3,1]
            pooled = T.sum_pool(o, axis=1)  # [3,1]
            probs = T.softmax_last(T.reshape(pooled, (1, 3)))
            return T.cross_entropy(T.reshape(probs, (3,)), y)

        report = T.grad_check(f, [x, w1, w2], eps=1e-3, tol=1e-4)
        assert report.passed, report


class TestGradCheckOnAllPrimitives:
    """Analytic vs central-difference gradients on random shapes, f64."""

    CASES = 20

    def test_every_primitive(self, f64):
        rng = np.random.default_rng(14)
        worst = 0.0
        for case in range(self.CASES):
            n = int(rng.integers(2, 5))
            f = int(rng.integers(1, 4))
            x = leaf(rng.normal(size=(n, f)))
            sq = leaf(rng.normal(size=(n, n, f)))
            w = leaf(rng.normal(size=(f, 3)))
            gamma = leaf(rng.uniform(0.5, 1.5, size=f))
            beta = leaf(rng.normal(size=f))
            rvec = rng.normal(size=(n, 3))
            rsq = rng.normal(size=(n, n, 2 * f))
            probe = rng.normal(size=(n, n, f))
            pool_probe = rng.normal(size=(n, f))
            flat_probe = rng.normal(size=(n * n, f))
            mix_probe = rng.normal(size=(2, 2))
            banks = leaf(rng.normal(size=(n * f, 2, 2)))
            soft_y = rng.dirichlet(np.ones(n))

            cases = {
                "matmul": lambda: T.sum_all(T.mul(T.matmul(x, w), rvec)),
                "add_sub_mul": lambda: T.sum_all(
                    T.mul(T.sub(T.add(sq, sq), T.mul(sq, 0.3)), probe)),
                "tile_concat": lambda: T.sum_all(T.mul(T.concat_last(
                    [T.tile_rows(x), T.pair_transpose(T.tile_rows(x))]), rsq)),
                "gather": lambda: T.sum_all(T.gather_last(sq, [0, f - 1])),
                "relu": lambda: T.sum_all(T.relu(sq)),
                "sigmoid": lambda: T.sum_all(T.mul(T.sigmoid(sq), probe)),
                "softmax": lambda: T.sum_all(T.mul(T.softmax_last(sq), probe)),
                "sum_pool": lambda: T.sum_all(T.mul(T.sum_pool(sq, axis=1), pool_probe)),
                "reshape": lambda: T.sum_all(T.mul(T.reshape(sq, (n * n, f)), flat_probe)),
                "bank_mix": lambda: T.sum_all(T.mul(
                    T.bank_mix(T.reshape(T.softmax_last(T.reshape(x, (1, n * f))), (n * f,)),
                               banks),
                    mix_probe)),
                "cross_entropy": lambda: T.cross_entropy(
                    T.reshape(T.softmax_last(T.reshape(T.matmul(x, w), (1, n * 3))), (n * 3,)),
                    np.repeat(soft_y, 3) / 3.0),
            }
            for name, fn in cases.items():
                report = T.grad_check(fn, [x, sq, w, gamma, beta], eps=1e-3, tol=1e-4)
                worst = max(worst, report.max_rel_error)
                assert report.passed, f"{name} case {case}: {report}"
        assert worst < 1e-4


class TestGradCheckReports:
    def test_linear_is_near_exact(self, f64):
        x = leaf(np.arange(1.0, 7.0).reshape(2, 3))
        report = T.grad_check(lambda: T.sum_all(T.mul(x, 3.0)), [x])
        assert report.max_rel_error < 1e-8

    def test_sigmoid_chain(self, f64):
        rng = np.random.default_rng(15)
        x = leaf(rng.normal(size=(4, 3)))
        report = T.grad_check(lambda: T.sum_all(T.sigmoid(T.sigmoid(x))), [x])
        assert report.max_rel_error < 1e-4
