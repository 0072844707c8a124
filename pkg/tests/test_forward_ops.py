import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emdiff.forward_ops import (BlurOp, IdentityOp, MaskOp, batch_operators, corrupt, data_loss,
                                gaussian_kernel, make_blur_op, make_mask_op, operator_from_dict)
from emdiff.tensor import Tensor


def operators():
    return {
        "identity": IdentityOp(64),
        "mask": make_mask_op((8, 8), 0.6, seed=0),
        "blur": make_blur_op((8, 8), 5, 1.0),
    }


def dot_test_errors(op, n, rng, dtype=np.float64, scaled=False):
    """Relative mismatch of <Ax, y> and <x, A^T y>.

    ``scaled`` divides by ``|Ax| |y|`` instead of the dot product itself,
    which stays meaningful when the product is near zero.
    """
    errs = []
    for _ in range(n):
        x = rng.standard_normal(op.in_dim).astype(dtype)
        y = rng.standard_normal(op.out_dim).astype(dtype)
        ax = op.apply(x).astype(np.float64)
        lhs = float(np.dot(ax, y.astype(np.float64)))
        rhs = float(np.dot(x.astype(np.float64), op.adjoint(y).astype(np.float64)))
        denom = np.linalg.norm(ax) * np.linalg.norm(y) if scaled else max(abs(lhs), abs(rhs))
        errs.append(abs(lhs - rhs) / max(denom, 1e-12))
    return np.array(errs)


class TestExamples:
    def test_identity(self):
        op = IdentityOp(3)
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(op.apply(x), x)
        np.testing.assert_array_equal(op.adjoint(x), x)

    def test_mask_selection_and_scatter(self):
        op = MaskOp(4, [0, 2])
        np.testing.assert_array_equal(op.apply(np.array([1.0, 2.0, 3.0, 4.0])), [1.0, 3.0])
        np.testing.assert_array_equal(op.adjoint(np.array([1.0, 3.0])), [1.0, 0.0, 3.0, 0.0])

    def test_mask_shape_errors(self):
        op = MaskOp(4, [0, 2])
        with pytest.raises(ValueError):
            op.apply(np.zeros(3))
        with pytest.raises(ValueError):
            op.adjoint(np.zeros(3))
        with pytest.raises(ValueError):
            MaskOp(4, [0, 4])
        with pytest.raises(ValueError):
            MaskOp(4, [1, 1])

    def test_blur_adjoint_is_flipped_correlation(self):
        rng = np.random.default_rng(0)
        kern = rng.random((3, 3))
        kern /= kern.sum()
        op = BlurOp((6, 6), kern)
        y = rng.standard_normal(36)
        flipped = BlurOp((6, 6), kern[::-1, ::-1])
        np.testing.assert_allclose(op.adjoint(y), flipped.apply(y), atol=1e-12)
        np.testing.assert_allclose(op.matrix().T, flipped.matrix(), atol=1e-12)

    def test_blur_constant_input(self):
        op = make_blur_op((8, 8), 9, 2.0)
        np.testing.assert_allclose(op.apply(np.full(64, 0.7)), 0.7, atol=1e-12)
        np.testing.assert_allclose(op.apply(np.full(64, 0.7, np.float32)), 0.7, atol=1e-6)

    def test_blur_impulse_gives_kernel(self):
        op = make_blur_op((15, 15), 9, 2.0)
        img = np.zeros((15, 15))
        img[7, 7] = 1.0
        out = op.apply(img.ravel()).reshape(15, 15)
        ax = np.arange(-4, 5)
        g = np.exp(-(ax[:, None] ** 2 + ax[None] ** 2) / 8.0)
        np.testing.assert_allclose(out[3:12, 3:12], g / g.sum(), atol=1e-12)
        assert out[7, 7] == pytest.approx(1.0 / g.sum(), rel=1e-12)

    def test_blur_size_one_is_identity(self):
        op = make_blur_op((4, 4), 1, 1.0)
        x = np.arange(16.0)
        np.testing.assert_allclose(op.apply(x), x)

    def test_blur_rejects_even_size(self):
        with pytest.raises(ValueError):
            make_blur_op((8, 8), 4, 1.0)
        with pytest.raises(ValueError):
            gaussian_kernel(5, 0.0)

    def test_dict_roundtrip(self):
        for op in operators().values():
            again = operator_from_dict(op.to_dict())
            np.testing.assert_array_equal(again.matrix(), op.matrix())


class TestMakeMask:
    def test_kept_fraction(self):
        op = make_mask_op((100, 100), 0.6, seed=3)
        assert op.out_dim / op.in_dim == pytest.approx(0.4, abs=0.02)

    def test_zero_mask_prob_keeps_everything(self):
        op = make_mask_op((4, 4), 0.0, seed=0)
        np.testing.assert_array_equal(op.keep, np.arange(16))

    def test_deterministic(self):
        a = make_mask_op((8, 8), 0.6, seed=11, stream=5)
        b = make_mask_op((8, 8), 0.6, seed=11, stream=5)
        np.testing.assert_array_equal(a.bitmap, b.bitmap)
        c = make_mask_op((8, 8), 0.6, seed=11, stream=6)
        assert not np.array_equal(a.bitmap, c.bitmap)

    def test_all_masked_draw_is_redrawn(self):
        found = False
        for stream in range(200):
            op = make_mask_op((2,), 0.9, seed=0, stream=stream)
            assert op.out_dim >= 1
            found |= op.meta["resamples"] > 0
        assert found

    def test_invalid_prob(self):
        with pytest.raises(ValueError):
            make_mask_op((4,), 1.0, seed=0)


class TestAdjointDotProduct:
    @pytest.mark.parametrize("name", ["identity", "mask", "blur"])
    def test_hundred_pairs(self, name):
        errs = dot_test_errors(operators()[name], 100, np.random.default_rng(7))
        assert errs.max() < 1e-5

    @pytest.mark.parametrize("name", ["identity", "mask", "blur"])
    def test_hundred_pairs_float32(self, name):
        errs = dot_test_errors(operators()[name], 100, np.random.default_rng(8), np.float32, scaled=True)
        assert errs.max() < 1e-5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3),
       name=st.sampled_from(["identity", "mask", "blur"]))
def test_linearity(seed, a, b, name):
    op = operators()[name]
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, op.in_dim))
    np.testing.assert_allclose(op.apply(a * x + b * y), a * op.apply(x) + b * op.apply(y), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.floats(0.0, 0.95))
def test_mask_idempotence(seed, p):
    op = make_mask_op((6, 6), p, seed=seed)
    x = np.random.default_rng(seed).standard_normal(36)
    once = op.apply(x)
    np.testing.assert_array_equal(op.apply(op.adjoint(once)), once)


@settings(max_examples=20, deadline=None)
@given(k=st.sampled_from([1, 3, 5, 7, 9]), s=st.floats(0.3, 4.0))
def test_blur_dc_gain(k, s):
    assert abs(gaussian_kernel(k, s).sum() - 1.0) < 1e-7


class TestCorrupt:
    def test_noiseless(self):
        op = make_mask_op((8, 8), 0.6, seed=0)
        x = np.random.default_rng(0).random(64)
        np.testing.assert_array_equal(corrupt(x, op, 0.0, np.random.default_rng(1)), op.apply(x))

    def test_noise_std(self):
        op = IdentityOp(10)
        x = np.random.default_rng(0).random((10_000, 10))
        y = corrupt(x, op, 0.2, np.random.default_rng(1))
        assert np.std(y - x) == pytest.approx(0.2, rel=0.02)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            corrupt(np.zeros(3), IdentityOp(3), -0.1, np.random.default_rng(0))


class TestDataLoss:
    def test_consistent_is_zero(self):
        op = make_blur_op((4, 4), 3, 1.0)
        x = np.random.default_rng(0).random(16)
        assert data_loss(op.apply(x), x, op) == 0.0

    def test_unit_example(self):
        assert data_loss(np.array([1.0, 0.0]), np.zeros(2), IdentityOp(2)) == 1.0

    def test_naive_summation(self):
        rng = np.random.default_rng(4)
        op = make_mask_op((5, 5), 0.5, seed=2)
        x = rng.standard_normal(25)
        y = rng.standard_normal(op.out_dim)
        ax = op.apply(x)
        naive = 0.0
        for i in range(op.out_dim):
            naive += (y[i] - ax[i]) ** 2
        assert data_loss(y, x, op) == pytest.approx(naive, rel=1e-12)

    def test_batched_rows(self):
        op = IdentityOp(2)
        out = data_loss(np.array([[1.0, 0.0], [0.0, 2.0]]), np.zeros((2, 2)), op)
        np.testing.assert_allclose(out, [1.0, 4.0])


class TestOperatorBatch:
    def test_distinct_masks_residuals_match_per_item(self):
        rng = np.random.default_rng(0)
        ops = [make_mask_op((4, 4), 0.5, seed=1, stream=i) for i in range(5)]
        xs = rng.standard_normal((5, 16))
        ys = [corrupt(xs[i], ops[i], 0.1, rng) for i in range(5)]
        batch = batch_operators(ops, ys)
        est = rng.standard_normal((5, 16)).astype(np.float32)
        per_item = [data_loss(ys[i], est[i], ops[i]) for i in range(5)]
        np.testing.assert_allclose(batch.residual_norms(est), per_item, rtol=1e-5)
        sub = batch.subset([3, 1])
        np.testing.assert_allclose(sub.residual_norms(est[[3, 1]]), [per_item[3], per_item[1]], rtol=1e-5)

    def test_shared_operator_tensor_vjp(self):
        op = make_blur_op((4, 4), 3, 1.0)
        rng = np.random.default_rng(1)
        batch = batch_operators([op] * 3, list(rng.standard_normal((3, 16))))
        x = Tensor(rng.standard_normal((3, 16)), requires_grad=True, dtype=np.float64)
        out = batch.apply_tensor(x)
        w = rng.standard_normal((3, 16))
        (out * Tensor(w, dtype=np.float64)).sum().backward()
        np.testing.assert_allclose(x.grad, op.adjoint(w), atol=1e-12)

    def test_rejects_mismatch(self):
        with pytest.raises(ValueError):
            batch_operators([IdentityOp(2)], [])
        with pytest.raises(ValueError):
            batch_operators([IdentityOp(2), make_blur_op((2, 2), 1, 1.0)],
                            [np.zeros(2), np.zeros(4)])
