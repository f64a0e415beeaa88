import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emstop.core import DomainError, RngStream
from emstop.operators import (
    ConvolutionOperator,
    DenseOperator,
    Psf,
    convolution_operator,
    count_noise_psf,
    dense_operator,
    gaussian_psf,
)


def random_psf(gen, shape=(8, 8)):
    return Psf.from_image(gen.random(shape))


def dense_convolution(psf, shape):
    """Periodic convolution matrix written out from the definition."""
    rows, cols = shape
    cy, cx = psf.center
    mat = np.zeros((rows * cols, rows * cols))
    for i in range(rows):
        for j in range(cols):
            for p in range(psf.shape[0]):
                for q in range(psf.shape[1]):
                    src = ((i - (p - cy)) % rows) * cols + (j - (q - cx)) % cols
                    mat[i * cols + j, src] += psf.values[p, q]
    return mat


class TestPsf:
    def test_gaussian_unit_sum_256(self):
        psf = gaussian_psf((256, 256), 3.0)
        assert abs(psf.values.sum() - 1) <= 1e-12
        assert psf.center == (128, 128)

    def test_narrow_gaussian_is_a_spike(self):
        psf = gaussian_psf((9, 9), 0.1)
        assert psf.values[4, 4] > 0.99

    def test_gaussian_symmetry(self):
        psf = gaussian_psf((33, 33), 3.0)
        c = 16
        v = psf.values
        for i, j in [(1, 2), (3, 0), (5, 7)]:
            assert v[c + i, c + j] == v[c - i, c + j] == v[c + i, c - j] == v[c + j, c + i]

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_gaussian_bad_sigma(self, sigma):
        with pytest.raises(DomainError):
            gaussian_psf((8, 8), sigma)

    def test_psf_validation(self):
        with pytest.raises(DomainError):
            Psf(np.full((2, 2), 0.3), (1, 1))
        with pytest.raises(DomainError):
            Psf(np.array([[1.5, -0.5]]), (0, 0))
        with pytest.raises(DomainError):
            Psf.from_image(np.zeros((3, 3)))

    def test_count_noise_psf(self):
        base = gaussian_psf((64, 64), 3.0)
        noisy = count_noise_psf(base, 1e4, RngStream(1))
        assert abs(noisy.values.sum() - 1) <= 1e-12
        assert np.all(noisy.values >= 0)
        assert not np.allclose(noisy.values, base.values)
        assert noisy.center == base.center

    def test_count_noise_shrinks_with_scale(self):
        base = gaussian_psf((32, 32), 3.0)
        peak = np.unravel_index(np.argmax(base.values), base.shape)

        def spread(scale):
            devs = [
                count_noise_psf(base, scale, RngStream(s)).values[peak] / base.values[peak] - 1
                for s in range(200)
            ]
            return np.std(devs)

        ratio = spread(1e4) / spread(1e6)
        # scale^(-1/2) predicts a factor of 10
        assert 7 < ratio < 14

    def test_count_noise_redraws_zero(self):
        psf = count_noise_psf(gaussian_psf((3, 3), 1.0), 1e-3, RngStream(2))
        assert abs(psf.values.sum() - 1) <= 1e-12

    def test_count_noise_bad_scale(self):
        with pytest.raises(DomainError):
            count_noise_psf(gaussian_psf((3, 3), 1.0), 0.0, RngStream(0))


class TestConvolution:
    def test_delta_is_identity(self):
        spike = np.zeros((5, 5))
        spike[2, 2] = 1
        op = convolution_operator(Psf(spike, (2, 2)), (12, 10))
        x = np.random.default_rng(0).random((12, 10))
        assert np.max(np.abs(op.apply(x) - x)) <= 1e-12
        assert np.max(np.abs(op.apply_adjoint(x) - x)) <= 1e-12

    def test_constant_image_preserved(self):
        gen = np.random.default_rng(1)
        op = convolution_operator(random_psf(gen, (5, 7)), (16, 16))
        assert np.max(np.abs(op.apply(np.full((16, 16), 3.5)) - 3.5)) <= 1e-10

    def test_matches_definition_oracle(self):
        gen = np.random.default_rng(2)
        for _ in range(10):
            psf = random_psf(gen, (8, 8))
            op = convolution_operator(psf, (8, 8))
            mat = dense_convolution(psf, (8, 8))
            x = gen.random((8, 8))
            hx = op.apply(x)
            assert np.linalg.norm(hx.ravel() - mat @ x.ravel()) <= 1e-10 * np.linalg.norm(hx)
            assert np.allclose(op.to_dense(), mat, rtol=0, atol=1e-14)

    def test_small_psf_on_large_grid(self):
        gen = np.random.default_rng(3)
        psf = random_psf(gen, (3, 5))
        op = convolution_operator(psf, (6, 7))
        x = gen.random((6, 7))
        assert np.allclose(op.apply(x).ravel(), dense_convolution(psf, (6, 7)) @ x.ravel(), atol=1e-13)

    def test_adjoint_pairs(self):
        gen = np.random.default_rng(4)
        op = convolution_operator(random_psf(gen), (8, 8))
        for _ in range(100):
            x, y = gen.standard_normal((8, 8)), gen.standard_normal((8, 8))
            lhs, rhs = np.vdot(op.apply(x), y), np.vdot(x, op.apply_adjoint(y))
            assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1e-300) + 1e-14

    def test_column_sums_and_flux(self, conv16):
        assert np.allclose(conv16.column_sums, 1.0, atol=1e-12)
        x = np.random.default_rng(5).random((16, 16))
        assert abs(conv16.apply(x).sum() - x.sum()) <= 1e-10 * x.sum()

    def test_batched_apply(self, conv16):
        x = np.random.default_rng(6).random((3, 16, 16))
        out = conv16.apply(x)
        for i in range(3):
            assert np.allclose(out[i], conv16.apply(x[i]), atol=1e-14)

    def test_dimension_errors(self, conv16):
        with pytest.raises(DomainError):
            conv16.apply(np.ones((8, 8)))
        with pytest.raises(DomainError):
            ConvolutionOperator(gaussian_psf((9, 9), 1.0), (8, 8))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
    def test_linear_and_positive(self, seed, a, b):
        gen = np.random.default_rng(seed)
        op = convolution_operator(random_psf(gen, (4, 4)), (8, 8))
        x, y = gen.random((8, 8)), gen.random((8, 8))
        lhs = op.apply(a * x + b * y)
        rhs = a * op.apply(x) + b * op.apply(y)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * (np.linalg.norm(rhs) + np.linalg.norm(a * x) + np.linalg.norm(b * y)) + 1e-15
        assert np.all(op.apply(x) >= -1e-15)


class TestDense:
    def test_identity(self):
        op = dense_operator(np.eye(4))
        x = np.arange(1.0, 5.0)
        assert np.array_equal(op.apply(x), x)

    def test_hand_product(self):
        op = dense_operator([[0.5, 0.5], [0.5, 0.5]])
        assert np.array_equal(op.apply([1.0, 1.0]), [1.0, 1.0])

    def test_adjoint_is_transpose(self):
        gen = np.random.default_rng(7)
        mat = gen.random((5, 7))
        op = dense_operator(mat)
        y = gen.random(5)
        assert np.max(np.abs(op.apply_adjoint(y) - mat.T @ y)) <= 1e-14
        assert op.input_shape == (7,) and op.output_shape == (5,)
        assert np.allclose(op.column_sums, mat.sum(axis=0))

    def test_adjoint_pairs(self, dense10):
        gen = np.random.default_rng(8)
        for _ in range(100):
            x, y = gen.standard_normal(10), gen.standard_normal(10)
            lhs, rhs = np.vdot(dense10.apply(x), y), np.vdot(x, dense10.apply_adjoint(y))
            assert abs(lhs - rhs) <= 1e-10 * abs(lhs) + 1e-14

    def test_errors(self):
        with pytest.raises(DomainError):
            DenseOperator([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DomainError):
            DenseOperator([[1.0, -0.1]])
        with pytest.raises(DomainError):
            DenseOperator(np.ones((4, 4)), input_shape=(3, 3))

    def test_strict_positivity(self):
        mat = np.eye(3) + 0.0
        dense_operator(mat)
        with pytest.raises(DomainError):
            dense_operator(mat, strict=True)
        dense_operator(mat + 0.1, strict=True)

    def test_image_shapes(self):
        op = dense_operator(np.eye(6), (2, 3), (3, 2))
        out = op.apply(np.arange(6.0).reshape(2, 3))
        assert out.shape == (3, 2)
        assert np.array_equal(out.ravel(), np.arange(6.0))
