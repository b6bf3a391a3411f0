import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sodkit.errors import ContractError
from sodkit.tensor import (
    BatchNormParams,
    Conv2dParams,
    activation,
    batchnorm_infer,
    concat_channels,
    conv2d,
    dft2,
    gap,
    idft2,
    load_t4,
    save_t4,
    split_channels,
)
from tests.oracles import naive_conv2d, naive_dft2_plane, scalar_batchnorm


class TestConv2d:
    def test_ones_kernel_center_and_corner(self, kernels):
        x = np.ones((1, 1, 3, 3))
        p = Conv2dParams(np.ones((1, 1, 3, 3)), None, stride=1, padding=1)
        y = conv2d(x, p, kernels)
        assert y[0, 0, 1, 1] == 9.0
        assert y[0, 0, 0, 0] == 4.0

    def test_identity_kernel(self, kernels, rng):
        x = rng.normal(size=(2, 1, 5, 4))
        y = conv2d(x, Conv2dParams(np.ones((1, 1, 1, 1))), kernels)
        np.testing.assert_array_equal(y, x)

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 3), (2, 2, 3)])
    def test_matches_naive_loop(self, kernels, rng, stride, pad, groups):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(6, 3 // groups, 3, 3))
        b = rng.normal(size=6)
        y = conv2d(x, Conv2dParams(w, b, stride=stride, padding=pad, groups=groups), kernels)
        ref = naive_conv2d(x, w, b, stride, pad, groups)
        assert y.shape == ref.shape
        np.testing.assert_allclose(y, ref, atol=1e-6, rtol=0)

    def test_depthwise_strip_same_padding(self, kernels, rng):
        x = rng.normal(size=(1, 2, 5, 6))
        w = rng.normal(size=(2, 1, 1, 7))
        p = Conv2dParams.same(w, None, groups=2)
        y = conv2d(x, p, kernels)
        assert y.shape == x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (0, 0), (3, 3)))
        ref = naive_conv2d(padded, w, None, 1, 0, 2)
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_linearity(self, kernels, rng):
        x, z = rng.normal(size=(2, 2, 3, 7, 7))
        p = Conv2dParams(rng.normal(size=(4, 3, 3, 3)), None, padding=1)
        lhs = conv2d(2.5 * x - 0.7 * z, p, kernels)
        rhs = 2.5 * conv2d(x, p, kernels) - 0.7 * conv2d(z, p, kernels)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ContractError):
            conv2d(np.ones((1, 2, 4, 4)), Conv2dParams(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ContractError):
            conv2d(np.ones((1, 1, 2, 2)), Conv2dParams(np.ones((1, 1, 3, 3))))

    def test_nonfinite_weights_rejected(self):
        w = np.ones((1, 1, 3, 3))
        w[0, 0, 0, 0] = np.nan
        with pytest.raises(ContractError):
            Conv2dParams(w)

    def test_groups_must_divide(self):
        with pytest.raises(ContractError):
            Conv2dParams(np.ones((3, 1, 3, 3)), groups=2)


class TestBatchNorm:
    def test_identity_parameters(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(batchnorm_infer(x, BatchNormParams.identity(3)), x)

    def test_affine_arithmetic(self):
        eps = 1e-5
        bn = BatchNormParams([2.0], [3.0], [0.0], [1 - eps], eps)
        assert batchnorm_infer(np.full((1, 1, 1, 1), 5.0), bn)[0, 0, 0, 0] == 13.0

    def test_matches_scalar_loop(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        g, b, m = rng.normal(size=(3, 3))
        v = rng.uniform(0.1, 2, 3)
        y = batchnorm_infer(x, BatchNormParams(g, b, m, v, 1e-3))
        np.testing.assert_allclose(y, scalar_batchnorm(x, g, b, m, v, 1e-3), atol=1e-6)

    def test_identity_twice_equals_once(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        bn = BatchNormParams.identity(2)
        np.testing.assert_array_equal(batchnorm_infer(batchnorm_infer(x, bn), bn), batchnorm_infer(x, bn))

    def test_channel_mismatch(self):
        with pytest.raises(ContractError):
            batchnorm_infer(np.ones((1, 2, 2, 2)), BatchNormParams.identity(3))

    def test_negative_variance_rejected(self):
        with pytest.raises(ContractError):
            BatchNormParams([1.0], [0.0], [0.0], [-1.0])


def test_activations():
    x = np.array([-1.0, 2.0, 0.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(activation(x, "relu").ravel(), [0.0, 2.0, 0.0])
    assert activation(np.zeros((1, 1, 1, 1)), "sigmoid")[0, 0, 0, 0] == 0.5
    assert activation(x, "identity") is x
    big = activation(np.array([-800.0, 800.0]).reshape(1, 1, 1, 2), "sigmoid")
    assert np.isfinite(big).all()
    with pytest.raises(ContractError):
        activation(x, "tanh")


class TestGap:
    def test_constant(self):
        assert np.all(gap(np.full((2, 3, 4, 5), 1.75)) == 1.75)

    def test_mean(self):
        assert gap(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))[0, 0, 0, 0] == 2.5

    def test_against_summation(self, rng):
        x = rng.normal(size=(2, 3, 5, 6))
        ref = np.array([[sum(float(v) for v in x[b, c].ravel()) / 30 for c in range(3)] for b in range(2)])
        np.testing.assert_allclose(gap(x)[..., 0, 0], ref, rtol=1e-9)


class TestDft:
    def test_constant_plane(self, kernels):
        f = dft2(np.full((1, 1, 4, 6), 2.0), kernels)
        assert abs(f[0, 0, 0, 0] - 48.0) < 1e-12
        f[0, 0, 0, 0] = 0
        assert np.abs(f).max() < 1e-12

    def test_hermitian(self, kernels, rng):
        x = rng.normal(size=(1, 2, 6, 5))
        f = dft2(x, kernels)
        H, W = 6, 5
        u, v = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        mirrored = np.conj(f[..., (H - u) % H, (W - v) % W])
        assert np.abs(f - mirrored).max() <= 1e-9

    def test_against_naive(self, kernels, rng):
        p = rng.normal(size=(8, 8))
        f = dft2(p[None, None], kernels)[0, 0]
        np.testing.assert_allclose(f, naive_dft2_plane(p), atol=1e-8, rtol=0)

    def test_inverse_against_naive(self, kernels, rng):
        spec = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
        back = idft2(spec[None, None], kernels)[0, 0]
        np.testing.assert_allclose(back, naive_dft2_plane(spec, inverse=True), atol=1e-8, rtol=0)

    def test_round_trip(self, kernels, rng):
        x = rng.normal(size=(2, 3, 7, 9))
        back = idft2(dft2(x, kernels), kernels)
        scale = np.abs(x).max()
        assert np.abs(back.imag).max() <= 1e-8 * scale
        assert np.abs(back.real - x).max() <= 1e-8 * scale

    def test_zero_spectrum(self, kernels):
        assert np.all(idft2(np.zeros((1, 1, 4, 4), complex), kernels) == 0)

    def test_parseval(self, kernels, rng):
        x = rng.normal(size=(1, 2, 8, 12))
        f = dft2(x, kernels)
        lhs = np.sum(x ** 2)
        rhs = np.sum(np.abs(f) ** 2) / (8 * 12)
        assert abs(lhs - rhs) / lhs <= 1e-6

    def test_backends_agree_with_fft(self, kernels, rng):
        x = rng.normal(size=(1, 1, 10, 6))
        np.testing.assert_allclose(dft2(x, kernels), np.fft.fft2(x), atol=1e-10)


class TestConcatSplit:
    def test_round_trip(self, rng):
        parts = [rng.normal(size=(2, c, 3, 3)) for c in (1, 4, 2)]
        back = split_channels(concat_channels(parts), [1, 4, 2])
        for a, b in zip(parts, back):
            np.testing.assert_array_equal(a, b)

    def test_single(self, rng):
        x = rng.normal(size=(1, 3, 2, 2))
        np.testing.assert_array_equal(concat_channels([x]), x)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(1, 3))
    def test_index_map(self, sizes, b):
        rng = np.random.default_rng(sum(sizes))
        parts = [rng.normal(size=(b, c, 2, 3)) for c in sizes]
        cat = concat_channels(parts)
        offsets = np.cumsum([0] + sizes)
        for ch in range(cat.shape[1]):
            idx = int(np.searchsorted(offsets, ch, side="right") - 1)
            np.testing.assert_array_equal(cat[:, ch], parts[idx][:, ch - offsets[idx]])

    def test_mismatch(self):
        with pytest.raises(ContractError):
            concat_channels([np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 2))])
        with pytest.raises(ContractError):
            split_channels(np.ones((1, 3, 2, 2)), [1, 1])


def test_t4_round_trip(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4, 5))
    save_t4(tmp_path / "a.t4", x)
    raw = (tmp_path / "a.t4").read_bytes()
    assert raw[:8] == (2).to_bytes(8, "little")
    assert len(raw) == 32 + 8 * x.size
    np.testing.assert_array_equal(load_t4(tmp_path / "a.t4"), x)


def test_t4_truncated(tmp_path):
    (tmp_path / "bad.t4").write_bytes(b"\x01" * 40)
    with pytest.raises(ContractError):
        load_t4(tmp_path / "bad.t4")


def test_rank_and_finiteness_checked():
    with pytest.raises(ContractError):
        gap(np.ones((2, 2, 2)))
    with pytest.raises(ContractError):
        gap(np.full((1, 1, 2, 2), np.inf))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))
def test_finiteness_preserved(b, c, h, w):
    x = np.random.default_rng(b * 100 + c * 10 + h + w).normal(size=(b, c, h, w)) * 1e3
    p = Conv2dParams(np.ones((2, c, 3, 3)), np.ones(2), padding=1)
    for y in (conv2d(x, p), activation(x, "sigmoid"), gap(x), dft2(x)):
        assert np.isfinite(y).all()
