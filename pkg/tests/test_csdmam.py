import numpy as np
import pytest

from sodkit.csdmam import (
    CsdmamParams,
    DmamParams,
    FscaParams,
    csdmam_forward,
    dmam_forward,
    fsca_forward,
    identity_1x1,
    random_csdmam,
    random_dmam,
    zero_dmam,
)
from sodkit.errors import ContractError
from sodkit.tensor import Conv2dParams, activation, gap


def _fsca(rng, c):
    return FscaParams(Conv2dParams(rng.normal(size=(c, c, 1, 1)), rng.normal(size=c)),
                      Conv2dParams(rng.normal(size=(c, c, 1, 1)), rng.normal(size=c)))


class TestFsca:
    def test_identity_attention(self, rng):
        x = rng.normal(size=(2, 3, 9, 10))
        y = fsca_forward(x, _fsca(rng, 3), attn_override=(1.0, 1.0))
        assert np.abs(y - x).max() <= 1e-8 * np.abs(x).max()

    def test_zero_input(self, rng):
        assert np.all(fsca_forward(np.zeros((1, 3, 5, 5)), _fsca(rng, 3)) == 0)

    def test_scalar_commutation(self, rng):
        x = rng.normal(size=(2, 4, 8, 8))
        a_c = rng.uniform(0.1, 1, (2, 4, 1, 1))
        a_sc = rng.uniform(0.1, 1, (2, 4, 1, 1))
        y = fsca_forward(x, _fsca(rng, 4), attn_override=(a_c, a_sc))
        np.testing.assert_allclose(y, a_c * a_sc * x, atol=1e-8, rtol=0)

    def test_attention_is_sigmoid_of_pooled(self, rng):
        p = _fsca(rng, 3)
        x = rng.normal(size=(1, 3, 6, 6))
        taps = {}
        y = fsca_forward(x, p, taps=taps)
        pooled = gap(x)
        a_c = activation(np.einsum("oc,bcij->boij", p.chan_attn_conv.weights[..., 0, 0], pooled)
                         + p.chan_attn_conv.bias[None, :, None, None], "sigmoid")
        np.testing.assert_allclose(taps["a_c"], a_c, rtol=1e-12)
        assert taps["a_c"].shape == (1, 3, 1, 1) and taps["a_sc"].shape == (1, 3, 1, 1)
        assert taps["imag_residue"] <= 1e-8 * np.abs(x).max()
        np.testing.assert_allclose(y, taps["a_c"] * taps["a_sc"] * x, atol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ContractError):
            fsca_forward(np.ones((1, 2, 4, 4)), _fsca(rng, 3))


class TestDmam:
    def test_pure_residual(self, rng):
        x = rng.normal(size=(1, 4, 9, 9))
        y = dmam_forward(x, zero_dmam(4, k=7), fsca_override=(0.0, 0.0))
        np.testing.assert_array_equal(y, x)

    def test_zero_attention_convs_still_residual(self, rng):
        # zero FSCA convs give sigmoid(0) = 0.5 attention, so this is x + 0.25 x
        x = rng.normal(size=(1, 2, 6, 6))
        y = dmam_forward(x, zero_dmam(2, k=5))
        np.testing.assert_allclose(y, 1.25 * x, atol=1e-12)

    def test_dw11_identity_doubles(self, rng):
        c = 3
        base = zero_dmam(c, k=7)
        one = Conv2dParams.same(np.ones((c, 1, 1, 1)), np.zeros(c), groups=c)
        p = DmamParams(base.proj_in, base.dw_kk, base.dw_1k, base.dw_k1, one,
                       base.fsca, base.proj_out, base.k)
        x = rng.normal(size=(2, c, 8, 8))
        np.testing.assert_array_equal(dmam_forward(x, p, fsca_override=(0.0, 0.0)), 2 * x)

    def test_branch_sum_matches_taps(self, rng):
        p = random_dmam(rng, 4, k=7)
        x = rng.normal(size=(1, 4, 12, 12))
        taps = {}
        y = dmam_forward(x, p, taps=taps)
        total = x + sum(taps[f"branch_{k}"] for k in ("dw_1k", "dw_k1", "dw_kk", "dw_11", "fsca"))
        np.testing.assert_allclose(taps["post_branch"], total, atol=1e-12)
        w = p.proj_out.weights[..., 0, 0]
        np.testing.assert_allclose(y, np.einsum("oc,bchw->bohw", w, total), atol=1e-10)

    def test_shape_k31(self, rng):
        p = random_dmam(rng, 8, k=31)
        assert dmam_forward(rng.normal(size=(2, 8, 40, 40)), p).shape == (2, 8, 40, 40)

    def test_kernel_larger_than_map(self, rng):
        p = random_dmam(rng, 2, k=31)
        assert dmam_forward(rng.normal(size=(1, 2, 10, 10)), p).shape == (1, 2, 10, 10)

    def test_non_depthwise_rejected(self):
        base = zero_dmam(2, k=3)
        dense = Conv2dParams.same(np.zeros((2, 2, 3, 3)), np.zeros(2))
        with pytest.raises(ContractError):
            DmamParams(base.proj_in, dense, base.dw_1k, base.dw_k1, base.dw_11,
                       base.fsca, base.proj_out, 3)


class TestCsdmam:
    def test_identity_configuration(self, rng):
        p = CsdmamParams(zero_dmam(4, k=7), identity_1x1(8))
        x = rng.normal(size=(2, 8, 10, 10))
        np.testing.assert_array_equal(csdmam_forward(x, p, fsca_override=(0.0, 0.0)), x)

    def test_identity_half_untouched(self, rng):
        p = random_csdmam(rng, 8, k=7)
        x = rng.normal(size=(1, 8, 12, 12))
        taps = {}
        csdmam_forward(x, p, taps=taps)
        np.testing.assert_array_equal(taps["identity_half"], x[:, 4:])
        np.testing.assert_array_equal(taps["pre_merge"][:, 4:], x[:, 4:])
        assert taps["pre_merge"][:, 4:].tobytes() == x[:, 4:].tobytes()

    def test_shape(self, rng):
        p = random_csdmam(rng, 16)
        assert csdmam_forward(rng.normal(size=(1, 16, 20, 20)), p).shape == (1, 16, 20, 20)

    def test_too_few_channels(self, rng):
        p = CsdmamParams(zero_dmam(1, k=3), identity_1x1(2))
        with pytest.raises(ContractError):
            csdmam_forward(np.ones((1, 1, 4, 4)), p)

    def test_split_mismatch(self):
        with pytest.raises(ContractError):
            CsdmamParams(zero_dmam(3, k=3), identity_1x1(8))
