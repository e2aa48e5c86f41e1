import numpy as np
import pytest

from flowvos import autodiff as ad
from flowvos.autodiff import Tape, Tensor
from flowvos.backbone import (FeatureExtractorParams, LabelEncoderParams,
                              encode_label, encode_mask, extract, he_conv)


@pytest.fixture
def params(rng):
    return FeatureExtractorParams.init(rng)


class TestExtract:
    def test_level3_shape_64(self, params, rng):
        pyr = extract(Tensor(rng.random((3, 64, 64))), params)
        assert pyr[3].shape == (64, 8, 8)

    def test_pyramid_shape_law(self, params, rng):
        for hw in (32, 64, 96):
            pyr = extract(Tensor(rng.random((3, hw, hw))), params)
            for k, c in zip((1, 2, 3, 4), (16, 32, 64, 64)):
                assert pyr[k].shape == (c, hw // 2 ** k, hw // 2 ** k)

    def test_deterministic(self, params, rng):
        x = rng.random((3, 32, 32))
        a = extract(Tensor(x), params)
        b = extract(Tensor(x), params)
        for k in range(1, 5):
            assert np.array_equal(a[k].data, b[k].data)

    def test_zero_input_zero_biases_gives_zero_pyramid(self, params):
        pyr = extract(Tensor(np.zeros((3, 32, 32))), params)
        for k in range(1, 5):
            np.testing.assert_array_equal(pyr[k].data, 0.0)

    def test_wrong_channel_count(self, params, rng):
        with pytest.raises(ValueError, match="3-channel"):
            extract(Tensor(rng.random((2, 32, 32))), params)

    def test_indivisible_size_rejected(self, params, rng):
        with pytest.raises(ValueError, match="not divisible"):
            extract(Tensor(rng.random((3, 30, 32))), params)

    def test_branches_never_share_parameters(self, rng):
        im = FeatureExtractorParams.init(rng)
        fl = FeatureExtractorParams.init(rng)
        im_ids = {id(t) for _, t in im.named_tensors("im")}
        fl_ids = {id(t) for _, t in fl.named_tensors("fl")}
        assert not im_ids & fl_ids

    def test_gradient_reaches_stage_weights(self, params, rng):
        x = Tensor(rng.random((3, 32, 32)))
        with Tape() as tape:
            pyr = extract(x, params)
            loss = ad.sumsq(pyr[4])
        tape.backward(loss)
        for name, t in params.named_tensors("bb"):
            if name.endswith(".w"):
                assert t.grad is not None and np.any(t.grad.data != 0.0), name


class TestLabelEncoder:
    def test_weights_nonnegative_for_arbitrary_params(self, rng):
        wgt = LabelEncoderParams.init(rng, squared=True)
        # perturb parameters arbitrarily; nonnegativity is architectural
        for _, t in wgt.named_tensors("w"):
            t.data = rng.standard_normal(t.data.shape) * 3.0
        mask = Tensor(rng.random((1, 32, 32)))
        out = encode_mask(mask, wgt)
        assert out.data.min() >= 0.0

    def test_output_shape_d16(self, rng):
        enc = LabelEncoderParams.init(rng)
        wgt = LabelEncoderParams.init(rng, squared=True)
        e, w = encode_label(Tensor(np.ones((1, 64, 64))), enc, wgt)
        assert e.shape == (16, 8, 8)
        assert w.shape == (16, 8, 8)

    def test_zero_vs_one_mask_encodings_differ(self, rng):
        enc = LabelEncoderParams.init(rng)
        e0 = encode_mask(Tensor(np.zeros((1, 32, 32))), enc)
        e1 = encode_mask(Tensor(np.ones((1, 32, 32))), enc)
        assert np.linalg.norm(e0.data - e1.data) > 0.0

    def test_encoder_and_generator_share_architecture(self, rng):
        enc = LabelEncoderParams.init(rng)
        wgt = LabelEncoderParams.init(rng, squared=True)
        enc_shapes = [t.data.shape for _, t in enc.named_tensors("e")]
        wgt_shapes = [t.data.shape for _, t in wgt.named_tensors("w")]
        assert enc_shapes == wgt_shapes

    def test_resolution_mismatch_rejected(self, rng):
        enc = LabelEncoderParams.init(rng)
        with pytest.raises(ValueError, match="not divisible by 8"):
            encode_mask(Tensor(np.zeros((1, 20, 20))), enc)


def test_he_conv_scaling(rng):
    w, b = he_conv(rng, 64, 32, 3)
    assert abs(w.data.std() - np.sqrt(2.0 / (32 * 9))) < 0.01
    np.testing.assert_array_equal(b.data, 0.0)
