"""
Cross-scale fusion, soft-weight modulation, the decoder and the full model
"""

import dataclasses

import numpy as np
import pytest

from modules import autodiff as ad
from modules.alignment import SoftWeightVector, fold_weights
from modules.autodiff import gradcheck
from modules.data_io import decode_checkpoint, encode_checkpoint
from modules.errors import DimensionError
from modules.extractor import ConvLayer
from modules.fusion import (FUSE_ORDER, RESIDUAL_BLOCKS, AlignmentCache, DecoderParams, FASRModel, FusionParams,
                            combine_soft, concat_aligned, decode, fc_conv_fuse, forward_full, modulate)
from modules.numerics import GridMeta

FIN_CHANNELS = {4: 4, 2: 6, 1: 6}


def conv(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else bias
    return ConvLayer(ad.parameter(weight), ad.parameter(bias))


def zero_blocks(c):
    return [conv(np.zeros((c, c, 3, 3))) for _ in range(RESIDUAL_BLOCKS)]


def random_fin(rng, channels=FIN_CHANNELS, size=8):
    return {n: ad.constant(rng.standard_normal((c, size * n // 4, size * n // 4))) for n, c in channels.items()}


def grid(side=4):
    return GridMeta.for_image(1, side, side, 3, 1, 1)


class TestConcat:
    def test_channels_stack_ma_first(self, rng):
        fma = {n: rng.standard_normal((2, 2 * n, 2 * n)) for n in (1, 2, 4)}
        fsa = {n: rng.standard_normal((3, 2 * n, 2 * n)) for n in (1, 2, 4)}
        fin = concat_aligned(fma, fsa)
        for n in (1, 2, 4):
            assert fin[n].shape == (5, 2 * n, 2 * n)
            np.testing.assert_array_equal(fin[n].value[:2], fma[n])
            np.testing.assert_array_equal(fin[n].value[2:], fsa[n])

    def test_zero_sa_block(self, rng):
        fma = {n: rng.standard_normal((2, n, n)) for n in (1, 2, 4)}
        fsa = {n: np.zeros((2, n, n)) for n in (1, 2, 4)}
        fin = concat_aligned(fma, fsa)
        assert not np.any(fin[4].value[2:])

    def test_spatial_mismatch(self, rng):
        fma = {n: rng.standard_normal((2, n, n)) for n in (1, 2, 4)}
        fsa = dict(fma)
        fsa[2] = rng.standard_normal((2, 3, 3))
        with pytest.raises(DimensionError):
            concat_aligned(fma, fsa)


class TestFuse:
    def test_identity_selector(self, rng):
        total = sum(FIN_CHANNELS.values())
        offsets, start = {}, 0
        for m in FUSE_ORDER:
            offsets[m] = start
            start += FIN_CHANNELS[m]
        fuse = {}
        for n, c in FIN_CHANNELS.items():
            w = np.zeros((c, total, 1, 1))
            w[np.arange(c), offsets[n] + np.arange(c)] = 1.0
            fuse[n] = conv(w)
        params = FusionParams(fuse, {n: zero_blocks(c) for n, c in FIN_CHANNELS.items()})
        fin = random_fin(rng)
        fout = fc_conv_fuse(fin, params)
        for n in FIN_CHANNELS:
            np.testing.assert_allclose(fout[n].value, fin[n].value, atol=1e-12)

    def test_zero_parameters_give_zero_output(self, rng):
        total = sum(FIN_CHANNELS.values())
        params = FusionParams({n: conv(np.zeros((c, total, 1, 1))) for n, c in FIN_CHANNELS.items()},
                              {n: zero_blocks(c) for n, c in FIN_CHANNELS.items()})
        fout = fc_conv_fuse(random_fin(rng), params)
        for n, c in FIN_CHANNELS.items():
            assert fout[n].shape == (c, 2 * n, 2 * n)
            assert not np.any(fout[n].value)

    def test_coarse_input_reaches_fine_output(self, rng):
        params = FusionParams.init(np.random.default_rng(4), FIN_CHANNELS)
        fin = random_fin(rng)
        base = fc_conv_fuse(fin, params)[4].value
        fin[1] = ad.constant(fin[1].value + 1.0)
        assert not np.allclose(fc_conv_fuse(fin, params)[4].value, base)


class TestSoftWeights:
    def test_halves_sum_to_one(self):
        ssa = {n: SoftWeightVector(np.full(16, 0.5), grid()) for n in (1, 2, 4)}
        s = combine_soft(ssa, SoftWeightVector(np.full(16, 0.5), grid()))
        assert s[4].shape == (1, 4, 4)
        assert s[2].shape == (1, 2, 2)
        assert s[1].shape == (1, 1, 1)
        for n in (1, 2, 4):
            np.testing.assert_array_equal(s[n], np.ones_like(s[n]))

    def test_missing_ma_term(self, rng):
        ssa = {n: SoftWeightVector(rng.random(16), grid()) for n in (1, 2, 4)}
        s = combine_soft(ssa, None)
        for n in (1, 2, 4):
            np.testing.assert_array_equal(s[n], fold_weights(ssa[n], n, n))

    def test_random_sum(self, rng):
        ssa = {4: SoftWeightVector(rng.random(16), grid())}
        sma = SoftWeightVector(rng.random(16), grid())
        s = combine_soft(ssa, sma, dims={4: (8, 8), 2: (4, 4), 1: (2, 2)})
        np.testing.assert_allclose(s[4], fold_weights(ssa[4], 8, 8) + fold_weights(sma, 8, 8))
        np.testing.assert_allclose(s[2], fold_weights(sma, 4, 4))

    def test_modulate_by_one_is_identity(self, rng):
        fout = {n: rng.standard_normal((3, n, n)) for n in (1, 2, 4)}
        out = modulate(fout, {n: np.ones((1, n, n)) for n in (1, 2, 4)})
        for n in (1, 2, 4):
            np.testing.assert_array_equal(out[n].value, fout[n])

    def test_modulate_by_half(self, rng):
        fout = {4: rng.standard_normal((3, 4, 4))}
        out = modulate(fout, {4: np.full((1, 4, 4), 0.5)})
        np.testing.assert_array_equal(out[4].value, fout[4] * 0.5)

    def test_modulate_matches_channel_loop(self, rng):
        f = rng.standard_normal((3, 4, 4))
        s = rng.random((1, 4, 4))
        out = modulate({4: f}, {4: s})[4].value
        for c in range(3):
            np.testing.assert_allclose(out[c], f[c] * s[0])

    def test_modulate_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            modulate({4: rng.standard_normal((3, 4, 4))}, {4: np.ones((1, 2, 2))})


class TestDecoder:
    @pytest.fixture
    def inputs(self, rng):
        f = {4: rng.standard_normal((2, 8, 8)), 2: rng.standard_normal((3, 4, 4)), 1: rng.standard_normal((3, 2, 2))}
        q4 = rng.standard_normal((2, 8, 8))
        lr_up = rng.uniform(-0.5, 0.5, (1, 8, 8))
        return f, q4, lr_up

    def test_zero_initialised_head_returns_lr_up(self, inputs):
        f, q4, lr_up = inputs
        params = DecoderParams.init(np.random.default_rng(0), 10, 6, 1)
        np.testing.assert_array_equal(decode(f, q4, lr_up, params).value, lr_up)

    def test_output_is_clamped(self, inputs):
        f, q4, _ = inputs
        params = DecoderParams.init(np.random.default_rng(0), 10, 6, 1)
        lr_up = np.full((1, 8, 8), 3.0)
        np.testing.assert_array_equal(decode(f, q4, lr_up, params).value, np.ones((1, 8, 8)))

    def test_mismatched_query_features(self, inputs):
        f, _, lr_up = inputs
        params = DecoderParams.init(np.random.default_rng(0), 10, 6, 1)
        with pytest.raises(DimensionError):
            decode(f, np.zeros((2, 4, 4)), lr_up, params)

    def test_head_gradient(self, inputs, rng):
        f, q4, lr_up = inputs
        params = DecoderParams.init(np.random.default_rng(0), 10, 6, 1)
        target = rng.uniform(-0.5, 0.5, (1, 8, 8))
        point = rng.standard_normal(params.out.weight.shape) * 0.01

        def loss(weight):
            head = DecoderParams(params.layers, ConvLayer(weight, params.out.bias))
            return ad.sum_all(ad.square(ad.sub(decode(f, q4, lr_up, head), target)))

        assert gradcheck(loss, point).passed


class TestModel:
    def test_same_seed_is_bit_identical(self, small_config, small_pair):
        pair, lr = small_pair
        a, _ = forward_full(FASRModel.init(small_config, seed=0), lr, pair.pd)
        b, _ = forward_full(FASRModel.init(small_config, seed=0), lr, pair.pd)
        np.testing.assert_array_equal(a.value, b.value)

    def test_fresh_model_reproduces_bicubic(self, small_model, small_pair):
        pair, lr = small_pair
        sr, diag = forward_full(small_model, lr, pair.pd)
        assert sr.shape == pair.t2.shape
        np.testing.assert_array_equal(sr.value, np.clip(diag.inputs.lr_up, -1.0, 1.0))

    def test_diagnostics(self, small_model, small_pair):
        pair, lr = small_pair
        _, diag = forward_full(small_model, lr, pair.pd, keep_correlations=True)
        assert set(diag.soft) == {1, 2, 4}
        assert diag.soft[4].shape == (1, 16, 16)
        assert diag.f_in[4].shape == (8, 16, 16)
        assert diag.f_in[1].shape == (16, 4, 4)
        assert diag.sa.correlations[4].scores.shape == (256, 256)
        assert diag.cache.ma_match is not None

    @pytest.mark.parametrize("toggle,zero_slice", [("use_sa", slice(4, None)), ("use_ma", slice(None, 4))])
    def test_disabled_branch_is_zero(self, small_config, small_pair, toggle, zero_slice):
        pair, lr = small_pair
        model = FASRModel.init(dataclasses.replace(small_config, **{toggle: False}), seed=0)
        _, diag = forward_full(model, lr, pair.pd)
        assert not np.any(diag.f_in[4].value[zero_slice])
        assert np.any(diag.f_in[4].value)

    def test_without_fusion(self, small_config, small_pair):
        pair, lr = small_pair
        model = FASRModel.init(dataclasses.replace(small_config, use_chpf=False), seed=0)
        sr, diag = forward_full(model, lr, pair.pd)
        assert sr.shape == (1, 16, 16)
        assert diag.soft == {}

    def test_cross_attention_baseline(self, small_config, small_pair):
        pair, lr = small_pair
        config = dataclasses.replace(small_config, use_sa=False, use_ma=False, use_ca=True)
        _, diag = forward_full(FASRModel.init(config, seed=0), lr, pair.pd)
        assert set(diag.sa.features) == {4}
        assert diag.ma is None
        assert np.any(diag.f_in[4].value[4:])
        assert not np.any(diag.f_in[2].value)

    def test_cached_matches_are_reused(self, small_model, small_pair):
        pair, lr = small_pair
        cache = AlignmentCache()
        first, _ = forward_full(small_model, lr, pair.pd, cache)
        matches = dict(cache.sa_matches)
        second, _ = forward_full(small_model, lr, pair.pd, cache)
        assert cache.sa_matches[4] is matches[4]
        np.testing.assert_array_equal(first.value, second.value)

    def test_gradients_reach_every_stage(self, small_model, small_pair):
        pair, lr = small_pair
        small_model.decoder.out.weight.value = np.full(small_model.decoder.out.weight.shape, 0.01, np.float32)
        sr, _ = forward_full(small_model, lr, pair.pd)
        grads = ad.backward(ad.mean(ad.square(ad.sub(sr, pair.t2))))
        params = small_model.named_parameters()
        for name in ("extractor.stage1.conv1.weight", "fusion.fuse4.weight", "decoder.out.weight"):
            assert np.any(grads[params[name]]), name


class TestCheckpoint:
    def test_round_trip_reproduces_output(self, small_config, small_pair, rng):
        pair, lr = small_pair
        model = FASRModel.init(small_config, seed=0)
        out = model.decoder.out.weight
        out.value = (rng.standard_normal(out.shape) * 0.05).astype(np.float32)
        expected, _ = forward_full(model, lr, pair.pd)

        restored = FASRModel.init(small_config, seed=1)
        restored.load_state_dict(decode_checkpoint(encode_checkpoint(model.state_dict())))
        actual, _ = forward_full(restored, lr, pair.pd)
        np.testing.assert_array_equal(actual.value, expected.value)

    def test_state_dict_is_float32(self, small_model):
        state = small_model.state_dict()
        assert len(state) == len(small_model.named_parameters())
        assert all(v.dtype == np.float32 for v in state.values())
        assert small_model.parameter_count() == sum(v.size for v in state.values())

    def test_missing_record(self, small_model):
        state = small_model.state_dict()
        state.pop("decoder.out.bias")
        with pytest.raises(DimensionError):
            small_model.load_state_dict(state)

    def test_wrong_shape(self, small_model):
        state = small_model.state_dict()
        state["decoder.out.bias"] = np.zeros(5, dtype=np.float32)
        with pytest.raises(DimensionError):
            small_model.load_state_dict(state)
