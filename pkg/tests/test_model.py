"""Network-level tests: context-bottleneck contract, tap/aggregate
topology, weight sharing, and gradient reach."""

import numpy as np
import pytest

from mlvicx import tensor as T
from mlvicx.losses import VicWeights, mlvicx_loss
from mlvicx.model import EncoderConfig, MLVICXModel
from mlvicx.tensor import ShapeError, Tensor


def random_views(rng, n, size, lo=0.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, (n, 1, size, size)).astype(np.float32))


class TestContextBottleneck:
    def test_zero_params_give_quarter_scaling(self, tiny_model, rng):
        for name, p in tiny_model.params.items():
            if ".cb." in name:
                p.data[...] = 0.0
        y = Tensor(rng.standard_normal((2, 2, 8, 8)).astype(np.float32))
        out = tiny_model.context_bottleneck(y, 0)
        assert np.array_equal(out.data, (0.25 * y.data).astype(np.float32))

    def test_zero_input_stays_zero(self, tiny_model):
        y = Tensor(np.zeros((1, 2, 8, 8), np.float32))
        out = tiny_model.context_bottleneck(y, 0)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_contractive_elementwise(self, tiny_model, rng):
        for _ in range(20):
            y = Tensor(rng.standard_normal((2, 2, 8, 8)).astype(np.float32))
            out = tiny_model.context_bottleneck(y, 0)
            assert np.all(np.abs(out.data) <= np.abs(y.data) + 1e-7)

    def test_shape_preserved(self, tiny_model, rng):
        y = Tensor(rng.standard_normal((3, 2, 8, 8)).astype(np.float32))
        assert tiny_model.context_bottleneck(y, 0).shape == y.shape

    def test_attention_values_in_open_interval(self, rng):
        cfg = EncoderConfig()
        model = MLVICXModel(cfg, seed=9)
        T.set_debug(True)  # debug mode asserts (0,1) inside the block
        try:
            for _ in range(10):
                y = Tensor(rng.standard_normal((2, 16, 32, 32)).astype(np.float32))
                model.context_bottleneck(y, 0)
        finally:
            T.set_debug(False)

    def test_channel_mismatch_rejected(self, tiny_model, rng):
        y = Tensor(rng.standard_normal((1, 5, 8, 8)).astype(np.float32))
        with pytest.raises(ShapeError, match="channels"):
            tiny_model.context_bottleneck(y, 0)


class TestEncoderForward:
    def test_default_config_shapes(self, rng):
        model = MLVICXModel(EncoderConfig(), seed=0)
        rec = model.encode(random_views(rng, 2, 32))
        assert [t.channels for t in rec.taps] == [16, 32, 64]
        assert rec.compound.shape == (2, 112, 8, 8)
        assert rec.global_feature.shape == (2, 64)
        assert rec.z.shape == (2, 256)
        assert rec.m.shape == (2, 256)

    def test_identical_batch_rows_give_identical_outputs(self, rng):
        model = MLVICXModel(EncoderConfig(), seed=0)
        img = rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)
        batch = Tensor(np.stack([img, img]))
        rec = model.encode(batch)
        np.testing.assert_array_equal(rec.z.data[0], rec.z.data[1])
        np.testing.assert_array_equal(rec.m.data[0], rec.m.data[1])
        np.testing.assert_array_equal(rec.compound.data[0], rec.compound.data[1])

    def test_deepest_tap_only_degenerate_aggregation(self, rng):
        cfg = EncoderConfig(channels=(4, 8), blocks=(1, 1), strides=(1, 2),
                            tap_levels=(1,), image_size=16, head_width=8)
        model = MLVICXModel(cfg, seed=1)
        rec = model.encode(random_views(rng, 2, 16))
        assert len(rec.taps) == 1
        np.testing.assert_array_equal(rec.compound.data, rec.taps[0].values.data)

    def test_compound_channels_sum_taps(self, rng):
        cfg = EncoderConfig(channels=(4, 6, 10), blocks=(1, 1, 1), strides=(1, 2, 2),
                            tap_levels=(0, 2), image_size=16, head_width=8)
        model = MLVICXModel(cfg, seed=1)
        rec = model.encode(random_views(rng, 2, 16))
        assert rec.compound.shape[1] == 4 + 10 == cfg.compound_channels

    def test_wrong_input_size_rejected(self, tiny_model, rng):
        with pytest.raises(ShapeError, match="spatial"):
            tiny_model.encode(random_views(rng, 1, 16))


class TestHeads:
    def test_projection_width_matches_config(self, tiny_model, rng):
        feats = Tensor(rng.standard_normal((3, 3)).astype(np.float32))
        z = tiny_model.project_global(feats, training=True)
        assert z.shape == (3, 4)

    def test_eval_mode_allows_single_row(self, tiny_model, rng):
        feats = Tensor(rng.standard_normal((1, 3)).astype(np.float32))
        z = tiny_model.project_global(feats, training=False)
        assert z.shape == (1, 4)

    def test_training_single_row_rejected(self, tiny_model, rng):
        feats = Tensor(rng.standard_normal((1, 3)).astype(np.float32))
        with pytest.raises(ShapeError, match="batch size"):
            tiny_model.project_global(feats, training=True)

    def test_constant_compound_gives_identical_rows(self, tiny_model):
        compound = Tensor(np.full((2, 5, 4, 4), 0.6, np.float32))
        m = tiny_model.project_multilevel(compound, training=True)
        np.testing.assert_array_equal(m.data[0], m.data[1])


class TestSiamese:
    def test_identical_views_identical_records(self, tiny_model, rng):
        v = random_views(rng, 2, 8)
        rec, rec_p = tiny_model.siamese_forward(v, Tensor(v.data.copy()))
        np.testing.assert_array_equal(rec.z.data, rec_p.z.data)
        np.testing.assert_array_equal(rec.m.data, rec_p.m.data)
        bd = mlvicx_loss(rec.z, rec_p.z, rec.m, rec_p.m, VicWeights())
        assert bd.inv_g == 0.0 and bd.inv_l == 0.0

    def test_swapping_views_swaps_records(self, tiny_model, rng):
        v = random_views(rng, 2, 8)
        vp = random_views(rng, 2, 8)
        rec_a, rec_b = tiny_model.siamese_forward(v, vp)
        rec_c, rec_d = tiny_model.siamese_forward(vp, v)
        np.testing.assert_array_equal(rec_a.z.data, rec_d.z.data)
        np.testing.assert_array_equal(rec_b.z.data, rec_c.z.data)

    def test_perturbing_one_view_changes_only_its_record(self, tiny_model, rng):
        v = random_views(rng, 2, 8)
        vp = random_views(rng, 2, 8)
        rec_a, rec_b = tiny_model.siamese_forward(v, vp)
        vp2 = Tensor(np.clip(vp.data + 0.1, 0, 1))
        rec_c, rec_d = tiny_model.siamese_forward(v, vp2)
        np.testing.assert_array_equal(rec_a.z.data, rec_c.z.data)
        assert not np.array_equal(rec_b.z.data, rec_d.z.data)

    def test_shape_mismatch_between_views(self, tiny_model, rng):
        with pytest.raises(ShapeError, match="siamese"):
            tiny_model.siamese_forward(random_views(rng, 2, 8), random_views(rng, 3, 8))

    def test_deterministic_forward_is_bitwise(self, tiny_config, rng):
        v = random_views(rng, 2, 8)
        a = MLVICXModel(tiny_config, seed=4).encode(v)
        b = MLVICXModel(tiny_config, seed=4).encode(v)
        assert np.array_equal(a.z.data, b.z.data)
        assert np.array_equal(a.m.data, b.m.data)


class TestGradientReach:
    def test_every_parameter_receives_gradient(self, tiny_model, rng):
        v = random_views(rng, 3, 8)
        vp = random_views(rng, 3, 8)
        rec, rec_p = tiny_model.siamese_forward(v, vp)
        bd = mlvicx_loss(rec.z, rec_p.z, rec.m, rec_p.m,
                         VicWeights(alpha=1, beta=1, gamma=1))
        tiny_model.zero_grad()
        bd.total.backward()
        for name, p in tiny_model.params.items():
            assert p.grad is not None, f"{name} missing grad"
            assert np.any(np.abs(p.grad) > 0), f"{name} has all-zero grad"

    def test_bottleneck_params_specifically_reached(self, tiny_model, rng):
        v = random_views(rng, 2, 8)
        rec = tiny_model.encode(v)
        tiny_model.zero_grad()
        T.tsum(T.square(rec.compound)).backward()
        for name, p in tiny_model.params.items():
            if ".cb." in name:
                assert np.any(np.abs(p.grad) > 0), f"{name} unreached"


class TestStateRoundTrip:
    def test_state_arrays_reload_bitwise(self, tiny_config, tiny_model, rng):
        state = {k: v.copy() for k, v in tiny_model.state_arrays().items()}
        clone = MLVICXModel(tiny_config, seed=77)
        clone.load_state_arrays(state)
        v = random_views(rng, 2, 8)
        a = tiny_model.encode(v, training=False)
        b = clone.encode(v, training=False)
        assert np.array_equal(a.z.data, b.z.data)

    def test_encoder_hash_tracks_encoder_only(self, tiny_model):
        h0 = tiny_model.encoder_hash()
        tiny_model.params["head_g.fc0.weight"].data += 1.0
        assert tiny_model.encoder_hash() == h0
        tiny_model.params["stage0.conv0.weight"].data += 1.0
        assert tiny_model.encoder_hash() != h0
