import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2ea.encoder import (
    EncoderConfig,
    FeatureSequence,
    compute_deltas,
    encode,
    speed_perturb,
    subsampled_length,
)
from e2ea.gradcheck import check_encoder_blstm, check_encoder_vgg
from e2ea.nn import ConfigurationError, EmptyInputError

from conftest import tiny_model


class TestConfig:
    def test_blstm_needs_two_subsampling_layers(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig("blstm", num_layers=4, subsample_layers=(1,))

    def test_vgg_forbids_subsampling(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig("vgg-blstm", num_layers=4, subsample_layers=(0, 1))

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig("cnn")

    def test_projection_defaults_to_hidden(self):
        assert EncoderConfig(hidden=7).output_dim == 7
        assert EncoderConfig(hidden=7, proj=3).output_dim == 3


class TestEncode:
    @pytest.mark.parametrize("T,expected", [(16, 4), (17, 5), (1, 1), (4, 1), (5, 2)])
    def test_blstm_lengths(self, T, expected):
        model = tiny_model(0)
        out = model.encode(FeatureSequence(np.ones((T, 3))))
        assert out.hidden.shape == (expected, model.cfg.encoder.output_dim)

    def test_ceil_recurrence_identity(self):
        for T in range(1, 5000):
            assert subsampled_length(subsampled_length(T)) == math.ceil(T / 4)

    def test_vgg_hundred_by_forty(self):
        model = tiny_model(0, feat_dim=40, variant="vgg-blstm")
        x = FeatureSequence(np.random.default_rng(0).normal(size=(100, 40)))
        out = model.encode(x)
        assert out.length == 25
        # two pools take the 40-bin frequency axis to 10; channel-major flattening
        assert model.store["enc.l0.fw.Wx"].shape[0] == model.cfg.encoder.vgg_channels[1] * 10

    def test_vgg_needs_three_channels(self):
        model = tiny_model(0, variant="vgg-blstm")
        with pytest.raises(ConfigurationError):
            encode(model.store, model.cfg.encoder, FeatureSequence(np.ones((8, 3))))

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            FeatureSequence(np.zeros((0, 3)))

    def test_deterministic(self):
        model = tiny_model(2)
        x = FeatureSequence(np.random.default_rng(5).normal(size=(13, 3)))
        np.testing.assert_array_equal(model.encode(x).hidden, model.encode(x).hidden)

    @given(st.integers(1, 120))
    @settings(max_examples=25, deadline=None)
    def test_length_property_both_variants(self, T):
        for variant in ("blstm", "vgg-blstm"):
            model = tiny_model(0, hidden=2, variant=variant)
            assert model.encode(FeatureSequence(np.ones((T, 3)))).length == math.ceil(T / 4)


class TestDeltas:
    def test_constant(self):
        d = compute_deltas(np.full((6, 2), 3.0))
        assert d.shape == (3, 6, 2)
        assert np.all(d[1] == 0) and np.all(d[2] == 0)

    def test_ramp_interior(self):
        x = np.arange(10.0)[:, None]
        d = compute_deltas(x)
        # (1*(t+1-(t-1)) + 2*(t+2-(t-2))) / (2*(1+4)) = 10/10
        np.testing.assert_allclose(d[1, 2:-2, 0], 1.0, atol=1e-15)

    def test_single_frame(self):
        d = compute_deltas(np.array([[1.5, -2.0]]))
        assert np.all(d[1] == 0) and np.all(d[2] == 0)
        np.testing.assert_array_equal(d[0], [[1.5, -2.0]])


class TestSpeedPerturb:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(9, 4))
        np.testing.assert_array_equal(speed_perturb(x, 1.0), x)

    def test_factor_two(self):
        x = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(speed_perturb(x, 2.0), x[[0, 2]])

    def test_point_nine(self):
        assert speed_perturb(np.zeros((90, 1)), 0.9).shape[0] == 100

    def test_interpolates(self):
        x = np.arange(5.0)[:, None]
        np.testing.assert_allclose(speed_perturb(x, 1.5)[:, 0], [0.0, 1.5, 3.0])

    @pytest.mark.parametrize("factor", [0.0, -1.0])
    def test_bad_factor(self, factor):
        with pytest.raises(ValueError):
            speed_perturb(np.zeros((3, 1)), factor)

    @given(st.integers(1, 400), st.sampled_from([0.9, 1.1, 0.8, 1.25, 2.0]))
    def test_round_trip_length(self, T, f):
        x = np.zeros((T, 1))
        back = speed_perturb(speed_perturb(x, f), 1.0 / f)
        assert abs(back.shape[0] - T) <= 1


@pytest.mark.parametrize("check", [check_encoder_blstm, check_encoder_vgg])
def test_encoder_gradients(check):
    assert max(check(seed) for seed in range(20)) < 1e-4
