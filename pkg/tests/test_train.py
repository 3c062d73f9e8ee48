import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from e2ea.gradcheck import check_mtl_model
from e2ea.nn import ConfigurationError
from e2ea.train import (
    AdaDelta,
    MtlConfig,
    ToyTaskSpec,
    augment_speed,
    clip_grad_norm,
    generate_toy_dataset,
    global_norm,
    mtl_loss,
    train_epoch,
)

from conftest import read_tsv, tiny_input, tiny_model


class TestMtlLoss:
    @pytest.mark.parametrize("lam,expected", [(0.0, 4.0), (1.0, 2.0), (0.5, 3.0)])
    def test_examples(self, lam, expected):
        assert mtl_loss(lam, 2.0, 4.0) == expected

    def test_infinite_ctc_with_zero_weight(self):
        assert mtl_loss(0.0, math.inf, 1.5) == 1.5

    @given(st.floats(0, 1), st.floats(0, 100), st.floats(0, 100))
    def test_linear_in_lambda(self, lam, c, a):
        assert mtl_loss(lam, c, a) == pytest.approx(mtl_loss(0.0, c, a) + lam * (c - a), abs=1e-9)

    def test_lambda_range(self):
        with pytest.raises(ConfigurationError):
            MtlConfig(lam=1.5)


class TestClip:
    def test_at_threshold_unchanged(self):
        g = {"w": np.array([3.0, 4.0])}
        clip_grad_norm(g, 5.0)
        np.testing.assert_array_equal(g["w"], [3.0, 4.0])

    def test_scaled(self):
        g = {"w": np.array([6.0, 8.0])}
        clip_grad_norm(g, 5.0)
        np.testing.assert_allclose(g["w"], [3.0, 4.0], atol=1e-15)

    def test_zero(self):
        g = {"w": np.zeros(3)}
        clip_grad_norm(g, 5.0)
        assert np.all(g["w"] == 0)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            clip_grad_norm({"w": np.ones(2)}, 0.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-3, 10))
    def test_norm_bound_and_direction(self, values, tau):
        g = np.array(values)
        out = clip_grad_norm({"w": g.copy(), "v": 2 * g.copy()}, tau)
        assert global_norm(out.values()) <= tau + 1e-12
        if np.linalg.norm(g) > 0:
            cos = out["w"] @ g / (np.linalg.norm(out["w"]) * np.linalg.norm(g))
            assert cos == pytest.approx(1.0, abs=1e-12)


class TestAdaDelta:
    def test_first_step_closed_form(self):
        x = {"x": np.array([0.0])}
        AdaDelta(0.95, 1e-8).update(x, {"x": np.array([1.0])})
        assert x["x"][0] == pytest.approx(-4.472136e-4, abs=1e-10)
        assert abs(x["x"][0] - (-math.sqrt(1e-8) / math.sqrt(0.05 + 1e-8))) < 1e-12

    def test_zero_gradient_identity(self):
        x = {"x": np.array([1.0, -2.0])}
        opt = AdaDelta()
        for _ in range(5):
            opt.update(x, {"x": np.zeros(2)})
        np.testing.assert_array_equal(x["x"], [1.0, -2.0])

    def test_quadratic_descends(self):
        x = {"x": np.array([5.0])}
        opt = AdaDelta(0.95, 1e-8)
        losses = []
        for _ in range(200):
            losses.append(float(x["x"][0] ** 2))
            opt.update(x, {"x": 2 * x["x"]})
        losses.append(float(x["x"][0] ** 2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_accumulators_non_negative(self):
        opt = AdaDelta()
        x = {"x": np.zeros(4)}
        rng = np.random.default_rng(0)
        for _ in range(10):
            opt.update(x, {"x": rng.normal(size=4)})
        assert np.all(opt.sq_grad["x"] >= 0) and np.all(opt.sq_delta["x"] >= 0)


class TestToyData:
    def test_noiseless_templates(self):
        spec = ToyTaskSpec(noise=0.0)
        data = generate_toy_dataset(spec, 5, durations=3)
        t = spec.templates()
        for u in data:
            expected = np.concatenate([np.repeat(t[c - 1][None], 3, axis=0) for c in u.labels])
            np.testing.assert_array_equal(u.features.frames, expected)

    def test_same_seed_identical(self):
        a = generate_toy_dataset(ToyTaskSpec(), 20)
        b = generate_toy_dataset(ToyTaskSpec(), 20)
        assert [u.labels for u in a] == [u.labels for u in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features.frames, y.features.frames)

    def test_splits_differ_templates_shared(self):
        spec = ToyTaskSpec()
        a, b = generate_toy_dataset(spec, 20, split=0), generate_toy_dataset(spec, 20, split=1)
        assert [u.labels for u in a] != [u.labels for u in b]

    def test_length_bounds_ten_thousand(self):
        spec = ToyTaskSpec(len_min=2, len_max=5, dur_min=1, dur_max=1, feat_dim=2)
        lengths = [len(u.labels) for u in generate_toy_dataset(spec, 10_000)]
        assert min(lengths) == 2 and max(lengths) == 5

    def test_no_adjacent_repeats(self):
        for u in generate_toy_dataset(ToyTaskSpec(), 200):
            assert all(a != b for a, b in zip(u.labels, u.labels[1:]))

    def test_templates_distinct(self):
        t = ToyTaskSpec().templates()
        assert len({tuple(row) for row in t}) == len(t)

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            ToyTaskSpec(dur_min=0)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            generate_toy_dataset(ToyTaskSpec(), 0)

    def test_speed_augmentation(self):
        data = generate_toy_dataset(ToyTaskSpec(), 3)
        aug = augment_speed(data, (0.9, 1.1))
        assert len(aug) == 9
        assert aug[3].labels == data[0].labels
        assert aug[3].features.length == int(data[0].features.length / 0.9 + 1e-9)


def _small_set(n=6):
    spec = ToyTaskSpec(vocab="abc", feat_dim=3, dur_min=4, dur_max=5, len_min=1, len_max=3)
    return generate_toy_dataset(spec, n)


class TestTrainEpoch:
    def test_lambda_zero_leaves_ctc_head(self):
        model = tiny_model(0)
        model.store.zero_grad()
        model.loss_and_grads(tiny_input(0), (1, 2), 0.0)
        assert np.all(model.store.grads["ctc.out.W"] == 0) and np.all(model.store.grads["ctc.out.b"] == 0)

    def test_gradient_is_lambda_combination(self):
        x, target = tiny_input(1), (2, 1, 3)
        grads = {}
        for lam in (0.0, 1.0, 0.3):
            model = tiny_model(1)
            model.store.zero_grad()
            model.loss_and_grads(x, target, lam)
            grads[lam] = {k: v.copy() for k, v in model.store.grads.items()}
        for name in grads[0.3]:
            if name.startswith("enc."):
                np.testing.assert_allclose(grads[0.3][name], 0.3 * grads[1.0][name] + 0.7 * grads[0.0][name],
                                           atol=1e-13, rtol=1e-10)

    def test_mtl_gradient_finite_differences(self):
        assert max(check_mtl_model(s) for s in range(20)) < 1e-4

    def test_deterministic(self):
        data = _small_set()
        finals = []
        for _ in range(2):
            model = tiny_model(3)
            opt = AdaDelta()
            stats = [train_epoch(model, opt, data, MtlConfig(epochs=2, seed=5), e) for e in (1, 2)]
            finals.append((stats, {k: v.copy() for k, v in model.store.params.items()}))
        assert finals[0][0] == finals[1][0]
        for k in finals[0][1]:
            np.testing.assert_array_equal(finals[0][1][k], finals[1][1][k])

    def test_unalignable_skipped(self):
        from e2ea.encoder import FeatureSequence
        from e2ea.train import Utterance

        data = _small_set(3) + [Utterance("short", FeatureSequence(np.zeros((2, 3))), (1, 1, 1))]
        st = train_epoch(tiny_model(0), AdaDelta(), data, MtlConfig(), 1)
        assert st.skipped == 1 and np.isfinite(st.mtl)


def test_toy_mtl_loss_falls_by_epoch_five(toy_run):
    d, _ = toy_run
    rows, _ = read_tsv(d / "train.tsv")
    mtl = {int(r[0]): float(r[3]) for r in rows}
    assert mtl[5] < mtl[1]
