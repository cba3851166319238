import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equitrack import synth
from equitrack.distill import (
    GroupTransform,
    TrainConfig,
    apply_transform,
    consistency_loss,
    disagreement_loss,
    invert_prediction,
    sample_transform,
    train,
    training_weights,
    training_weights_backward,
)
from equitrack.nn import ArchDescriptor
from equitrack.synth import ComplexField, OpticsConfig, propagate_field


def forward_prediction(pred, t: GroupTransform):
    """Independent inverse of invert_prediction: original -> view coords."""
    pred = np.asarray(pred, dtype=float)
    out = pred.copy()
    out[:2] = t.rotation() @ (t.mirror_matrix() @ pred[:2]) + np.array([t.tx, t.ty])
    return out


class TestApplyTransform:
    def test_identity(self):
        img = np.random.default_rng(0).normal(size=(16, 16))
        np.testing.assert_allclose(apply_transform(img, GroupTransform()), img,
                                   atol=1e-12)

    def test_integer_translation_is_roll(self):
        img = np.random.default_rng(1).normal(size=(32, 32))
        out = apply_transform(img, GroupTransform(tx=3.0, ty=-2.0))
        expected = np.roll(img, (3, -2), axis=(0, 1))
        np.testing.assert_allclose(out[8:24, 8:24], expected[8:24, 8:24], atol=1e-9)

    def test_quarter_turn_matches_rot90(self):
        img = np.random.default_rng(2).normal(size=(16, 16))
        out = apply_transform(img, GroupTransform(theta=np.pi / 2))
        candidates = [np.rot90(img, k) for k in (1, 3)]
        errs = [np.abs(out - c).max() for c in candidates]
        assert min(errs) < 1e-9

    def test_mirror_flips_second_axis(self):
        img = np.random.default_rng(3).normal(size=(16, 16))
        out = apply_transform(img, GroupTransform(mirror=True))
        np.testing.assert_allclose(out, img[:, ::-1], atol=1e-12)

    def test_scale_multiplies_intensity(self):
        img = np.random.default_rng(4).normal(size=(16, 16))
        out = apply_transform(img, GroupTransform(log_s=math.log(3.0)))
        np.testing.assert_allclose(out, 3.0 * img, atol=1e-12)

    def test_scale_preserves_field_background(self):
        optics = OpticsConfig()
        fld = synth.simulate_hologram(0.228, 1.58, (6.0, 6.0, 0.0), optics, (32, 32))
        ch = fld.to_channels(dtype=float)
        out = apply_transform(ch, GroupTransform(log_s=math.log(2.0)), optics=optics)
        expected = np.stack([1.0 + 2.0 * (ch[..., 0] - 1.0), 2.0 * ch[..., 1]], axis=-1)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_dz_equals_propagation(self):
        optics = OpticsConfig()
        fld = synth.simulate_hologram(0.228, 1.58, (6.0, 6.0, 0.0), optics, (32, 32))
        ch = fld.to_channels(dtype=float)
        out = apply_transform(ch, GroupTransform(dz=2.5), optics=optics)
        prop = propagate_field(fld, 2.5).to_channels(dtype=float)
        np.testing.assert_allclose(out, prop, atol=1e-9)

    def test_dz_without_optics_rejected(self):
        with pytest.raises(ValueError, match="optics"):
            apply_transform(np.zeros((16, 16)), GroupTransform(dz=1.0))

    def test_moves_particle_centroid(self):
        img = synth.render_particle(synth.default_spec("sphere", (15.5, 15.5)), (32, 32))
        out = apply_transform(img, GroupTransform(tx=2.0, ty=-3.0))
        gx, gy = np.mgrid[0:32, 0:32]
        cx = (gx * out).sum() / out.sum()
        cy = (gy * out).sum() / out.sum()
        assert cx == pytest.approx(17.5, abs=0.02)
        assert cy == pytest.approx(12.5, abs=0.02)


class TestInvertPrediction:
    def test_spec_quarter_turn_example(self):
        t = GroupTransform(theta=np.pi / 2)
        np.testing.assert_allclose(
            invert_prediction(np.array([4.0, 0.0]), t), [0.0, -4.0], atol=1e-12
        )

    def test_extra_channels_untouched(self):
        t = GroupTransform(theta=0.3, tx=1.0, mirror=True)
        out = invert_prediction(np.array([1.0, 2.0, 3.5, -0.7]), t)
        np.testing.assert_allclose(out[2:], [3.5, -0.7])

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(-5.0, 5.0), st.floats(-5.0, 5.0), st.floats(0.0, 6.28),
        st.floats(-4.0, 4.0), st.floats(-4.0, 4.0), st.booleans(),
    )
    def test_round_trip(self, x, y, theta, tx, ty, mirror):
        t = GroupTransform(tx=tx, ty=ty, theta=theta, mirror=mirror)
        pred = np.array([x, y])
        back = invert_prediction(forward_prediction(pred, t), t)
        np.testing.assert_allclose(back, pred, atol=1e-9)


class TestTrainingWeights:
    def test_zero_logits_closed_form(self):
        logits = np.zeros((1, 32, 32))
        rng = np.random.default_rng(0)
        w, _ = training_weights(logits, rng, dropout_rate=0.0, eps=1e-6)
        expected = (0.5 + 1e-6) / (1e-6 * 1024 + 512.0)
        np.testing.assert_allclose(w, expected, rtol=1e-12)

    def test_sums_to_one(self):
        logits = np.random.default_rng(1).normal(size=(3, 16, 16))
        w, _ = training_weights(logits, np.random.default_rng(2))
        np.testing.assert_allclose(w.sum(axis=(-2, -1)), 1.0, atol=1e-12)

    def test_dropout_rate_monte_carlo(self):
        logits = np.full((1, 64, 64), 5.0)
        rng = np.random.default_rng(3)
        dropped = 0
        trials = 50
        for _ in range(trials):
            w, (s, mask, _, _) = training_weights(logits, rng, dropout_rate=0.01)
            dropped += (mask == 0.0).sum()
        assert dropped / (trials * 64 * 64) == pytest.approx(0.01, rel=0.15)

    def test_dropped_entry_gets_floor_weight(self):
        logits = np.full((1, 8, 8), 2.0)
        rng = np.random.default_rng(0)
        while True:
            w, (s, mask, denom, _) = training_weights(logits, rng, dropout_rate=0.2)
            if (mask == 0).any():
                break
        np.testing.assert_allclose(w[mask == 0], 1e-6 / denom.ravel()[0], rtol=1e-12)

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(1, 4, 4))
        coeff = rng.normal(size=(1, 4, 4))
        w, cache = training_weights(logits, np.random.default_rng(0),
                                    dropout_rate=0.0)
        grad = training_weights_backward(coeff, cache)
        h = 1e-6
        for i in range(4):
            for j in range(4):
                lp, lm = logits.copy(), logits.copy()
                lp[0, i, j] += h
                lm[0, i, j] -= h
                wp, _ = training_weights(lp, np.random.default_rng(0), dropout_rate=0.0)
                wm, _ = training_weights(lm, np.random.default_rng(0), dropout_rate=0.0)
                fd = ((wp - wm) * coeff).sum() / (2 * h)
                assert grad[0, i, j] == pytest.approx(fd, abs=1e-6)


class TestLosses:
    def test_disagreement_hand_value(self):
        assert disagreement_loss(np.array([[0.0, 0.0], [2.0, 0.0]])) == pytest.approx(1.0)

    def test_disagreement_zero_when_equal(self):
        assert disagreement_loss(np.tile([1.5, -2.0], (5, 1))) == 0.0

    def test_disagreement_needs_two(self):
        with pytest.raises(ValueError, match="two"):
            disagreement_loss(np.array([[1.0, 2.0]]))

    def test_consistency_constant_maps(self):
        maps = np.full((1, 4, 4, 2), 3.0)
        w = np.full((1, 4, 4), 1.0 / 16)
        loss, pooled = consistency_loss(maps, w)
        np.testing.assert_allclose(loss, 0.0, atol=1e-12)
        np.testing.assert_allclose(pooled, [[3.0, 3.0]])

    def test_consistency_hand_value(self):
        # two cells, values 0 and 1, equal weight: pooled 0.5, spread 0.5
        maps = np.array([0.0, 1.0, 0.0, 1.0]).reshape(1, 2, 2, 1)
        w = np.full((1, 2, 2), 0.25)
        loss, pooled = consistency_loss(maps, w)
        assert pooled[0, 0] == pytest.approx(0.5)
        assert loss[0] == pytest.approx(0.5)


class TestSampleTransform:
    def test_toggles_and_bounds(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig(rotate=False, mirror=False, translation_bound=2.0,
                          log_s_range=(0.0, 0.0))
        desc = ArchDescriptor(channels="xy")
        for _ in range(20):
            t = sample_transform(rng, cfg, (32, 32), desc)
            assert t.theta == 0.0 and t.mirror is False
            assert abs(t.tx) <= 2.0 and abs(t.ty) <= 2.0
            assert t.dz == 0.0 and t.log_s == 0.0

    def test_default_translation_bound_quarter_crop(self):
        rng = np.random.default_rng(1)
        cfg = TrainConfig()
        desc = ArchDescriptor(channels="xy")
        ts = [sample_transform(rng, cfg, (32, 32), desc) for _ in range(200)]
        assert max(abs(t.tx) for t in ts) <= 8.0
        assert max(abs(t.tx) for t in ts) > 6.0

    def test_dz_only_with_z_channel(self):
        rng = np.random.default_rng(2)
        cfg = TrainConfig(dz_range=(-5.0, 5.0))
        t = sample_transform(rng, cfg, (32, 32), ArchDescriptor(channels="xyz"))
        assert t.dz != 0.0


@pytest.fixture(scope="module")
def crop():
    img = synth.render_particle(synth.default_spec("point", (15.5, 15.5)), (32, 32))
    return synth.add_noise(img, 10.0, seed=0)


class TestTrain:
    def test_smoke_and_curve_shape(self, crop):
        res = train(crop, TrainConfig(n_batches=3, seed=0))
        assert res.loss_curve.shape == (3, 3)
        assert np.isfinite(res.loss_curve[:, 1:]).all()
        assert res.model.step == 3

    def test_deterministic(self, crop):
        a = train(crop, TrainConfig(n_batches=2, seed=1))
        b = train(crop, TrainConfig(n_batches=2, seed=1))
        np.testing.assert_array_equal(a.model.weights[0][0], b.model.weights[0][0])

    def test_continuation_preserves_step(self, crop):
        res = train(crop, TrainConfig(n_batches=2, seed=0))
        res2 = train(crop, TrainConfig(n_batches=2, seed=1), model=res.model)
        assert res2.model is res.model
        assert res2.model.step == 4

    def test_small_crop_rejected(self):
        with pytest.raises(ValueError, match="32"):
            train(np.zeros((16, 16)), TrainConfig(n_batches=1))

    def test_channel_mismatch_rejected(self, crop):
        with pytest.raises(ValueError, match="channel"):
            train(crop, TrainConfig(n_batches=1), desc=ArchDescriptor(in_channels=2))

    def test_batch_size_validated(self):
        with pytest.raises(ValueError, match="batch"):
            TrainConfig(batch_size=1)
