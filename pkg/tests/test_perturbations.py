from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deepattrib.attribution import ReconstructionConfig
from deepattrib.distance import FeatureExtractor, distance
from deepattrib.generators import GeneratorArch, build_generator, generate_batch
from deepattrib.perturbations import (
    AUGMENTATIONS,
    AttackConfig,
    AugmentationSpec,
    ClassifierConfig,
    apply_attack,
    attack_classifier,
    augment,
    augment_batch,
    classifier_logits,
    cw_image,
    enforce_linf,
    fgsm_image,
    fgsm_seed,
    jpeg_like_compress,
    predict,
    quant_table,
    rotate,
    softmax,
    train_substitute,
    transfer_attack_eval,
)
from deepattrib.tensor import Tensor
from deepattrib.training import ToyDatasetSpec, make_toy_dataset

FX = FeatureExtractor.default()
SMALL = GeneratorArch(seed_dim=16, base_shape=(8, 8, 8), widths=(4, 1))


def smooth_image(seed: int, shape=(1, 32, 32)) -> np.ndarray:
    """Blobby image in [0.1, 0.9]; smooth content keeps compression error small."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0 : shape[1], 0 : shape[2]] / shape[1]
    x = sum(rng.uniform(0.2, 0.5) * np.sin(rng.uniform(1, 6) * xx + rng.uniform(0, 6)) * np.cos(rng.uniform(1, 6) * yy) for _ in range(3))
    x = (x - x.min()) / (np.ptp(x) + 1e-9) * 0.8 + 0.1
    return np.broadcast_to(x, shape).astype(np.float32).copy()


@pytest.fixture(scope="module")
def faces():
    return make_toy_dataset(ToyDatasetSpec(count=8, seed=1))[0]


@pytest.fixture(scope="module")
def g():
    return build_generator(SMALL, 3)


@pytest.fixture(scope="module")
def data():
    a = make_toy_dataset(ToyDatasetSpec(count=96, seed=2))[0]
    b = make_toy_dataset(ToyDatasetSpec(kind="two-class-digits", count=96, seed=2))[0]
    x = np.concatenate([a, b])
    y = np.array([0] * 96 + [1] * 96)
    order = np.random.default_rng(0).permutation(len(x))
    return x[order], y[order]


@pytest.fixture(scope="module")
def clf(data):
    x, y = data
    return train_substitute(x[:160], y[:160], x[160:], y[160:], 2, ClassifierConfig(channels=(4, 8, 8, 8), epochs=3, batch_size=32))


class TestAugment:
    @pytest.mark.parametrize("kind", AUGMENTATIONS)
    def test_shape_range_determinism(self, kind, faces):
        x = faces[0]
        a = augment(x, AugmentationSpec(kind, 5))
        b = augment(x, AugmentationSpec(kind, 5))
        assert a.shape == x.shape and a.dtype == np.float32
        assert a.min() >= 0 and a.max() <= 1
        assert a.tobytes() == b.tobytes()

    def test_mirror_involution(self, faces):
        x = faces[1]
        once = augment(x, AugmentationSpec("mirror"))
        assert np.array_equal(once, x[..., ::-1])
        assert augment(once, AugmentationSpec("mirror")).tobytes() == x.tobytes()

    def test_noise_half_normal_mean(self):
        # E|N(0, 0.1)| = 0.1 * sqrt(2 / pi); keep pixels away from the clamp
        x = np.full((1, 256, 256), 0.5, np.float32)
        y = augment(x, AugmentationSpec("gaussian-noise", 3))
        assert abs(np.mean(np.abs(y - x)) - 0.1 * np.sqrt(2 / np.pi)) < 0.01

    def test_rotate_zero_is_identity(self, faces):
        assert np.max(np.abs(rotate(faces[2], 0.0) - faces[2])) < 1e-6

    def test_rotate_constant_image(self):
        x = np.full((1, 16, 16), 0.3)
        np.testing.assert_allclose(rotate(x, 4.0), x, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AugmentationSpec("sepia")

    def test_blur_keeps_constant_and_smooths(self, faces):
        x = faces[3]
        y = augment(x, AugmentationSpec("gaussian-blur", 0))
        assert np.abs(np.diff(y, axis=-1)).mean() < np.abs(np.diff(x, axis=-1)).mean()
        flat = np.full((1, 32, 32), 0.4, np.float32)
        np.testing.assert_allclose(augment(flat, AugmentationSpec("gaussian-blur", 0)), flat, atol=1e-6)

    def test_batch_uses_distinct_seeds(self):
        xs = np.full((3, 1, 32, 32), 0.5, np.float32)
        out = augment_batch(xs, "gaussian-noise", 0)
        assert not np.array_equal(out[0], out[1])
        assert out.tobytes() == augment_batch(xs, "gaussian-noise", 0).tobytes()


class TestCompression:
    @pytest.mark.parametrize("bad", [0, 101, 50.0, -3])
    def test_invalid_quality(self, bad):
        with pytest.raises(ValueError):
            jpeg_like_compress(np.zeros((1, 8, 8)), bad)

    def test_quality_50_is_base_table(self):
        assert quant_table(50)[0, 0] == 16 and quant_table(50)[7, 7] == 99
        assert np.all(quant_table(100) == 1)

    @pytest.mark.parametrize("k", range(3))
    def test_q100_error_floor(self, k):
        x = smooth_image(k)
        assert np.max(np.abs(jpeg_like_compress(x, 100) - x)) < 0.02

    @pytest.mark.parametrize("q", [50, 70, 90])
    def test_nearly_idempotent(self, q):
        once = jpeg_like_compress(smooth_image(4), q)
        assert np.mean(np.abs(jpeg_like_compress(once, q) - once)) < 0.01

    def test_error_grows_as_quality_drops(self):
        x = smooth_image(5)
        errs = [np.mean(np.abs(jpeg_like_compress(x, q) - x)) for q in (100, 70, 10)]
        assert errs[0] < errs[1] < errs[2]

    def test_non_multiple_of_eight(self):
        x = smooth_image(6, (1, 20, 13))
        y = jpeg_like_compress(x, 90)
        assert y.shape == x.shape and np.max(np.abs(y - x)) < 0.1

    def test_batches_match_singles(self):
        xs = np.stack([smooth_image(k) for k in range(2)])
        y = jpeg_like_compress(xs, 70)
        assert np.array_equal(y[1], jpeg_like_compress(xs[1], 70))


class TestEnforceLinf:
    @settings(max_examples=300, deadline=None)
    @given(
        arrays(np.float32, 16, elements=st.floats(0, 1, width=32)),
        arrays(np.float32, 16, elements=st.floats(-2, 2, width=32)),
        st.floats(0, 0.5),
    )
    def test_bound_and_range(self, x, adv, eps):
        out = enforce_linf(x, adv, eps)
        assert out.dtype == np.float32
        assert np.all(np.abs(out.astype(np.float64) - x) <= eps)
        assert out.min() >= 0 and out.max() <= 1


class TestFGSMImage:
    def test_eps_zero_identity(self, faces):
        assert np.array_equal(fgsm_image(FX, faces[0], 0.0), faces[0])

    def test_negative_eps(self, faces):
        with pytest.raises(ValueError):
            fgsm_image(FX, faces[0], -0.1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 7), st.floats(1e-4, 0.3), st.integers(0, 2**31 - 1))
    def test_linf_bound_and_range(self, k, eps, seed):
        x = make_toy_dataset(ToyDatasetSpec(count=8, seed=1))[0][k]
        adv = fgsm_image(FX, x, eps, seed=seed)
        assert np.max(np.abs(adv.astype(np.float64) - x)) <= eps
        assert adv.min() >= 0 and adv.max() <= 1

    def test_increases_feature_distance(self, faces):
        d = [distance("l2-feature", fgsm_image(FX, faces[1], e), faces[1]) for e in (0.01, 0.05, 0.1)]
        assert 0 < d[0] < d[1] < d[2]

    def test_l2_step_length(self, faces):
        x = np.full((1, 32, 32), 0.5, np.float32) + faces[0] * 0.1
        adv = fgsm_image(FX, x, 0.5, norm="l2")
        assert np.sqrt(np.sum((adv.astype(np.float64) - x) ** 2)) == pytest.approx(0.5, rel=1e-3)

    def test_batch_shape(self, faces):
        assert fgsm_image(FX, faces[:3], 0.02).shape == (3, 1, 32, 32)


class TestFGSMSeed:
    def test_eps_zero_identity(self, g):
        s = np.random.default_rng(0).standard_normal(16, dtype=np.float32)
        assert np.array_equal(fgsm_seed(g, FX, s, 0.0), generate_batch(g, s[None])[0])

    @pytest.mark.parametrize("k", range(3))
    def test_distance_non_decreasing_over_ladder(self, g, k):
        s = np.random.default_rng(k).standard_normal(16, dtype=np.float32)
        x = generate_batch(g, s[None])[0]
        d = [distance("l2-feature", fgsm_seed(g, FX, s, e), x) for e in (0.0169, 0.039, 0.078, 0.196)]
        assert all(b >= a for a, b in zip(d, d[1:])), d

    def test_apply_attack_needs_generator(self, faces):
        with pytest.raises(ValueError):
            apply_attack(AttackConfig("fgsm-seed", epsilon=0.1), faces[:1], FX)


class TestCW:
    def test_tiny_c_barely_moves(self, faces):
        res = cw_image(FX, faces[0], c=1e-6, steps=50, lr=0.01)
        assert res.delta_norms[0] < 1e-3 and not res.diverged

    def test_norm_grows_with_c(self, faces):
        norms = [cw_image(FX, faces[2], c=c, steps=60, lr=0.01).delta_norms[0] for c in (0.1, 1.0, 10.0)]
        assert norms[0] < norms[1] < norms[2], norms

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 7), st.floats(0.01, 20.0), st.integers(0, 1000))
    def test_output_in_unit_range(self, k, c, seed):
        x = make_toy_dataset(ToyDatasetSpec(count=8, seed=1))[0][k]
        res = cw_image(FX, x, c=c, steps=5, lr=0.05, seed=seed)
        assert res.images.min() >= 0 and res.images.max() <= 1

    def test_invalid_c(self, faces):
        with pytest.raises(ValueError):
            cw_image(FX, faces[0], c=0.0)

    @pytest.mark.parametrize("bad", [{"attack": "pgd"}, {"attack": "cw-image", "c": 0}, {"attack": "fgsm-image", "epsilon": -1}, {"attack": "fgsm-image", "norm": "l1"}])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


class TestSubstituteClassifier:
    def test_learns_easy_split(self, clf):
        assert clf.test_accuracy >= 0.9

    def test_softmax_sums_to_one(self, clf, data):
        p = softmax(classifier_logits(clf, Tensor(data[0][:10])).data)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)

    def test_deterministic(self, data, clf):
        x, y = data
        again = train_substitute(x[:160], y[:160], x[160:], y[160:], 2, ClassifierConfig(channels=(4, 8, 8, 8), epochs=3, batch_size=32))
        assert all(np.array_equal(clf.params[k], again.params[k]) for k in clf.params)

    def test_single_class(self, data):
        x = data[0][:4]
        clf = train_substitute(x, np.zeros(4, int), x, np.zeros(4, int), 1)
        assert clf.test_accuracy == 1.0 and np.all(predict(clf, x) == 0)

    def test_fgsm_respects_bound(self, clf, data):
        x, y = data
        adv = attack_classifier(clf, x[:8], y[:8], AttackConfig("fgsm-image", epsilon=0.03))
        assert np.max(np.abs(adv.astype(np.float64) - x[:8])) <= 0.03

    def test_cw_fools_classifier(self, clf, data):
        x, y = data
        adv = attack_classifier(clf, x[:8], y[:8], AttackConfig("cw-image", c=10.0, steps=100, lr=0.01))
        assert adv.min() >= 0 and adv.max() <= 1
        assert np.mean(predict(clf, adv) == y[:8]) <= 0.25

    def test_cw_keeps_smallest_fooling_delta(self, clf, data):
        x, y = data
        norm = lambda a: np.sqrt(np.sum((a.astype(np.float64) - x[:8]) ** 2, axis=(1, 2, 3)))  # noqa: E731
        short = attack_classifier(clf, x[:8], y[:8], AttackConfig("cw-image", c=10.0, steps=40, lr=0.01))
        long = attack_classifier(clf, x[:8], y[:8], AttackConfig("cw-image", c=10.0, steps=100, lr=0.01))
        fooled = predict(clf, short) != y[:8]
        assert np.all(predict(clf, long)[fooled] != y[:8][fooled])
        assert np.all(norm(long)[fooled] <= norm(short)[fooled])

    def test_transfer_eval(self, clf, data):
        x, y = data
        pool = {"g0": build_generator(SMALL, 0), "g1": build_generator(SMALL, 1)}
        rep = transfer_attack_eval(clf, AttackConfig("fgsm-image", epsilon=0.0), pool, x[:2], y[:2], ReconstructionConfig(steps=2, attempts=1))
        assert rep.clf_accuracy == rep.clf_accuracy_clean
        assert rep.attribution_accuracy == rep.attribution_accuracy_clean
        assert rep.mean_ssim == 1.0 and rep.mean_delta_norm == 0.0
