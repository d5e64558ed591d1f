from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate2d
from skimage.metrics import structural_similarity

from deepattrib import ops
from deepattrib.distance import (
    FEATURE_DIGEST,
    DistanceKind,
    FeatureExtractor,
    batch_distance,
    check_extractor,
    distance,
    extract_features,
    ssim,
)
from deepattrib.gradcheck import check_gradients
from deepattrib.tensor import Tensor

FX = FeatureExtractor.default()
KINDS = [DistanceKind.RAW_L2, DistanceKind.L2_FEATURE]

images = arrays(np.float32, (1, 32, 32), elements=st.floats(0, 1, width=32))


def rand_image(seed, shape=(1, 32, 32)):
    return np.random.default_rng(seed).uniform(0, 1, shape).astype(np.float32)


def reference_features(x: np.ndarray) -> np.ndarray:
    """Stride-2, pad-1 3x3 correlation + relu per layer, via scipy in float64."""
    h = x.astype(np.float64)
    for w in FX.weights:
        padded = np.pad(h, ((0, 0), (1, 1), (1, 1)))
        out = []
        for co in range(w.shape[0]):
            acc = sum(correlate2d(padded[ci], w[co, ci], mode="valid") for ci in range(w.shape[1]))
            out.append(acc[::2, ::2])
        h = np.maximum(np.stack(out), 0.0)
    return h


class TestExtractor:
    def test_pinned_digest(self):
        assert FX.digest() == FEATURE_DIGEST
        check_extractor()

    def test_output_shape(self):
        assert extract_features(FX, Tensor(rand_image(0))).shape == (32, 4, 4)
        assert FX.output_shape == (32, 4, 4)

    def test_matches_scipy_reference(self):
        x = rand_image(1)
        np.testing.assert_allclose(extract_features(FX, Tensor(x)).data, reference_features(x), rtol=1e-4, atol=1e-5)

    def test_deterministic(self):
        x = Tensor(rand_image(2))
        assert extract_features(FX, x).data.tobytes() == extract_features(FX, x).data.tobytes()

    def test_resizes_other_resolutions(self):
        assert extract_features(FX, Tensor(rand_image(3, (1, 16, 16)))).shape == (32, 4, 4)

    def test_rgb_averaged(self):
        x = rand_image(4, (3, 32, 32))
        gray = x.mean(axis=0, keepdims=True)
        np.testing.assert_allclose(extract_features(FX, Tensor(x)).data, extract_features(FX, Tensor(gray)).data, atol=1e-5)

    def test_gradient(self):
        x0 = np.random.default_rng(5).uniform(0.2, 0.8, (1, 1, 12, 12))
        probe = Tensor(np.random.default_rng(6).normal(size=(1, 32, 4, 4)), np.float64)
        # float64 with a small step so no probe crosses a relu kink
        errs = check_gradients(lambda x: ops.sum(ops.elementwise_mul(extract_features(FX, x), probe)), [x0], h=1e-6)
        assert max(errs) < 1e-4


class TestDistance:
    @pytest.mark.parametrize("kind", KINDS)
    def test_identity(self, kind):
        x = rand_image(7)
        assert distance(kind, x, x) == 0.0

    def test_raw_l2_analytic(self):
        assert distance("raw-l2", np.zeros((1, 32, 32)), np.ones((1, 32, 32))) == pytest.approx(32.0)

    def test_feature_l2_matches_reference(self):
        a, b = rand_image(8), rand_image(9)
        expected = np.linalg.norm(reference_features(a) - reference_features(b))
        assert distance("l2-feature", a, b) == pytest.approx(expected, rel=1e-4)

    @pytest.mark.parametrize("kind", KINDS)
    def test_shape_mismatch(self, kind):
        with pytest.raises(ValueError):
            distance(kind, rand_image(0), rand_image(0, (1, 16, 16)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            distance("cosine", rand_image(0), rand_image(1))

    def test_batch_matches_single(self):
        a = np.stack([rand_image(k) for k in range(4)])
        b = np.stack([rand_image(10 + k) for k in range(4)])
        d = batch_distance("l2-feature", Tensor(a), Tensor(b)).data
        for k in range(4):
            assert d[k] == pytest.approx(distance("l2-feature", a[k], b[k]), rel=1e-5)

    def test_precomputed_features(self):
        a, b = Tensor(rand_image(1)[None]), Tensor(rand_image(2)[None])
        fb = extract_features(FX, b)
        assert batch_distance("l2-feature", a, None, b_features=fb).data[0] == batch_distance("l2-feature", a, b).data[0]

    @settings(max_examples=40, deadline=None)
    @given(images, images, images)
    def test_metric_properties(self, a, b, c):
        for kind in KINDS:
            ab, ba = distance(kind, a, b), distance(kind, b, a)
            assert ab >= 0
            assert ab == pytest.approx(ba, rel=1e-5, abs=1e-6)
            assert distance(kind, a, c) <= ab + distance(kind, b, c) + 1e-4


class TestSSIM:
    def test_self_is_one(self):
        x = rand_image(11)
        assert ssim(x, x) == 1.0

    def test_matches_skimage(self):
        a, b = rand_image(12)[0], rand_image(13)[0]
        ref = structural_similarity(a.astype(np.float64), b.astype(np.float64), win_size=7, data_range=1.0, gaussian_weights=False, use_sample_covariance=False)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_binary_inverse_negative(self):
        x = (np.indices((32, 32)).sum(axis=0) % 2).astype(np.float64)[None]
        # Direct evaluation: every window has mean ~0.5, var ~0.25, and cov = -var.
        assert ssim(x, 1 - x) < 0

    def test_noise_ordering(self):
        x = np.clip(rand_image(14) * 0.5 + 0.25, 0, 1)
        rng = np.random.default_rng(0)
        noise = rng.standard_normal(x.shape)
        vals = [ssim(x, np.clip(x + s * noise, 0, 1)) for s in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((1, 5, 5)), np.zeros((1, 5, 5)))

    @settings(max_examples=50, deadline=None)
    @given(images, images)
    def test_bounded(self, a, b):
        assert -1.0 - 1e-9 <= ssim(a, b) <= 1.0 + 1e-9
