"""Image distances: raw pixel l2, l2 over frozen conv features, and SSIM."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deepattrib import ops
from deepattrib.tensor import Tensor

FEATURE_SEED = 20210120
# SHA-256 over the extractor's little-endian f32 weights; guards against drift
FEATURE_DIGEST = "e46fc486b783e2e3688d78f2243bf6ff12b24b4cc3bd6f36427f0241252e61c5"


class DistanceKind(str, Enum):
    RAW_L2 = "raw-l2"
    L2_FEATURE = "l2-feature"


@dataclass(frozen=True)
class FeatureExtractor:
    """Three stride-2 3x3 conv + relu layers, 1 -> 8 -> 16 -> 32 channels."""

    weights: tuple[np.ndarray, ...]
    input_size: tuple[int, int] = (32, 32)

    @classmethod
    def default(cls) -> "FeatureExtractor":
        return _DEFAULT

    def digest(self) -> str:
        h = hashlib.sha256()
        for w in self.weights:
            h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
        return h.hexdigest()

    @property
    def output_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        for _ in self.weights:
            h, w = (h + 1) // 2, (w + 1) // 2
        return (self.weights[-1].shape[0], h, w)


def _build_default() -> FeatureExtractor:
    rng = np.random.default_rng(FEATURE_SEED)
    ws = []
    for cin, cout in [(1, 8), (8, 16), (16, 32)]:
        w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        w = w.astype(np.float32)
        w.setflags(write=False)
        ws.append(w)
    return FeatureExtractor(tuple(ws))


_DEFAULT = _build_default()


def check_extractor(fx: FeatureExtractor | None = None) -> None:
    fx = fx or _DEFAULT
    if fx.digest() != FEATURE_DIGEST:
        raise RuntimeError(f"feature extractor digest {fx.digest()} != pinned {FEATURE_DIGEST}")


def _as_batch(x: Tensor) -> Tensor:
    return ops.reshape(x, (1, *x.shape)) if x.data.ndim == 3 else x


def to_luminance(x: Tensor) -> Tensor:
    """Average RGB channels; single-channel input passes through."""
    if x.shape[1] == 1:
        return x
    return ops.reshape(ops.mean(x, axis=1), (x.shape[0], 1, *x.shape[2:]))


def extract_features(fx: FeatureExtractor, x: Tensor) -> Tensor:
    """Features of an image (C, H, W) or batch (N, C, H, W); keeps the batch shape."""
    single = x.data.ndim == 3
    h = to_luminance(_as_batch(x))
    h = ops.resize_bilinear(h, fx.input_size)
    if tuple(h.shape[2:]) != fx.input_size:
        raise ValueError(f"extractor expects {fx.input_size}, got {h.shape[2:]}")
    for w in fx.weights:
        h = ops.relu(ops.conv2d(h, Tensor(w, dtype=h.dtype), stride=2, padding=1))
    return ops.reshape(h, h.shape[1:]) if single else h


def batch_distance(kind: DistanceKind | str, a: Tensor, b: Tensor, fx: FeatureExtractor | None = None, b_features: Tensor | None = None) -> Tensor:
    """Per-sample distances (N,) between two image batches; differentiable in both.

    ``b_features`` lets callers pass precomputed (constant) features of ``b``.
    """
    kind = DistanceKind(kind)
    if kind is DistanceKind.RAW_L2:
        if a.shape != b.shape:
            raise ValueError(f"distance: shapes {a.shape} and {b.shape} differ")
        diff = ops.sub(a, b)
    else:
        fx = fx or _DEFAULT
        fb = b_features if b_features is not None else extract_features(fx, b)
        fa = extract_features(fx, a)
        if fa.shape != fb.shape:
            raise ValueError(f"distance: feature shapes {fa.shape} and {fb.shape} differ")
        diff = ops.sub(fa, fb)
    return ops.sqrt(ops.l2_norm_sq(diff, axis=tuple(range(1, diff.data.ndim))))


def distance(kind: DistanceKind | str, a, b, fx: FeatureExtractor | None = None) -> float:
    """Distance between two single images (C, H, W)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"distance: shapes {a.shape} and {b.shape} differ")
    return float(batch_distance(kind, _as_batch(a), _as_batch(b), fx).data[0])


def ssim(a, b, window: int = 7, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` uniform windows."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 3:
        a, b = a.mean(axis=0), b.mean(axis=0)
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
