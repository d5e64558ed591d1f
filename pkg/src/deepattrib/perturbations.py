"""Post-generation manipulations: augmentations, block-DCT compression,
gradient attacks on the feature distance, and a substitute classifier for
transfer attacks.

Images are numpy arrays in [0, 1], either one image (C, H, W) or a batch
(N, C, H, W). Every function here returns new arrays and is deterministic
given its seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from deepattrib import ops
from deepattrib.attribution import ReconstructionConfig, distance_tensor
from deepattrib.distance import DistanceKind, FeatureExtractor, batch_distance, extract_features, ssim
from deepattrib.generators import GeneratorModel, NoiseInput, synthesize
from deepattrib.optim import AdamState, adam_step
from deepattrib.primitives import bilinear_matrix
from deepattrib.tensor import Tape, Tensor, gradients

log = logging.getLogger(__name__)

AUGMENTATIONS = ("identity", "gaussian-blur", "gaussian-noise", "mirror", "random-crop", "random-rotate", "zoom-in")
ATTACKS = ("fgsm-seed", "fgsm-image", "fgm-l2-image", "cw-image")
# random start scale for attacks whose objective has zero gradient at the clean point
START_SCALE = 1e-3
CW_START_SCALE = 1e-5
CW_KAPPA = 1.0  # logit margin the classifier-side CW attack aims for


class AttackError(RuntimeError):
    pass


# --- augmentations ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.kind!r}; expected one of {AUGMENTATIONS}")


def _gaussian_kernel(size: int) -> np.ndarray:
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8  # the usual sigma for a given kernel size
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur(x: np.ndarray, size: int) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, edge-replicated border."""
    k = _gaussian_kernel(size)
    p = size // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x.astype(np.float64), pad, mode="edge")
    h, w = x.shape[-2:]
    rows = sum(k[i] * xp[..., i : i + h, :] for i in range(size))
    return sum(k[i] * rows[..., :, i : i + w] for i in range(size))


def resize(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centers)."""
    mh = bilinear_matrix(size[0], x.shape[-2])
    mw = bilinear_matrix(size[1], x.shape[-1])
    return np.einsum("ih,...hw,jw->...ij", mh, x.astype(np.float64), mw)


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; bilinear sampling, edge padding."""
    h, w = x.shape[-2:]
    th = math.radians(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    # inverse map: output pixel -> source coordinate
    sy = cy + (yy - cy) * math.cos(th) - (xx - cx) * math.sin(th)
    sx = cx + (yy - cy) * math.sin(th) + (xx - cx) * math.cos(th)
    sy, sx = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    v = x.astype(np.float64)
    return (
        v[..., y0, x0] * (1 - fy) * (1 - fx)
        + v[..., y0, x1] * (1 - fy) * fx
        + v[..., y1, x0] * fy * (1 - fx)
        + v[..., y1, x1] * fy * fx
    )


def _crop_resize(x, top, left, ch, cw):
    h, w = x.shape[-2:]
    return resize(x[..., top : top + ch, left : left + cw], (h, w))


def augment(x, spec: AugmentationSpec) -> np.ndarray:
    """Apply one augmentation to an image (C, H, W); output keeps the shape."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    rng = np.random.default_rng(spec.seed)
    h, w = x.shape[-2:]
    kind = spec.kind
    if kind == "identity":
        return x.copy()
    if kind == "mirror":
        return x[..., ::-1].copy()
    if kind == "gaussian-blur":
        y = gaussian_blur(x, int(rng.choice([3, 5, 7])))
    elif kind == "gaussian-noise":
        y = x + rng.normal(0.0, math.sqrt(0.01), x.shape)
    elif kind == "random-crop":
        frac = rng.uniform(0.9, 1.0)
        ch, cw = max(1, round(h * frac)), max(1, round(w * frac))
        top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        y = _crop_resize(x, top, left, ch, cw)
    elif kind == "random-rotate":
        y = rotate(x, float(rng.uniform(0, 5) * rng.choice([-1, 1])))
    else:  # zoom-in
        ch, cw = round(h * 0.9), round(w * 0.9)
        y = _crop_resize(x, (h - ch) // 2, (w - cw) // 2, ch, cw)
    return np.clip(y, 0, 1).astype(np.float32)


def augment_batch(xs: np.ndarray, kind: str, seed: int) -> np.ndarray:
    """Augment each image with its own derived seed."""
    ss = np.random.SeedSequence(seed).spawn(len(xs))
    return np.stack([augment(x, AugmentationSpec(kind, int(s.generate_state(1)[0]))) for x, s in zip(xs, ss)])


# --- block-DCT compression ------------------------------------------------------

LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2 / n)
    m[0] /= math.sqrt(2)
    return m


_DCT = _dct_matrix()


def quant_table(quality: int) -> np.ndarray:
    """Standard luminance table scaled by the libjpeg quality convention."""
    if not (isinstance(quality, (int, np.integer)) and 1 <= quality <= 100):
        raise ValueError(f"quality must be an integer in [1, 100], got {quality!r}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50) / 100), 1, 255)


def jpeg_like_compress(x, quality: int) -> np.ndarray:
    """8x8 block DCT, quantize, dequantize, inverse DCT, round to 8-bit levels.

    Works per channel on (C, H, W) or (N, C, H, W); sides that are not a
    multiple of 8 are reflect-padded and cropped back.
    """
    q = quant_table(quality)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    h, w = x.shape[-2:]
    ph, pw = -h % 8, -w % 8
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    v = np.pad(x, pad, mode="reflect" if ph or pw else "constant") * 255.0 - 128.0
    lead = v.shape[:-2]
    bh, bw = v.shape[-2] // 8, v.shape[-1] // 8
    blocks = v.reshape(*lead, bh, 8, bw, 8)
    coef = np.einsum("ui,...aibj,vj->...aubv", _DCT, blocks, _DCT)
    coef = np.round(coef / q[:, None, :]) * q[:, None, :]
    back = np.einsum("ui,...aubv,vj->...aibj", _DCT, coef, _DCT).reshape(v.shape)
    out = np.clip(np.round(back + 128.0), 0, 255) / 255.0
    return out[..., :h, :w].astype(np.float32)


# --- attacks on the feature distance -------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    attack: str
    epsilon: float = 0.0
    c: float = 1.0
    steps: int = 100
    lr: float = 0.01
    norm: str = "linf"
    clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.epsilon < 0 or self.c <= 0 or self.steps < 0:
            raise ValueError("need epsilon >= 0, c > 0, steps >= 0")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")


def _batched(x) -> tuple[np.ndarray, bool]:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    return (a[None], True) if a.ndim == 3 else (a, False)


def _feature_grad(fx: FeatureExtractor, start: np.ndarray, reference_features: Tensor) -> np.ndarray:
    with Tape() as tape:
        xv = tape.watch(Tensor(start))
        d = batch_distance(DistanceKind.L2_FEATURE, xv, None, fx, b_features=reference_features)
        loss = ops.sum(d)
    (g,) = gradients(tape, loss, [xv])
    if not np.all(np.isfinite(g.data)):
        raise AttackError("non-finite gradient")
    return g.data


def enforce_linf(x: np.ndarray, adv: np.ndarray, eps: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Round-trip-safe projection: float32 output whose |adv - x| <= eps holds in exact arithmetic."""
    x64 = x.astype(np.float64)
    out = np.clip(np.clip(adv.astype(np.float64), x64 - eps, x64 + eps), lo, hi).astype(np.float32)
    for _ in range(4):  # float32 rounding can overshoot by an ulp
        over = np.abs(out.astype(np.float64) - x64) > eps
        if not over.any():
            break
        out = np.where(over, np.nextafter(out, x), out)
    out = np.clip(out, np.float32(lo), np.float32(hi))
    return out


def fgsm_image(fx: FeatureExtractor, x, eps: float, norm: str = "linf", seed: int = 0, clamp=(0.0, 1.0)) -> np.ndarray:
    """One gradient step that increases the feature distance from ``x``.

    The gradient is taken at a tiny random offset of ``x`` (the distance is
    not differentiable at zero), with the original features held constant.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    xb, single = _batched(x)
    if eps == 0:
        return x.copy() if not single else xb[0].copy()
    rng = np.random.default_rng(seed)
    ref = Tensor._wrap(np.array(extract_features(fx, Tensor(xb)).data))
    start = np.clip(xb + rng.uniform(-START_SCALE, START_SCALE, xb.shape).astype(np.float32), *clamp)
    g = _feature_grad(fx, start, ref)
    if norm == "linf":
        out = enforce_linf(xb, xb + eps * np.sign(g), eps, *clamp)
    elif norm == "l2":
        n = np.sqrt(np.sum(g.astype(np.float64) ** 2, axis=(1, 2, 3), keepdims=True))
        out = np.clip(xb + eps * g / np.maximum(n, 1e-12), *clamp).astype(np.float32)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out[0] if single else out


def fgsm_seed(
    g: GeneratorModel,
    fx: FeatureExtractor,
    s,
    eps: float,
    r: NoiseInput | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Step the seed(s) by ``eps * sign(grad)`` away from the original output.

    ``s`` is (d,) or (N, d); returns the generated image(s) at the new seed.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float32)
    single = s.ndim == 1
    sb = s[None] if single else s
    orig = synthesize(g, Tensor(sb), r).data
    if eps == 0:
        return orig[0] if single else orig
    ref = Tensor._wrap(np.array(extract_features(fx, Tensor(orig)).data))
    rng = np.random.default_rng(seed)
    start = sb + rng.uniform(-START_SCALE, START_SCALE, sb.shape).astype(np.float32)
    with Tape() as tape:
        sv = tape.watch(Tensor(start))
        d = batch_distance(DistanceKind.L2_FEATURE, synthesize(g, sv, r), None, fx, b_features=ref)
        loss = ops.sum(d)
    (grad,) = gradients(tape, loss, [sv])
    if not np.all(np.isfinite(grad.data)):
        raise AttackError("non-finite seed gradient")
    s_adv = sb + np.float32(eps) * np.sign(grad.data)
    out = synthesize(g, Tensor(s_adv), r).data
    return out[0] if single else out


@dataclass
class CWResult:
    images: np.ndarray
    delta_norms: np.ndarray
    diverged: bool = False


def cw_image_objective(fx: FeatureExtractor, x: Tensor, delta: Tensor, reference_features: Tensor, c: float) -> Tensor:
    """Per-row ``||delta||_2 - c * d_f(x + delta, x)``."""
    dist = batch_distance(DistanceKind.L2_FEATURE, ops.add(x, delta), None, fx, b_features=reference_features)
    return ops.sub(ops.l2_norm(delta, axis=(1, 2, 3)), ops.scale(dist, c))


def cw_image(fx: FeatureExtractor, x, c: float, steps: int = 200, lr: float = 0.01, seed: int = 0) -> CWResult:
    """Adam on ``||delta||_2 - c * d_f(x + delta, x)``, projecting x + delta into [0, 1] each step.

    Rows of a batch are optimized independently. Each row returns its
    lowest-objective iterate (the final one is included), so a weak ``c``
    cannot leave behind Adam's jitter around zero.
    """
    if c <= 0:
        raise ValueError("c must be > 0")
    xb, single = _batched(x)
    rng = np.random.default_rng(seed)
    ref = Tensor._wrap(np.array(extract_features(fx, Tensor(xb)).data))
    delta = np.clip(xb + rng.uniform(-CW_START_SCALE, CW_START_SCALE, xb.shape).astype(np.float32), 0, 1) - xb
    state = AdamState.zeros_like(delta, lr=lr)
    best, best_obj = delta.copy(), np.full(len(xb), np.inf)
    diverged = False
    for step in range(steps + 1):
        with Tape() as tape:
            dv = tape.watch(Tensor(delta))
            obj = cw_image_objective(fx, Tensor(xb), dv, ref, c)
            loss = ops.sum(obj)
        (g,) = gradients(tape, loss, [dv])
        if not (np.all(np.isfinite(g.data)) and np.all(np.isfinite(obj.data))):
            diverged = True
            log.warning("cw_image diverged; returning best iterate so far")
            break
        better = obj.data < best_obj
        best[better], best_obj[better] = delta[better], obj.data[better]
        if step == steps:
            break
        t, state = adam_step(state, Tensor(delta), g)
        delta = (np.clip(xb + t.data, 0, 1) - xb).astype(np.float32)
    images = np.clip(xb + best, 0, 1).astype(np.float32)
    norms = np.sqrt(np.sum((images.astype(np.float64) - xb) ** 2, axis=(1, 2, 3)))
    if single:
        return CWResult(images[0], norms, diverged)
    return CWResult(images, norms, diverged)


def apply_attack(
    cfg: AttackConfig,
    images: np.ndarray,
    fx: FeatureExtractor,
    generator: GeneratorModel | None = None,
    seeds: np.ndarray | None = None,
    noise: NoiseInput | None = None,
) -> np.ndarray:
    """Dispatch an :class:`AttackConfig` over a batch (fgsm-seed needs the generator and seeds)."""
    if cfg.attack == "fgsm-seed":
        if generator is None or seeds is None:
            raise ValueError("fgsm-seed needs the generator and original seeds")
        return fgsm_seed(generator, fx, seeds, cfg.epsilon, noise, cfg.seed)
    if cfg.attack == "fgsm-image":
        return fgsm_image(fx, images, cfg.epsilon, cfg.norm, cfg.seed, cfg.clamp)
    if cfg.attack == "fgm-l2-image":
        return fgsm_image(fx, images, cfg.epsilon, "l2", cfg.seed, cfg.clamp)
    return cw_image(fx, images, cfg.c, cfg.steps, cfg.lr, cfg.seed).images


# --- substitute classifier -------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    channels: tuple[int, ...] = (8, 16, 32, 32)
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


@dataclass
class SubstituteClassifier:
    """Four 3x3 conv + relu layers (stride 1, 2, 2, 2) and a dense head over |G| classes."""

    n_classes: int
    image_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]
    channels: tuple[int, ...] = (8, 16, 32, 32)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    history: list[float] = field(default_factory=list)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}


def _clf_init(n_classes, image_shape, channels, rng) -> dict[str, np.ndarray]:
    p = {}
    cin, h, w = image_shape
    for i, cout in enumerate(channels):
        p[f"conv{i}.weight"] = (rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2 / (cin * 9))).astype(np.float32)
        p[f"conv{i}.bias"] = np.zeros(cout, np.float32)
        if i > 0:
            h, w = (h + 1) // 2, (w + 1) // 2
        cin = cout
    p["head.weight"] = (rng.standard_normal((cin * h * w, n_classes)) * math.sqrt(1 / (cin * h * w))).astype(np.float32)
    p["head.bias"] = np.zeros(n_classes, np.float32)
    return p


def classifier_logits(clf: SubstituteClassifier, x: Tensor, params=None) -> Tensor:
    p = params if params is not None else clf.tensors()
    h = x
    for i in range(len(clf.channels)):
        h = ops.conv2d(h, p[f"conv{i}.weight"], 1 if i == 0 else 2, 1)
        h = ops.relu(ops.channel_bias(h, p[f"conv{i}.bias"]))
    h = ops.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    return ops.linear(h, p["head.weight"], p["head.bias"])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy (N,) from logits and integer labels."""
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return ops.scale(ops.sum(ops.elementwise_mul(ops.log_softmax(logits, axis=1), Tensor(onehot, dtype=logits.dtype)), axis=1), -1.0)


def predict(clf: SubstituteClassifier, images: np.ndarray, batch: int = 512) -> np.ndarray:
    out = [classifier_logits(clf, Tensor(images[i : i + batch])).data.argmax(1) for i in range(0, len(images), batch)]
    return np.concatenate(out)


def train_substitute(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
    cfg: ClassifierConfig = ClassifierConfig(),
) -> SubstituteClassifier:
    """Mini-batch Adam on cross-entropy; reports train/test accuracy."""
    rng = np.random.default_rng(cfg.seed)
    image_shape = tuple(train_x.shape[1:])
    params = _clf_init(n_classes, image_shape, cfg.channels, rng)
    clf = SubstituteClassifier(n_classes, image_shape, params, cfg.channels)
    if n_classes == 1:
        clf.train_accuracy = clf.test_accuracy = 1.0
        return clf
    states = {k: AdamState.zeros_like(v, lr=cfg.lr) for k, v in params.items()}
    names = list(params)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_x))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            with Tape() as tape:
                pt = {k: tape.watch(Tensor(params[k])) for k in names}
                loss = ops.mean(cross_entropy(classifier_logits(clf, Tensor(train_x[idx]), pt), train_y[idx]))
            grads = gradients(tape, loss, [pt[k] for k in names])
            for k, g in zip(names, grads):
                t, states[k] = adam_step(states[k], Tensor(params[k]), g)
                params[k] = t.data
            clf.history.append(float(loss.item()))
    clf.params = params
    clf.train_accuracy = float(np.mean(predict(clf, train_x) == train_y))
    clf.test_accuracy = float(np.mean(predict(clf, test_x) == test_y))
    if clf.test_accuracy < 0.9:
        log.warning("substitute classifier reached only %.3f test accuracy", clf.test_accuracy)
    return clf


def classifier_cw_objective(clf: SubstituteClassifier, x: Tensor, delta: Tensor, labels: np.ndarray, c: float, params=None) -> Tensor:
    """Per-row ``||delta||_2 + c * relu(Z_y - max_{j != y} Z_j + kappa)``.

    Cross-entropy gradients vanish on confidently classified inputs, so the
    CW variant uses the logit margin. The runner-up class is picked from the
    current logits and held constant for the gradient.
    """
    z = classifier_logits(clf, ops.add(x, delta), params)
    onehot_y = np.eye(clf.n_classes, dtype=z.dtype)[labels]
    other = np.where(onehot_y > 0, -np.inf, z.data).argmax(axis=1)
    onehot_o = np.eye(clf.n_classes, dtype=z.dtype)[other]
    margin = ops.sum(ops.elementwise_mul(z, Tensor(onehot_y - onehot_o, dtype=z.dtype)), axis=1)
    hinge = ops.relu(ops.add(margin, Tensor(np.full(len(labels), CW_KAPPA), dtype=z.dtype)))
    return ops.add(ops.sqrt(ops.l2_norm_sq(delta, axis=(1, 2, 3))), ops.scale(hinge, c))


def attack_classifier(clf: SubstituteClassifier, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Untargeted attack on the classifier: FGSM/FGM on cross-entropy, or CW on the logit margin."""
    xb = images.astype(np.float32)
    if cfg.attack in ("fgsm-image", "fgm-l2-image"):
        if cfg.epsilon == 0:
            return xb.copy()
        with Tape() as tape:
            xv = tape.watch(Tensor(xb))
            loss = ops.sum(cross_entropy(classifier_logits(clf, xv), labels))
        (g,) = gradients(tape, loss, [xv])
        if cfg.attack == "fgsm-image" and cfg.norm == "linf":
            return enforce_linf(xb, xb + cfg.epsilon * np.sign(g.data), cfg.epsilon, *cfg.clamp)
        n = np.sqrt(np.sum(g.data.astype(np.float64) ** 2, axis=(1, 2, 3), keepdims=True))
        return np.clip(xb + cfg.epsilon * g.data / np.maximum(n, 1e-12), *cfg.clamp).astype(np.float32)
    if cfg.attack != "cw-image":
        raise ValueError(f"{cfg.attack} does not apply to a classifier")
    delta = np.zeros_like(xb)
    state = AdamState.zeros_like(delta, lr=cfg.lr)
    # rows never misclassified keep the final iterate; others the smallest fooling one
    best, best_norm = delta.copy(), np.full(len(xb), np.inf)
    for step in range(cfg.steps + 1):
        fooled = predict(clf, xb + delta) != labels
        norm = np.sqrt(np.sum(delta.astype(np.float64) ** 2, axis=(1, 2, 3)))
        better = fooled & (norm < best_norm)
        best[better], best_norm[better] = delta[better], norm[better]
        if step == cfg.steps:
            break
        with Tape() as tape:
            dv = tape.watch(Tensor(delta))
            loss = ops.sum(classifier_cw_objective(clf, Tensor(xb), dv, labels, cfg.c))
        (g,) = gradients(tape, loss, [dv])
        t, state = adam_step(state, Tensor(delta), g)
        delta = (np.clip(xb + t.data, *cfg.clamp) - xb).astype(np.float32)
    never = np.isinf(best_norm)
    best[never] = delta[never]
    return np.clip(xb + best, *cfg.clamp).astype(np.float32)


# --- transfer evaluation -----------------------------------------------------------


@dataclass
class TransferReport:
    attack: str
    param: float
    clf_accuracy_clean: float
    clf_accuracy: float
    attribution_accuracy_clean: float
    attribution_accuracy: float
    mean_ssim: float
    mean_delta_norm: float
    adversarial: np.ndarray = field(repr=False, default=None)

    def row(self) -> list:
        return [self.attack, self.param, self.clf_accuracy, self.attribution_accuracy, self.mean_ssim, self.mean_delta_norm]


def transfer_attack_eval(
    clf: SubstituteClassifier,
    attack: AttackConfig,
    G: Mapping[str, GeneratorModel],
    images: np.ndarray,
    labels: np.ndarray,
    recon: ReconstructionConfig,
    workers: int = 1,
    clean_winners: np.ndarray | None = None,
) -> TransferReport:
    """Craft attacks on the classifier, then score both the classifier and attribution on them.

    ``labels`` index into ``list(G)``. Pass ``clean_winners`` (indices) to
    reuse a clean attribution run across several attacks.
    """
    models = list(G.values())
    keys = list(range(len(images)))

    def winners(x):
        d = distance_tensor(x, models, recon, keys, workers).min(axis=2)
        order = np.argsort(np.array(list(G)), kind="stable")  # ties go to the lowest id
        return order[np.argmin(d[:, order], axis=1)]

    if clean_winners is None:
        clean_winners = winners(images)
    adv = attack_classifier(clf, images, labels, attack)
    param = attack.c if attack.attack == "cw-image" else attack.epsilon
    same = np.array_equal(adv, images)
    att = clean_winners if same else winners(adv)
    return TransferReport(
        attack=attack.attack,
        param=float(param),
        clf_accuracy_clean=float(np.mean(predict(clf, images) == labels)),
        clf_accuracy=float(np.mean(predict(clf, adv) == labels)),
        attribution_accuracy_clean=float(np.mean(clean_winners == labels)),
        attribution_accuracy=float(np.mean(att == labels)),
        mean_ssim=float(np.mean([ssim(a, b) for a, b in zip(adv, images)])),
        mean_delta_norm=float(np.mean(np.sqrt(np.sum((adv.astype(np.float64) - images) ** 2, axis=(1, 2, 3))))),
        adversarial=adv,
    )
