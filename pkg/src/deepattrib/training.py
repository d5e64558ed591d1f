"""Procedural toy data, a small discriminator, and adversarial training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from deepattrib import ops
from deepattrib.generators import GeneratorModel, refresh_style_mean, save_model, synthesize
from deepattrib.optim import AdamState, adam_step
from deepattrib.tensor import Tape, Tensor, gradients

log = logging.getLogger(__name__)

DATASET_KINDS = ("blob-faces", "two-class-digits")
FINE_TUNE_LR = 5e-5


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, j_d: float, j_g: float) -> None:
        super().__init__(f"non-finite loss at step {step}: J_D={j_d}, J_G={j_g}")
        self.step, self.j_d, self.j_g = step, j_d, j_g


# --- toy data -----------------------------------------------------------------


@dataclass(frozen=True)
class ToyDatasetSpec:
    kind: str = "blob-faces"
    count: int = 1000
    image_shape: tuple[int, int, int] = (1, 32, 32)
    position_jitter: float = 1.5
    scale_jitter: float = 0.15
    intensity_jitter: float = 0.1
    seed: int = 0

    def validate(self) -> "ToyDatasetSpec":
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.count < 1 or self.image_shape[0] != 1:
            raise ValueError("count must be positive and images single-channel")
        if min(self.position_jitter, self.scale_jitter, self.intensity_jitter) < 0:
            raise ValueError("jitter parameters must be non-negative")
        return self


def _gauss(yy, xx, cy, cx, sigma):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def _segment_dist(yy, xx, pts):
    """Distance from every pixel to a polyline given as (k, 2) points."""
    best = np.full(yy.shape, np.inf)
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        dy, dx = y1 - y0, x1 - x0
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx + 1e-12), 0, 1)
        best = np.minimum(best, np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx)))
    return best


def _blob_face(rng, h, w, spec):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    j = lambda s: rng.normal(0, s)  # noqa: E731
    u = h / 32.0
    scale = 1 + j(spec.scale_jitter)
    img = np.zeros((h, w))
    for side in (-1, 1):
        cy = (12 + j(spec.position_jitter)) * u
        cx = (16 + side * 6 * scale + j(spec.position_jitter)) * u
        img += (0.9 + j(spec.intensity_jitter)) * _gauss(yy, xx, cy, cx, 2.0 * u * scale)
    my = (21 + j(spec.position_jitter)) * u
    mx = (16 + j(spec.position_jitter)) * u
    half = 7 * u * scale
    curve = 3 * u * (1 + j(spec.scale_jitter))
    xs = np.linspace(-half, half, 9)
    pts = np.stack([my + curve * (xs / half) ** 2 * -1 + curve, mx + xs], axis=1)
    img += (0.8 + j(spec.intensity_jitter)) * np.exp(-(_segment_dist(yy, xx, pts) ** 2) / (2 * (1.2 * u) ** 2))
    return img


def _digit(rng, h, w, spec, label):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    j = lambda s: rng.normal(0, s)  # noqa: E731
    u = h / 32.0
    cy, cx = (16 + j(spec.position_jitter)) * u, (16 + j(spec.position_jitter)) * u
    scale = 1 + j(spec.scale_jitter)
    amp = 0.9 + j(spec.intensity_jitter)
    if label == 0:
        r = np.hypot((yy - cy) / (10 * u * scale), (xx - cx) / (7 * u * scale))
        return amp * np.exp(-((r - 1) ** 2) / (2 * (0.15) ** 2))
    tilt = j(spec.position_jitter / 15)  # 0.1 rad at the default jitter
    pts = np.array([[cy - 10 * u * scale, cx - tilt * 10 * u], [cy + 10 * u * scale, cx + tilt * 10 * u]])
    return amp * np.exp(-(_segment_dist(yy, xx, pts) ** 2) / (2 * (1.3 * u) ** 2))


def make_toy_dataset(spec: ToyDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """(images (count, 1, H, W) float32 in [0, 1], labels (count,) int64).

    blob-faces labels are all zero; two-class-digits alternates 0/1.
    """
    spec.validate()
    _, h, w = spec.image_shape
    rng = np.random.default_rng(spec.seed)
    images = np.empty((spec.count, 1, h, w), dtype=np.float32)
    labels = np.zeros(spec.count, dtype=np.int64)
    for i in range(spec.count):
        if spec.kind == "blob-faces":
            img = _blob_face(rng, h, w, spec)
        else:
            labels[i] = i % 2
            img = _digit(rng, h, w, spec, labels[i])
        images[i, 0] = np.clip(img, 0, 1)
    return images, labels


# --- discriminator ------------------------------------------------------------


@dataclass(frozen=True)
class DiscriminatorModel:
    """Stride-2 4x4 conv + relu stack, then a linear layer to one logit."""

    image_shape: tuple[int, int, int]
    channels: tuple[int, ...]
    params: Mapping[str, np.ndarray]

    def param_tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "DiscriminatorModel":
        return DiscriminatorModel(self.image_shape, self.channels, dict(params))


def build_discriminator(image_shape=(1, 32, 32), channels=(16, 32), seed: int = 0) -> DiscriminatorModel:
    rng = np.random.default_rng(seed)
    params = {}
    cin, h, w = image_shape
    for i, cout in enumerate(channels):
        params[f"conv{i}.weight"] = (rng.standard_normal((cout, cin, 4, 4)) * math.sqrt(2 / (cin * 16))).astype(np.float32)
        params[f"conv{i}.bias"] = np.zeros(cout, np.float32)
        cin, h, w = cout, h // 2, w // 2
    params["head.weight"] = (rng.standard_normal((cin * h * w, 1)) * math.sqrt(1 / (cin * h * w))).astype(np.float32)
    params["head.bias"] = np.zeros(1, np.float32)
    return DiscriminatorModel(tuple(image_shape), tuple(channels), params)


def discriminate(disc: DiscriminatorModel, x: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Logits (N,) for a batch of images (N, C, H, W)."""
    p = params if params is not None else disc.param_tensors()
    h = x
    for i in range(len(disc.channels)):
        h = ops.relu(ops.channel_bias(ops.conv2d(h, p[f"conv{i}.weight"], 2, 1), p[f"conv{i}.bias"]))
    h = ops.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    return ops.reshape(ops.linear(h, p["head.weight"], p["head.bias"]), (h.shape[0],))


# --- losses -------------------------------------------------------------------


def gan_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Minimax losses from discriminator logits, in log-sigmoid form.

    J_D = mean(-log sigmoid(real)) + mean(-log(1 - sigmoid(fake)))
    J_G = mean(log(1 - sigmoid(fake)))

    Uses -log sigmoid(z) = softplus(-z) and log(1 - sigmoid(z)) = -softplus(z).
    """
    j_real = ops.mean(ops.softplus(ops.scale(real_logits, -1.0)))
    j_fake = ops.mean(ops.softplus(fake_logits))
    return ops.add(j_real, j_fake), ops.scale(j_fake, -1.0)


def non_saturating_generator_loss(fake_logits: Tensor) -> Tensor:
    """mean(-log sigmoid(fake)); same fixed point, stronger early gradients."""
    return ops.mean(ops.softplus(ops.scale(fake_logits, -1.0)))


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    gen_lr: float = 2e-4
    disc_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 0
    non_saturating: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ValueError("steps/checkpoint_every must be >= 0 and batch_size >= 1")
        if self.gen_lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be positive")
        return self


@dataclass
class TrainResult:
    generator: GeneratorModel
    discriminator: DiscriminatorModel
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    checkpoints: list[tuple[int, GeneratorModel]] = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "J_D", "J_G", "mean_real_logit", "mean_fake_logit"])
            out.writerows(self.trace)


def _adam_states(params: Mapping[str, np.ndarray], lr: float, cfg: TrainConfig) -> dict[str, AdamState]:
    return {k: AdamState.zeros_like(v, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2) for k, v in params.items()}


def _update(params, states, grads):
    new_p, new_s = {}, {}
    for (k, v), g in zip(params.items(), grads):
        t, new_s[k] = adam_step(states[k], Tensor(v), g)
        new_p[k] = t.data
    return new_p, new_s


def train_gan(
    gen: GeneratorModel,
    disc: DiscriminatorModel,
    data: np.ndarray,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Alternating updates: one discriminator step then one generator step.

    The generator is trained without noise injection; a style model's
    truncation center is recomputed once at the end.
    """
    cfg.validate()
    if tuple(data.shape[1:]) != gen.arch.image_shape or tuple(data.shape[1:]) != disc.image_shape:
        raise ValueError(f"data {data.shape[1:]}, generator {gen.arch.image_shape}, discriminator {disc.image_shape} differ")
    if cfg.steps == 0:
        return TrainResult(gen, disc)
    rng = np.random.default_rng(cfg.seed)
    gp = {k: np.array(v) for k, v in gen.params.items() if k != "mapping.w_mean"}
    frozen = {k: v for k, v in gen.params.items() if k == "mapping.w_mean"}
    dp = dict(disc.params)
    gs = _adam_states(gp, cfg.gen_lr, cfg)
    ds = _adam_states(dp, cfg.disc_lr, cfg)
    d_names, g_names = list(dp), list(gp)
    result = TrainResult(gen, disc)
    b = cfg.batch_size
    for step in range(cfg.steps):
        real = Tensor(data[rng.integers(0, len(data), b)])
        z = rng.standard_normal((b, gen.arch.seed_dim), dtype=np.float32)
        g_t = {k: Tensor(v) for k, v in {**gp, **frozen}.items()}
        fake = Tensor._wrap(np.array(synthesize(gen, Tensor(z), params=g_t).data))
        with Tape() as tape:
            d_t = {k: tape.watch(Tensor(dp[k])) for k in d_names}
            lr_, lf_ = discriminate(disc, real, d_t), discriminate(disc, fake, d_t)
            j_d, _ = gan_losses(lr_, lf_)
        d_grads = gradients(tape, j_d, [d_t[k] for k in d_names])
        dp, ds = _update(dp, ds, d_grads)

        z = rng.standard_normal((b, gen.arch.seed_dim), dtype=np.float32)
        d_const = {k: Tensor(v) for k, v in dp.items()}
        with Tape() as tape:
            g_t = {k: tape.watch(Tensor(gp[k])) for k in g_names}
            g_t.update({k: Tensor(v) for k, v in frozen.items()})
            lf = discriminate(disc, synthesize(gen, Tensor(z), params=g_t), d_const)
            _, j_g = gan_losses(Tensor(np.zeros(1)), lf)
            g_obj = non_saturating_generator_loss(lf) if cfg.non_saturating else j_g
        g_grads = gradients(tape, g_obj, [g_t[k] for k in g_names])

        jd, jg = float(j_d.item()), float(j_g.item())
        if not (math.isfinite(jd) and math.isfinite(jg)):
            raise TrainingDivergedError(step, jd, jg)
        gp, gs = _update(gp, gs, g_grads)
        result.trace.append((step, jd, jg, float(lr_.data.mean()), float(lf_.data.mean())))
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ck = gen.with_params({**gp, **frozen})
            result.checkpoints.append((step + 1, ck))
            if checkpoint_dir is not None:
                save_model(ck, Path(checkpoint_dir) / f"gen_{step + 1:06d}.bin")
    result.generator = refresh_style_mean(gen.with_params({**gp, **frozen}), cfg.seed)
    result.discriminator = disc.with_params(dp)
    return result


def fine_tune(
    parent: GeneratorModel,
    disc: DiscriminatorModel,
    data: np.ndarray,
    extra_steps: int,
    cfg: TrainConfig | None = None,
) -> GeneratorModel:
    """Continue adversarial training of ``parent`` for ``extra_steps`` steps.

    Defaults to a learning rate of ``FINE_TUNE_LR`` so short runs stay close
    to the parent.
    """
    cfg = cfg or TrainConfig(gen_lr=FINE_TUNE_LR, disc_lr=FINE_TUNE_LR)
    if extra_steps == 0:
        return parent
    cfg = TrainConfig(**{**cfg.__dict__, "steps": extra_steps, "checkpoint_every": 0})
    return train_gan(parent, disc, data, cfg).generator


def relative_param_change(parent: GeneratorModel, child: GeneratorModel) -> float:
    """||child - parent|| / ||parent|| over all trainable parameters."""
    num = den = 0.0
    for k, v in parent.params.items():
        if k == "mapping.w_mean":
            continue
        num += float(np.sum((child.params[k].astype(np.float64) - v) ** 2))
        den += float(np.sum(v.astype(np.float64) ** 2))
    return math.sqrt(num / den)
