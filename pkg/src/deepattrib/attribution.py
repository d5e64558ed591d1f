"""Seed reconstruction and minimum-distance attribution.

For a target image ``x`` and every candidate generator ``g``, several
reconstruction attempts each draw a random initial seed (and, for
style-injection models, a noise input held fixed for the attempt), then run
Adam on ``d(g(s, R), x)`` over ``s``. A generator's score is the smallest
final distance over its attempts, and the image is attributed to the
generator with the smallest score.

All attempts for one generator are optimized together as rows of a single
batch. Adam updates element-wise and the loss is a sum of per-row
distances, so rows do not interact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from deepattrib import ops
from deepattrib.distance import DistanceKind, FeatureExtractor, batch_distance, extract_features
from deepattrib.generators import GeneratorModel, NoiseInput, StyleOverride, sample_noise, stack_noise, synthesize
from deepattrib.optim import AdamState, adam_step
from deepattrib.tensor import Tape, Tensor, gradients

log = logging.getLogger(__name__)

MAX_ROWS = 1024


@dataclass(frozen=True)
class ReconstructionConfig:
    steps: int = 1000
    lr: float = 0.1
    attempts: int = 3
    distance: str = DistanceKind.L2_FEATURE.value
    seed: int = 0
    record_trace: bool = False
    psi: float = 0.7
    noise_enabled: bool = True
    optimize_noise: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1 or self.attempts < 1:
            raise ValueError("steps and attempts must be >= 1")
        DistanceKind(self.distance)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconstructionResult:
    generator_id: str
    attempt: int
    initial_seed: np.ndarray
    seed: np.ndarray
    distance: float
    initial_distance: float
    noise: NoiseInput
    trace: np.ndarray | None = None
    failed_step: int | None = None

    @property
    def failed(self) -> bool:
        return self.failed_step is not None


@dataclass
class AttributionReport:
    target_digest: str
    distances: dict[str, float]
    ranking: list[str]
    winner: str
    margin: float
    failed: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["distances"] = {k: (None if math.isinf(v) else v) for k, v in self.distances.items()}
        d["schema"] = "attribution-report/1"
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def image_digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f4").tobytes()).hexdigest()


def attempt_rng(master: int, image_key: int | str, generator_index: int, attempt: int) -> np.random.Generator:
    """Independent stream for one (image, generator, attempt) triple."""
    if isinstance(image_key, str):
        image_key = int(image_key[:16], 16)
    return np.random.default_rng([master, image_key, generator_index, attempt])


def draw_attempt(model: GeneratorModel, rng: np.random.Generator, cfg: ReconstructionConfig) -> tuple[np.ndarray, NoiseInput]:
    s0 = rng.standard_normal(model.arch.seed_dim, dtype=np.float32)
    noise = sample_noise(model, int(rng.integers(2**63)), psi=cfg.psi, enabled=cfg.noise_enabled)
    return s0, noise


@dataclass
class BatchResult:
    seeds: np.ndarray  # (B, d) final seeds
    distances: np.ndarray  # (B,) final distances (+inf when failed)
    initial: np.ndarray  # (B,) distances at the initial seeds
    failed_step: np.ndarray  # (B,) -1 when the attempt succeeded
    trace: np.ndarray | None  # (steps + 1, B)


def reconstruction_objective(
    model: GeneratorModel,
    seeds: Tensor,
    noise: NoiseInput | None,
    targets: Tensor,
    kind: DistanceKind | str,
    fx: FeatureExtractor | None = None,
    target_features: Tensor | None = None,
    override: StyleOverride | None = None,
    params=None,
) -> Tensor:
    """Per-row ``d(g(s, R), x)``, the quantity every attempt minimizes over ``s``."""
    img = synthesize(model, seeds, noise, override, params)
    return batch_distance(kind, img, targets, fx, b_features=target_features)


def reconstruct_batch(
    model: GeneratorModel,
    targets: np.ndarray,
    init_seeds: np.ndarray,
    noise: NoiseInput,
    cfg: ReconstructionConfig,
    fx: FeatureExtractor | None = None,
    override: StyleOverride | None = None,
) -> BatchResult:
    """Run ``cfg.steps`` Adam steps for every row independently.

    targets: (B, C, H, W); init_seeds: (B, d); noise: batched NoiseInput.
    Returns the final-step seed of every row, not the best seen.
    """
    kind = DistanceKind(cfg.distance)
    fx = fx or FeatureExtractor.default()
    b = targets.shape[0]
    target_t = Tensor(targets)
    target_f = extract_features(fx, target_t) if kind is DistanceKind.L2_FEATURE else None

    s = Tensor(init_seeds)
    noise_vars = [Tensor(a) for a in noise.layers] if cfg.optimize_noise else []
    states = [AdamState.zeros_like(s, lr=cfg.lr)] + [AdamState.zeros_like(v, lr=cfg.lr) for v in noise_vars]
    failed = np.full(b, -1, dtype=np.int64)
    trace = np.empty((cfg.steps + 1, b), dtype=np.float32) if cfg.record_trace else None
    initial = None

    def evaluate(track: bool):
        with Tape() as tape:
            sv = tape.watch(s) if track else s
            nv = [tape.watch(v) for v in noise_vars] if track else noise_vars
            r = NoiseInput(tuple(nv), noise.psi) if cfg.optimize_noise else noise
            d = reconstruction_objective(model, sv, r, target_t, kind, fx, target_f, override)
            loss = ops.sum(d)
        if not track:
            return d.data, None
        return d.data, gradients(tape, loss, [sv, *nv])

    for step in range(cfg.steps):
        d, grads = evaluate(True)
        if initial is None:
            initial = d.copy()
        if trace is not None:
            trace[step] = d
        bad = ~np.isfinite(d)
        for g in grads:
            bad |= ~np.isfinite(g.data.reshape(b, -1)).all(axis=1)
        newly = bad & (failed < 0)
        failed[newly] = step
        keep = failed >= 0
        new_vars = []
        new_states = []
        for var, g, st in zip([s, *noise_vars], grads, states):
            garr = np.where(keep.reshape((b,) + (1,) * (g.data.ndim - 1)), 0, np.nan_to_num(g.data))
            nv, ns = adam_step(st, var, Tensor(garr.astype(var.dtype)))
            new_vars.append(nv)
            new_states.append(ns)
        s, *noise_vars = new_vars
        states = new_states
    d, _ = evaluate(False)
    if trace is not None:
        trace[cfg.steps] = d
    dist = np.where(failed >= 0, np.inf, d).astype(np.float64)
    if np.any(failed >= 0):
        log.warning("%d of %d reconstruction attempts failed (non-finite loss)", int(np.sum(failed >= 0)), b)
    return BatchResult(s.numpy(), dist, initial.astype(np.float64), failed, trace)


def reconstruct(
    g: GeneratorModel,
    x: Tensor | np.ndarray,
    cfg: ReconstructionConfig,
    attempt_rng_seed: int,
    generator_id: str = "g",
    fx: FeatureExtractor | None = None,
    override: StyleOverride | None = None,
) -> ReconstructionResult:
    """One reconstruction attempt of image ``x`` (C, H, W) on generator ``g``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if x.shape != g.arch.image_shape:
        raise ValueError(f"target shape {x.shape} != generator image shape {g.arch.image_shape}")
    rng = np.random.default_rng([cfg.seed, attempt_rng_seed])
    s0, noise = draw_attempt(g, rng, cfg)
    res = reconstruct_batch(g, x[None], s0[None], stack_noise([noise]), cfg, fx, override)
    return ReconstructionResult(
        generator_id=generator_id,
        attempt=attempt_rng_seed,
        initial_seed=s0,
        seed=res.seeds[0],
        distance=float(res.distances[0]),
        initial_distance=float(res.initial[0]),
        noise=noise,
        trace=None if res.trace is None else res.trace[:, 0],
        failed_step=None if res.failed_step[0] < 0 else int(res.failed_step[0]),
    )


# --- many images x many generators ----------------------------------------------


def _run_chunk(args):
    model, targets, seeds, noise, cfg = args
    res = reconstruct_batch(model, targets, seeds, noise, cfg)
    return res.distances, res.initial, res.seeds


def distance_tensor(
    images: np.ndarray,
    models: Sequence[GeneratorModel],
    cfg: ReconstructionConfig,
    image_keys: Sequence[int] | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Final reconstruction distances, shape (n_images, n_models, attempts).

    Attempt ``a`` of image ``i`` on model ``j`` always uses the stream
    ``attempt_rng(cfg.seed, key_i, j, a)``, so running with more attempts
    extends (never changes) the earlier ones.
    """
    return reconstruct_all(images, models, cfg, image_keys, workers)[0]


def reconstruct_all(images, models, cfg, image_keys=None, workers: int = 1):
    """Like :func:`distance_tensor` but also returns initial distances and final seeds."""
    n = images.shape[0]
    keys = list(range(n)) if image_keys is None else list(image_keys)
    jobs, slots = [], []
    for j, model in enumerate(models):
        rows = []
        for i in range(n):
            for a in range(cfg.attempts):
                s0, noise = draw_attempt(model, attempt_rng(cfg.seed, keys[i], j, a), cfg)
                rows.append((i, a, s0, noise))
        for start in range(0, len(rows), MAX_ROWS):
            chunk = rows[start : start + MAX_ROWS]
            targets = images[[r[0] for r in chunk]]
            seeds = np.stack([r[2] for r in chunk])
            noise = stack_noise([r[3] for r in chunk])
            jobs.append((model, targets, seeds, noise, cfg))
            slots.append([(r[0], j, r[1]) for r in chunk])
    out = np.empty((n, len(models), cfg.attempts))
    init = np.empty_like(out)
    final_seeds = np.empty((n, len(models), cfg.attempts, max(m.arch.seed_dim for m in models)), dtype=np.float32)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(job) for job in jobs]
    for slot, (dist, initial, seeds) in zip(slots, results):
        for (i, j, a), d, d0, s in zip(slot, dist, initial, seeds):
            out[i, j, a] = d
            init[i, j, a] = d0
            final_seeds[i, j, a, : s.shape[0]] = s
    return out, init, final_seeds


def report_from_distances(
    per_attempt: Mapping[str, np.ndarray],
    target_digest: str = "",
    cfg: ReconstructionConfig | None = None,
    excluded: Sequence[str] = (),
) -> AttributionReport:
    """Reduce per-attempt distances to an attribution decision.

    d_g is the min over attempts (failed attempts are +inf); the winner is
    the argmin over generators, ties going to the lexicographically lowest id.
    """
    if not per_attempt:
        raise ValueError("attribution needs at least one candidate generator")
    best = {gid: float(np.min(d)) for gid, d in per_attempt.items()}
    failed = sorted(gid for gid, v in best.items() if math.isinf(v))
    ranking = sorted(best, key=lambda gid: (best[gid], gid))
    margin = best[ranking[1]] - best[ranking[0]] if len(ranking) > 1 else math.inf
    return AttributionReport(
        target_digest=target_digest,
        distances=best,
        ranking=ranking,
        winner=ranking[0],
        margin=margin,
        failed=failed,
        excluded=list(excluded),
        config=cfg.to_dict() if cfg else {},
    )


def _as_pool(G) -> dict[str, GeneratorModel]:
    if isinstance(G, Mapping):
        return dict(G)
    return {f"g{i}": g for i, g in enumerate(G)}


def attribute(
    x: Tensor | np.ndarray,
    G: Mapping[str, GeneratorModel] | Sequence[GeneratorModel],
    cfg: ReconstructionConfig,
    workers: int = 1,
) -> AttributionReport:
    """Attribute one image to the candidate with the smallest reconstruction distance."""
    pool = _as_pool(G)
    if not pool:
        raise ValueError("attribution needs at least one candidate generator")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    shapes = {g.arch.image_shape for g in pool.values()}
    if len(shapes) != 1 or x.shape not in shapes:
        raise ValueError(f"target {x.shape} and candidates {shapes} must share one image shape")
    digest = image_digest(x)
    ids = list(pool)
    dist = distance_tensor(x[None], [pool[i] for i in ids], cfg, [int(digest[:16], 16)], workers)
    return report_from_distances({gid: dist[0, j] for j, gid in enumerate(ids)}, digest, cfg)


def attribute_leave_one_out(
    x: Tensor | np.ndarray,
    G: Mapping[str, GeneratorModel] | Sequence[GeneratorModel],
    true_model_id: str,
    cfg: ReconstructionConfig,
    workers: int = 1,
) -> AttributionReport:
    """Attribution over the pool with the true source removed."""
    pool = _as_pool(G)
    if true_model_id not in pool:
        raise KeyError(f"{true_model_id!r} is not in the pool")
    rest = {k: v for k, v in pool.items() if k != true_model_id}
    if not rest:
        raise ValueError("pool is empty after excluding the true model")
    report = attribute(x, rest, cfg, workers)
    report.excluded = [true_model_id]
    return report


def seed_discrepancy(original, reconstructed) -> float:
    a = np.asarray(original.data if isinstance(original, Tensor) else original, dtype=np.float64)
    b = np.asarray(reconstructed.data if isinstance(reconstructed, Tensor) else reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"seed dimensions differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
