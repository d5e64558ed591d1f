"""Desk-scale differentiable generators and their binary model format.

Two architectures are provided:

* ``plain-deconv``: dense layer onto a small grid, a stack of stride-2
  transposed convolutions, sigmoid. DCGAN-shaped.
* ``style-injection``: a mapping network produces a style vector ``w``
  (truncated toward its running mean by ``psi``); a learned constant is
  refined by transposed convolutions, and every resolution applies
  ``ReLU(x + B * w_B)`` followed by AdaIN with a style-derived
  ``(gamma, beta)``. The last AdaIN directly produces the pre-sigmoid image,
  which is what makes :func:`force_output` possible.

Weights are stored with std 0.05 and rescaled at run time by a per-layer
constant (equalized learning rate), so untrained models already produce
full-contrast images.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from deepattrib import ops
from deepattrib.tensor import Tensor

INIT_STD = 0.05
STYLE_MEAN_SAMPLES = 10_000
MAGIC = b"DATR"
FORMAT_VERSION = 1
KINDS = ("plain-deconv", "style-injection")


class ArchitectureError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorArch:
    kind: str = "plain-deconv"
    seed_dim: int = 64
    image_shape: tuple[int, int, int] = (1, 32, 32)
    base_shape: tuple[int, int, int] = (16, 8, 8)
    widths: tuple[int, ...] = (8, 1)  # output channels of each transposed conv
    kernel: int = 4
    stride: int = 2
    mapping_depth: int = 2
    style_dim: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        object.__setattr__(self, "base_shape", tuple(self.base_shape))
        object.__setattr__(self, "widths", tuple(self.widths))

    def validate(self) -> "GeneratorArch":
        if self.kind not in KINDS:
            raise ArchitectureError(f"unknown generator kind {self.kind!r}")
        if self.seed_dim < 1 or min(self.base_shape) < 1 or not self.widths:
            raise ArchitectureError("seed_dim, base_shape and widths must be positive and non-empty")
        if self.kernel - 2 * self.padding != self.stride:
            raise ArchitectureError("kernel/stride must double resolution exactly (kernel = stride + 2)")
        c, h, w = self.base_shape
        for _ in self.widths:
            h, w = h * self.stride, w * self.stride
        if (self.widths[-1], h, w) != self.image_shape:
            raise ArchitectureError(
                f"layers produce {(self.widths[-1], h, w)}, image_shape is {self.image_shape}"
            )
        if self.kind == "style-injection" and (self.mapping_depth < 1 or self.style_dim < 1):
            raise ArchitectureError("style-injection needs mapping_depth >= 1 and style_dim >= 1")
        return self

    @property
    def padding(self) -> int:
        return (self.kernel - self.stride) // 2

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Activation shape (C, H, W) at every resolution, base grid first."""
        c, h, w = self.base_shape
        shapes = [(c, h, w)]
        for width in self.widths:
            h, w = h * self.stride, w * self.stride
            shapes.append((width, h, w))
        return shapes

    def to_json(self) -> str:
        d = {
            "kind": self.kind,
            "seed_dim": self.seed_dim,
            "image_shape": list(self.image_shape),
            "base_shape": list(self.base_shape),
            "widths": list(self.widths),
            "kernel": self.kernel,
            "stride": self.stride,
        }
        if self.kind == "style-injection":
            d["mapping_depth"] = self.mapping_depth
            d["style_dim"] = self.style_dim
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorArch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}).validate()


SHALLOW_PLAIN = GeneratorArch(base_shape=(8, 16, 16), widths=(1,))
STYLE_DEFAULT = GeneratorArch(kind="style-injection")


def param_shapes(arch: GeneratorArch) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape; sorted names define the digest order."""
    k = arch.kernel
    shapes: dict[str, tuple[int, ...]] = {}
    layers = arch.layer_shapes()
    if arch.kind == "plain-deconv":
        shapes["dense.weight"] = (arch.seed_dim, int(np.prod(arch.base_shape)))
        shapes["dense.bias"] = (int(np.prod(arch.base_shape)),)
        for i, (cin, cout) in enumerate(zip([layers[0][0], *arch.widths[:-1]], arch.widths)):
            shapes[f"deconv{i}.weight"] = (cin, cout, k, k)
            shapes[f"deconv{i}.bias"] = (cout,)
        return shapes
    dims = [arch.seed_dim] + [arch.style_dim] * arch.mapping_depth
    for i in range(arch.mapping_depth):
        shapes[f"mapping{i}.weight"] = (dims[i], dims[i + 1])
        shapes[f"mapping{i}.bias"] = (dims[i + 1],)
    shapes["mapping.w_mean"] = (arch.style_dim,)
    shapes["synthesis.const"] = arch.base_shape
    for i, (c, _, _) in enumerate(layers):
        if i > 0:
            shapes[f"synthesis{i}.conv.weight"] = (layers[i - 1][0], c, k, k)
            shapes[f"synthesis{i}.conv.bias"] = (c,)
        shapes[f"synthesis{i}.noise_weight"] = (c,)
        shapes[f"synthesis{i}.style_gamma.weight"] = (arch.style_dim, c)
        shapes[f"synthesis{i}.style_gamma.bias"] = (c,)
        shapes[f"synthesis{i}.style_beta.weight"] = (arch.style_dim, c)
        shapes[f"synthesis{i}.style_beta.bias"] = (c,)
    return shapes


def _gain(name: str, shape: tuple[int, ...]) -> float:
    """Run-time multiplier turning a std-0.05 weight into a He-scaled one."""
    if not name.endswith("weight") or name.endswith("noise_weight"):
        return 1.0
    if "conv" in name:
        fan_in = shape[0] * shape[2] * shape[3] / 4  # stride-2: each output sees 1/4 of the taps
    else:
        fan_in = shape[0]
    he = np.sqrt(1.0 / fan_in) if "style" in name else np.sqrt(2.0 / fan_in)
    return float(he / INIT_STD)


@dataclass(frozen=True)
class GeneratorModel:
    arch: GeneratorArch
    params: Mapping[str, np.ndarray]
    _digest: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        expected = param_shapes(self.arch)
        if set(expected) != set(self.params):
            raise ArchitectureError(f"parameter names do not match architecture: {sorted(set(expected) ^ set(self.params))}")
        frozen = {}
        for name in sorted(expected):
            arr = np.array(self.params[name], dtype=np.float32)
            if arr.shape != expected[name]:
                raise ArchitectureError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def digest(self) -> str:
        if not self._digest:
            self._digest.append(model_digest(self))
        return self._digest[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "GeneratorModel":
        return GeneratorModel(self.arch, dict(params))


@dataclass(frozen=True)
class NoiseInput:
    """Per-layer noise maps plus the truncation rate.

    ``layers`` is empty when noise injection is disabled; otherwise it holds
    one ``(1, H, W)`` map per style layer (or ``(N, 1, H, W)`` for a batch).
    """

    layers: tuple = ()  # np.ndarray, or Tensor when the noise is being optimized
    psi: float = 1.0

    @property
    def enabled(self) -> bool:
        return bool(self.layers)

    def to_bytes(self) -> bytes:
        out = [struct.pack("<fB", self.psi, len(self.layers))]
        out += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.layers]
        return b"".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass(frozen=True)
class StyleOverride:
    """Externally supplied AdaIN coefficients for one layer.

    ``gamma``/``beta`` are either per-channel ``(C,)`` or per-pixel
    ``(C, H, W)``.
    """

    layer: int
    gamma: np.ndarray
    beta: np.ndarray
    clamped_pixels: int = 0


def sample_noise(model: GeneratorModel, rng_seed: int, psi: float = 0.7, enabled: bool = True, batch: int | None = None) -> NoiseInput:
    if model.arch.kind != "style-injection" or not enabled:
        return NoiseInput((), psi)
    rng = np.random.default_rng(rng_seed)
    lead = () if batch is None else (batch,)
    layers = tuple(
        rng.standard_normal(lead + (1, h, w), dtype=np.float32) for _, h, w in model.arch.layer_shapes()
    )
    return NoiseInput(layers, psi)


def stack_noise(noises: list[NoiseInput]) -> NoiseInput:
    """Combine single-sample noise inputs into one batched input."""
    if not noises[0].enabled:
        return NoiseInput((), noises[0].psi)
    if len({n.psi for n in noises}) != 1:
        raise ValueError("cannot batch noise inputs with different psi")
    layers = tuple(np.stack([n.layers[i] for n in noises]) for i in range(len(noises[0].layers)))
    return NoiseInput(layers, noises[0].psi)


# --- construction -------------------------------------------------------------


def build_generator(arch: GeneratorArch, init_rng_seed: int) -> GeneratorModel:
    arch.validate()
    rng = np.random.default_rng(init_rng_seed)
    params = {}
    for name, shape in sorted(param_shapes(arch).items()):
        params[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
    if arch.kind == "style-injection":
        params["mapping.w_mean"] = np.zeros(arch.style_dim, dtype=np.float32)
        params["mapping.w_mean"] = style_mean(GeneratorModel(arch, params), init_rng_seed)
    return GeneratorModel(arch, params)


def style_mean(model: GeneratorModel, rng_seed: int, count: int = STYLE_MEAN_SAMPLES) -> np.ndarray:
    """Mean mapping-network output over ``count`` standard-normal seeds."""
    rng = np.random.default_rng([rng_seed, 0x5747])
    seeds = rng.standard_normal((count, model.arch.seed_dim), dtype=np.float32)
    w = _mapping(model.tensors(), model.arch, Tensor(seeds)).data
    return w.astype(np.float64).mean(axis=0).astype(np.float32)


def refresh_style_mean(model: GeneratorModel, rng_seed: int = 0) -> GeneratorModel:
    """Recompute the frozen truncation center (after training changed the mapping)."""
    if model.arch.kind != "style-injection":
        return model
    params = dict(model.params)
    params["mapping.w_mean"] = style_mean(model, rng_seed)
    return GeneratorModel(model.arch, params)


# --- forward pass -------------------------------------------------------------


def _w(p: Mapping[str, Tensor], name: str) -> Tensor:
    g = _gain(name, p[name].shape)
    return ops.scale(p[name], g) if g != 1.0 else p[name]


def _mapping(p, arch, seeds: Tensor) -> Tensor:
    h = seeds
    for i in range(arch.mapping_depth):
        h = ops.linear(h, _w(p, f"mapping{i}.weight"), p[f"mapping{i}.bias"])
        if i < arch.mapping_depth - 1:
            h = ops.relu(h)
    return h


def _noise_tensor(layer: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    n, c, h, w = shape
    b = layer if isinstance(layer, Tensor) else Tensor(layer, layer.dtype)
    if b.data.ndim == 3:
        b = ops.reshape(b, (1, 1, h, w))
    return ops.broadcast_to(b, shape)


def _per_sample(x: np.ndarray, n: int, shape) -> Tensor:
    """Broadcast an override coefficient ((C,) or (C, H, W)) to the activation shape."""
    t = Tensor(x)
    if t.data.ndim == 1:
        t = ops.reshape(t, (1, t.shape[0], 1, 1))
    else:
        t = ops.reshape(t, (1, *t.shape))
    return ops.broadcast_to(t, shape)


def synthesize(
    model: GeneratorModel,
    seeds: Tensor,
    noise: NoiseInput | None = None,
    override: StyleOverride | None = None,
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Batched, differentiable generation: (N, seed_dim) -> (N, C, H, W).

    ``params`` may supply (possibly tape-watched) parameter tensors; training
    uses that to differentiate with respect to the weights.
    """
    arch = model.arch
    p = params if params is not None else model.tensors()
    if seeds.data.ndim != 2 or seeds.shape[1] != arch.seed_dim:
        raise ArchitectureError(f"seed shape {seeds.shape} does not match seed_dim {arch.seed_dim}")
    n = seeds.shape[0]
    noise = noise or NoiseInput()
    if arch.kind == "plain-deconv":
        return _plain(p, arch, seeds, n)
    return _style(p, arch, seeds, n, noise, override)


def _plain(p, arch, seeds, n):
    h = ops.relu(ops.linear(seeds, _w(p, "dense.weight"), p["dense.bias"]))
    h = ops.reshape(h, (n, *arch.base_shape))
    last = len(arch.widths) - 1
    for i in range(len(arch.widths)):
        h = ops.conv_transpose2d(h, _w(p, f"deconv{i}.weight"), arch.stride, arch.padding)
        h = ops.channel_bias(h, p[f"deconv{i}.bias"])
        h = ops.sigmoid(h) if i == last else ops.relu(h)
    return h


def _style(p, arch, seeds, n, noise: NoiseInput, override):
    layers = arch.layer_shapes()
    if noise.enabled and len(noise.layers) != len(layers):
        raise ArchitectureError(f"noise has {len(noise.layers)} layers, model needs {len(layers)}")
    w = _mapping(p, arch, seeds)
    psi = float(noise.psi)
    if psi != 1.0:
        mean = ops.broadcast_to(ops.reshape(p["mapping.w_mean"], (1, arch.style_dim)), w.shape)
        w = ops.add(mean, ops.scale(ops.sub(w, mean), psi))
    x = ops.broadcast_to(ops.reshape(p["synthesis.const"], (1, *arch.base_shape)), (n, *arch.base_shape))
    for i, (c, hh, ww) in enumerate(layers):
        if i > 0:
            x = ops.conv_transpose2d(x, _w(p, f"synthesis{i}.conv.weight"), arch.stride, arch.padding)
            x = ops.channel_bias(x, p[f"synthesis{i}.conv.bias"])
        shape = (n, c, hh, ww)
        if noise.enabled:
            if noise.layers[i].shape[-2:] != (hh, ww):
                raise ArchitectureError(f"noise layer {i} has shape {noise.layers[i].shape}, activation is {shape}")
            wb = ops.broadcast_to(ops.reshape(p[f"synthesis{i}.noise_weight"], (1, c, 1, 1)), shape)
            x = ops.add(x, ops.elementwise_mul(_noise_tensor(noise.layers[i], shape), wb))
        x = ops.relu(x)
        normed = ops.instance_norm(x)
        if override is not None and override.layer == i:
            gamma = _per_sample(override.gamma, n, shape)
            beta = _per_sample(override.beta, n, shape)
            x = ops.add(ops.elementwise_mul(gamma, normed), beta)
        else:
            gamma = ops.linear(w, _w(p, f"synthesis{i}.style_gamma.weight"), p[f"synthesis{i}.style_gamma.bias"])
            gamma = ops.add(gamma, Tensor(np.ones(gamma.shape), gamma.dtype))
            beta = ops.linear(w, _w(p, f"synthesis{i}.style_beta.weight"), p[f"synthesis{i}.style_beta.bias"])
            x = ops.channel_affine(normed, gamma, beta)
    return ops.sigmoid(x)


def generate(
    model: GeneratorModel,
    s: Tensor | np.ndarray,
    r: NoiseInput | None = None,
    override: StyleOverride | None = None,
) -> Tensor:
    """Generate one image (C, H, W) from one seed vector."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.shape != (model.arch.seed_dim,):
        raise ArchitectureError(f"seed has shape {s.shape}, expected ({model.arch.seed_dim},)")
    if not np.all(np.isfinite(s.data)):
        raise GenerationError("seed contains non-finite values")
    img = synthesize(model, ops.reshape(s, (1, model.arch.seed_dim)), r, override)
    if not np.all(np.isfinite(img.data)):
        raise GenerationError("generation produced non-finite pixels")
    return Tensor._wrap(img.data[0])


def generate_batch(model: GeneratorModel, seeds: np.ndarray, r: NoiseInput | None = None) -> np.ndarray:
    out = synthesize(model, Tensor(seeds), r).data
    if not np.all(np.isfinite(out)):
        raise GenerationError("generation produced non-finite pixels")
    return out


# --- the strict-attribution counterexample ------------------------------------


def force_output(model: GeneratorModel, target: Tensor | np.ndarray) -> StyleOverride:
    """Style override that makes a style-injection model emit ``target``.

    Sets the final AdaIN layer's gamma to 0 and beta to logit(target), so the
    layer ignores its (seed- and noise-dependent) input entirely.
    """
    if model.arch.kind != "style-injection":
        raise ArchitectureError("force_output needs a style-injection model")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != model.arch.image_shape:
        raise ArchitectureError(f"target shape {t.shape} != image shape {model.arch.image_shape}")
    lo, hi = 1e-6, 1 - 1e-6
    clamped = int(np.sum((t < lo) | (t > hi)))
    t = np.clip(t, lo, hi)
    beta = np.log(t) - np.log1p(-t)
    last = len(model.arch.layer_shapes()) - 1
    return StyleOverride(last, np.zeros(t.shape, np.float32), beta.astype(np.float32), clamped)


# --- serialization ------------------------------------------------------------


def serialize(model: GeneratorModel) -> bytes:
    """``DATR`` | u16 version | u32 json length | arch json | f32le params (sorted names)."""
    arch = model.arch.to_json().encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(arch)), arch]
    for name in sorted(model.params):
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> GeneratorModel:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = 10
    if len(blob) < off + n:
        raise ModelFormatError("truncated architecture header")
    try:
        arch = GeneratorArch.from_dict(json.loads(blob[off : off + n]))
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"invalid architecture descriptor: {exc}") from exc
    off += n
    params = {}
    for name, shape in sorted(param_shapes(arch).items()):
        size = int(np.prod(shape)) * 4
        if len(blob) < off + size:
            raise ModelFormatError(f"truncated payload at parameter {name}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        off += size
    if off != len(blob):
        raise ModelFormatError(f"{len(blob) - off} trailing bytes after parameters")
    return GeneratorModel(arch, params)


def model_digest(model: GeneratorModel) -> str:
    """SHA-256 (hex) of the serialized model."""
    return hashlib.sha256(serialize(model)).hexdigest()


def save_model(model: GeneratorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> GeneratorModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
