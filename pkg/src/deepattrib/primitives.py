"""Forward and backward rules for every tape primitive.

Each rule works on raw numpy arrays. ``forward(arrays, attrs)`` returns
``(out, saved)``; ``backward(g, arrays, out, saved, attrs)`` returns one
gradient (or ``None``) per input. Rules never broadcast implicitly: shape
mismatches raise :class:`ShapeError` naming the primitive.

Accumulation order inside every rule is fixed (plain loops over kernel taps
in row-major order, numpy reductions over fixed axes), so a given input
always yields the same bits on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numba
import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives inputs with incompatible shapes."""


class UnknownPrimitiveError(KeyError):
    pass


@dataclass(frozen=True)
class Rule:
    arity: int | None  # None = variadic
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., list[np.ndarray | None]]
    # partial rules take needs=(bool per input) and may return None for unneeded inputs
    partial: bool = False


RULES: dict[str, Rule] = {}


def _rule(name: str, arity: int | None):
    def deco(cls):
        RULES[name] = Rule(arity, cls.forward, cls.backward, getattr(cls, "partial", False))
        return cls

    return deco


def _fail(kind: str, msg: str) -> None:
    raise ShapeError(f"{kind}: {msg}")


def _same_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        _fail(kind, f"shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _axes(attrs: dict, ndim: int) -> tuple[int, ...]:
    axis = attrs.get("axis")
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced ``axes``."""
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


# --- linear algebra ---------------------------------------------------------


@_rule("matmul", 2)
class _MatMul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2:
            _fail("matmul", f"expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            _fail("matmul", f"inner dimensions {a.shape[1]} and {b.shape[0]} differ")
        return a @ b, None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        a, b = xs
        return [g @ b.T, a.T @ g]


@_rule("add", 2)
class _Add:
    @staticmethod
    def forward(xs, attrs):
        _same_shape("add", *xs)
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g, g]


@_rule("sub", 2)
class _Sub:
    @staticmethod
    def forward(xs, attrs):
        _same_shape("sub", *xs)
        return xs[0] - xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g, -g]


@_rule("scale", 1)
class _Scale:
    @staticmethod
    def forward(xs, attrs):
        c = xs[0].dtype.type(attrs["factor"])
        return xs[0] * c, None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g * g.dtype.type(attrs["factor"])]


@_rule("elementwise_mul", 2)
class _Mul:
    @staticmethod
    def forward(xs, attrs):
        _same_shape("elementwise_mul", *xs)
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g * xs[1], g * xs[0]]


# --- pointwise nonlinearities -------------------------------------------------


@_rule("relu", 1)
class _Relu:
    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0).astype(xs[0].dtype, copy=False), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        # derivative at exactly 0 is 0
        return [g * (xs[0] > 0)]


@_rule("tanh", 1)
class _Tanh:
    @staticmethod
    def forward(xs, attrs):
        return np.tanh(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g * (1 - out * out)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the matching branch per sign
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


@_rule("sigmoid", 1)
class _Sigmoid:
    @staticmethod
    def forward(xs, attrs):
        return _sigmoid(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g * out * (1 - out)]


@_rule("softplus", 1)
class _Softplus:
    """log(1 + exp(x)), the stable building block of log-sigmoid losses."""

    @staticmethod
    def forward(xs, attrs):
        return np.logaddexp(xs[0].dtype.type(0), xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g * _sigmoid(xs[0])]


@_rule("sqrt", 1)
class _Sqrt:
    @staticmethod
    def forward(xs, attrs):
        if np.any(xs[0] < 0):
            raise ValueError("sqrt: negative input")
        return np.sqrt(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        # d sqrt(x)/dx at x = 0 is defined as 0 (keeps d(x, x) gradients finite)
        safe = np.where(out > 0, out, 1)
        return [np.where(out > 0, g * 0.5 / safe, 0).astype(g.dtype, copy=False)]


# --- reductions ---------------------------------------------------------------


@_rule("sum", 1)
class _Sum:
    @staticmethod
    def forward(xs, attrs):
        axes = _axes(attrs, xs[0].ndim)
        return np.asarray(xs[0].sum(axis=axes), dtype=xs[0].dtype), axes

    @staticmethod
    def backward(g, xs, out, axes, attrs):
        return [np.array(_expand(g, xs[0].shape, axes))]


@_rule("mean", 1)
class _Mean:
    @staticmethod
    def forward(xs, attrs):
        axes = _axes(attrs, xs[0].ndim)
        return np.asarray(xs[0].mean(axis=axes), dtype=xs[0].dtype), axes

    @staticmethod
    def backward(g, xs, out, axes, attrs):
        n = int(np.prod([xs[0].shape[a] for a in axes]))
        return [np.array(_expand(g, xs[0].shape, axes)) / g.dtype.type(n)]


@_rule("variance", 1)
class _Variance:
    """Population variance (divides by n)."""

    @staticmethod
    def forward(xs, attrs):
        axes = _axes(attrs, xs[0].ndim)
        mu = xs[0].mean(axis=axes, keepdims=True)
        d = xs[0] - mu
        return np.asarray((d * d).mean(axis=axes), dtype=xs[0].dtype), (axes, d)

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        axes, d = saved
        n = int(np.prod([xs[0].shape[a] for a in axes]))
        return [_expand(g, xs[0].shape, axes) * d * g.dtype.type(2.0 / n)]


@_rule("l2_norm_sq", 1)
class _L2NormSq:
    @staticmethod
    def forward(xs, attrs):
        axes = _axes(attrs, xs[0].ndim)
        x = xs[0]
        return np.asarray((x * x).sum(axis=axes), dtype=x.dtype), axes

    @staticmethod
    def backward(g, xs, out, axes, attrs):
        return [_expand(g, xs[0].shape, axes) * 2 * xs[0]]


@_rule("log_softmax", 1)
class _LogSoftmax:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", -1)
        x = xs[0]
        m = x.max(axis=axis, keepdims=True)
        z = x - m
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        return out, axis

    @staticmethod
    def backward(g, xs, out, axis, attrs):
        return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


# --- layout -------------------------------------------------------------------


@_rule("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(xs, attrs):
        shape = tuple(attrs["shape"])
        if int(np.prod(shape)) != xs[0].size:
            _fail("reshape", f"cannot reshape {xs[0].shape} to {shape}")
        return xs[0].reshape(shape), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return [g.reshape(xs[0].shape)]


@_rule("broadcast_to", 1)
class _BroadcastTo:
    """Explicit broadcasting; the only primitive that expands singleton axes."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        shape = tuple(attrs["shape"])
        if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
            _fail("broadcast_to", f"cannot broadcast {x.shape} to {shape}")
        return np.array(np.broadcast_to(x, shape)), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        axes = tuple(i for i, (a, b) in enumerate(zip(xs[0].shape, g.shape)) if a != b)
        return [g.sum(axis=axes, keepdims=True) if axes else g]


@_rule("concat", None)
class _Concat:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", 0)
        ref = xs[0].shape
        ax = axis % len(ref)
        for x in xs[1:]:
            if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
                _fail("concat", f"shapes {ref} and {x.shape} disagree off axis {axis}")
        return np.concatenate(xs, axis=axis), ax

    @staticmethod
    def backward(g, xs, out, ax, attrs):
        bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return list(np.split(g, bounds, axis=ax))


@_rule("slice", 1)
class _Slice:
    """Basic slicing with a tuple of ``(start, stop)`` pairs, one per axis."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        spans = attrs["spans"]
        if len(spans) != x.ndim:
            _fail("slice", f"{len(spans)} spans for a {x.ndim}-D input")
        idx = tuple(slice(a, b) for a, b in spans)
        return np.array(x[idx]), idx

    @staticmethod
    def backward(g, xs, out, idx, attrs):
        gx = np.zeros_like(xs[0])
        gx[idx] = g
        return [gx]


@_rule("nearest_upsample2x", 1)
class _Upsample:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            _fail("nearest_upsample2x", f"expects NCHW input, got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        n, c, h, w = xs[0].shape
        return [g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))]


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    return m.astype(dtype)


@_rule("resize_bilinear", 1)
class _ResizeBilinear:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            _fail("resize_bilinear", f"expects NCHW input, got {x.shape}")
        ho, wo = attrs["size"]
        rh = bilinear_matrix(ho, x.shape[2], x.dtype)
        rw = bilinear_matrix(wo, x.shape[3], x.dtype)
        out = np.einsum("ih,nchw,jw->ncij", rh, x, rw)
        return out, (rh, rw)

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        rh, rw = saved
        return [np.einsum("ih,ncij,jw->nchw", rh, g, rw)]


# --- convolutions -------------------------------------------------------------


def _conv_dims(kind, x, w, stride, padding, transpose):
    if x.ndim != 4 or w.ndim != 4:
        _fail(kind, f"expects NCHW input and 4-D kernel, got {x.shape} and {w.shape}")
    cin = w.shape[0] if transpose else w.shape[1]
    if x.shape[1] != cin:
        _fail(kind, f"input has {x.shape[1]} channels, kernel expects {cin}")
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    if transpose:
        ho = (h - 1) * stride - 2 * padding + kh
        wo = (wd - 1) * stride - 2 * padding + kw
    else:
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        _fail(kind, f"kernel {kh}x{kw} too large for {h}x{wd} input")
    return ho, wo


@numba.njit(cache=True)
def _gather_taps(xp, cols, stride):
    c_, kh, kw, n_, ho, wo = cols.shape
    for c in range(c_):
        for i in range(kh):
            for j in range(kw):
                for n in range(n_):
                    for h in range(ho):
                        for w in range(wo):
                            cols[c, i, j, n, h, w] = xp[n, c, i + stride * h, j + stride * w]


@numba.njit(cache=True)
def _gather_taps_s2(xp, cols):
    # stride as a literal lets LLVM strength-reduce the index arithmetic (~30% faster)
    c_, kh, kw, n_, ho, wo = cols.shape
    for c in range(c_):
        for i in range(kh):
            for j in range(kw):
                for n in range(n_):
                    for h in range(ho):
                        for w in range(wo):
                            cols[c, i, j, n, h, w] = xp[n, c, i + 2 * h, j + 2 * w]


@numba.njit(cache=True)
def _scatter_taps(cols, full, stride):
    c_, kh, kw, n_, h_, w_ = cols.shape
    for c in range(c_):
        for n in range(n_):
            for i in range(kh):
                for j in range(kw):
                    for h in range(h_):
                        for w in range(w_):
                            full[c, n, i + stride * h, j + stride * w] += cols[c, i, j, n, h, w]


@numba.njit(cache=True)
def _scatter_taps_s2(cols, full):
    c_, kh, kw, n_, h_, w_ = cols.shape
    for c in range(c_):
        for n in range(n_):
            for i in range(kh):
                for j in range(kw):
                    for h in range(h_):
                        for w in range(w_):
                            full[c, n, i + 2 * h, j + 2 * w] += cols[c, i, j, n, h, w]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C, kh, kw, N, Ho, Wo) patch buffer gathered from a padded NCHW input."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xp = np.ascontiguousarray(xp)
    if stride == 2:
        _gather_taps_s2(xp, cols)
    else:
        _gather_taps(xp, cols, stride)
    return cols


def _col2im(cols: np.ndarray, full: np.ndarray, stride: int) -> None:
    """Accumulate a (C, kh, kw, N, H, W) buffer into ``full`` laid out (C, N, *, *).

    For each output element, taps are added in row-major (i, j) order; this
    fixes the summation order.
    """
    cols = np.ascontiguousarray(cols)
    if stride == 2:
        _scatter_taps_s2(cols, full)
    else:
        _scatter_taps(cols, full, stride)


@_rule("conv2d", 2)
class _Conv2d:
    """Cross-correlation. x: (N, Cin, H, W), w: (Cout, Cin, kh, kw)."""

    partial = True

    @staticmethod
    def forward(xs, attrs):
        x, w = xs
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        ho, wo = _conv_dims("conv2d", x, w, s, p, False)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, w.shape[2], w.shape[3], s, ho, wo)
        out = w.reshape(w.shape[0], -1) @ cols.reshape(-1, x.shape[0] * ho * wo)
        out = out.reshape(w.shape[0], x.shape[0], ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out), cols

    @staticmethod
    def backward(g, xs, out, cols, attrs, needs=(True, True)):
        x, w = xs
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        n, c, h, wd = x.shape
        cout = w.shape[0]
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gt @ cols.reshape(-1, gt.shape[1]).T).reshape(w.shape) if needs[1] else None
        if not needs[0]:
            return [None, gw]
        gcols = (w.reshape(cout, -1).T @ gt).reshape(cols.shape)
        gxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        _col2im(gcols, gxp, s)
        gx = gxp[:, :, p : p + h, p : p + wd].transpose(1, 0, 2, 3)
        return [np.ascontiguousarray(gx), gw]


@_rule("conv_transpose2d", 2)
class _ConvTranspose2d:
    """Transposed convolution. x: (N, Cin, H, W), w: (Cin, Cout, kh, kw)."""

    partial = True

    @staticmethod
    def forward(xs, attrs):
        x, w = xs
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        ho, wo = _conv_dims("conv_transpose2d", x, w, s, p, True)
        n, cin, h, wd = x.shape
        cout, kh, kw = w.shape[1:]
        xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(cin, -1)
        cols = (w.reshape(cin, -1).T @ xt).reshape(cout, kh, kw, n, h, wd)
        full = np.zeros((cout, n, (h - 1) * s + kh, (wd - 1) * s + kw), dtype=x.dtype)
        _col2im(cols, full, s)
        out = full[:, :, p : p + ho, p : p + wo].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out), xt

    @staticmethod
    def backward(g, xs, out, xt, attrs, needs=(True, True)):
        x, w = xs
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        n, cin, h, wd = x.shape
        cout, kh, kw = w.shape[1:]
        full_h, full_w = (h - 1) * s + kh, (wd - 1) * s + kw
        gfull = np.zeros((n, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, p : p + g.shape[2], p : p + g.shape[3]] = g
        gcols = _im2col(gfull, kh, kw, s, h, wd).reshape(cout * kh * kw, -1)
        gw = (xt @ gcols.T).reshape(w.shape) if needs[1] else None
        if not needs[0]:
            return [None, gw]
        gx = (w.reshape(cin, -1) @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3)
        return [np.ascontiguousarray(gx), gw]


@_rule("instance_norm", 1)
class _InstanceNorm:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            _fail("instance_norm", f"expects NCHW input, got {x.shape}")
        eps = x.dtype.type(attrs.get("eps", 1e-5))
        mu = x.mean(axis=(2, 3), keepdims=True)
        d = x - mu
        var = (d * d).mean(axis=(2, 3), keepdims=True)
        inv = 1 / np.sqrt(var + eps)
        xhat = d * inv
        return xhat, inv

    @staticmethod
    def backward(g, xs, out, inv, attrs):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * out).mean(axis=(2, 3), keepdims=True)
        return [inv * (g - gm - out * gxm)]


def get_rule(kind: str) -> Rule:
    try:
        return RULES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive kind {kind!r}") from None
