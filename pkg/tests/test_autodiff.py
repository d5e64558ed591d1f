import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepattrib import ops
from deepattrib.gradcheck import check_gradients
from deepattrib.optim import AdamState, adam_step
from deepattrib.primitives import ShapeError, UnknownPrimitiveError
from deepattrib.tensor import (
    DetachedNodeError,
    NonScalarOutputError,
    Tape,
    Tensor,
    apply_primitive,
    backward,
    gradients,
)

TOL = 1e-4


def naive_conv_transpose(x, w, stride, padding):
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for b in range(n):
        for ci in range(cin):
            for co in range(cout):
                for y in range(h):
                    for xx in range(wd):
                        for i in range(kh):
                            for j in range(kw):
                                full[b, co, y * stride + i, xx * stride + j] += x[b, ci, y, xx] * w[ci, co, i, j]
    ho = full.shape[2] - 2 * padding
    wo = full.shape[3] - 2 * padding
    return full[:, :, padding : padding + ho, padding : padding + wo]


def naive_conv2d(x, w, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[b, :, y * stride : y * stride + kh, xx * stride : xx * stride + kw]
                    out[b, co, y, xx] = np.sum(patch * w[co])
    return out


class TestForward:
    def test_matmul_identity(self):
        out = ops.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1, 0, 2.5])).data, [0, 0, 2.5])

    def test_conv_transpose_ones(self):
        x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2) + 1
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        out = ops.conv_transpose2d(Tensor(x), Tensor(w), stride=2)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out.data, naive_conv_transpose(x, w, 2, 0))
        np.testing.assert_array_equal(out.data[0, 0], np.kron([[1, 2], [3, 4]], np.ones((2, 2))))

    @pytest.mark.parametrize("stride,padding,k", [(2, 1, 4), (1, 0, 3), (2, 0, 3), (3, 1, 4)])
    def test_conv_transpose_matches_loops(self, stride, padding, k):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 3, 4, 5))
        w = rng.normal(size=(3, 2, k, k))
        out = ops.conv_transpose2d(Tensor(x, np.float64), Tensor(w, np.float64), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv_transpose(x, w, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(2, 1, 3), (1, 0, 3), (1, 1, 3), (2, 0, 2)])
    def test_conv2d_matches_loops(self, stride, padding, k):
        rng = np.random.default_rng(stride * 7 + padding)
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, k, k))
        out = ops.conv2d(Tensor(x, np.float64), Tensor(w, np.float64), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding), atol=1e-12)

    def test_instance_norm_statistics(self):
        x = np.random.default_rng(0).normal(3, 2, size=(2, 3, 5, 5))
        y = ops.instance_norm(Tensor(x, np.float64)).data
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-4)

    def test_resize_same_size_is_identity(self):
        x = Tensor(np.random.default_rng(0).random((1, 1, 8, 8)))
        assert ops.resize_bilinear(x, (8, 8)) is x
        out = apply_primitive("resize_bilinear", [x], {"size": (8, 8)})
        np.testing.assert_array_equal(out.data, x.data)

    def test_sigmoid_extremes_finite(self):
        y = ops.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])

    def test_tensor_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5


class TestShapeErrors:
    def test_add_never_broadcasts(self):
        with pytest.raises(ShapeError, match="add"):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_matmul_inner_dims(self):
        with pytest.raises(ShapeError, match="matmul.*3 and 4"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((4, 3, 3, 3))))

    def test_unknown_kind(self):
        with pytest.raises(UnknownPrimitiveError):
            apply_primitive("fft", [Tensor([1.0])])

    def test_broadcast_to_rejects_non_singleton(self):
        with pytest.raises(ShapeError):
            ops.broadcast_to(Tensor(np.ones((2, 3))), (4, 3))

    def test_reshape_size(self):
        with pytest.raises(ShapeError):
            ops.reshape(Tensor(np.ones(6)), (4, 2))


class TestBackward:
    def test_norm_sq_gradient(self):
        with Tape() as tape:
            s = tape.watch(Tensor([1.0, 2.0]))
            f = ops.l2_norm_sq(s)
        (g,) = gradients(tape, f, [s])
        np.testing.assert_array_equal(g.data, [2, 4])

    def test_relu_sum_gradient(self):
        with Tape() as tape:
            s = tape.watch(Tensor([-1.0, 3.0]))
            f = ops.sum(ops.relu(s))
        (g,) = gradients(tape, f, [s])
        np.testing.assert_array_equal(g.data, [0, 1])

    def test_relu_gradient_at_zero_is_zero(self):
        with Tape() as tape:
            s = tape.watch(Tensor([0.0]))
            f = ops.sum(ops.relu(s))
        assert gradients(tape, f, [s])[0].data[0] == 0

    def test_non_scalar_output(self):
        with Tape() as tape:
            s = tape.watch(Tensor([1.0, 2.0]))
            y = ops.relu(s)
        with pytest.raises(NonScalarOutputError):
            backward(tape, y)

    def test_detached_output(self):
        with Tape() as tape:
            tape.watch(Tensor([1.0]))
        with pytest.raises(DetachedNodeError):
            backward(tape, ops.sum(Tensor([1.0, 2.0])))

    def test_unused_leaf_gets_zero(self):
        with Tape() as tape:
            a = tape.watch(Tensor([1.0]))
            b = tape.watch(Tensor([5.0, 6.0]))
            f = ops.l2_norm_sq(a)
        ga, gb = gradients(tape, f, [a, b])
        np.testing.assert_array_equal(gb.data, [0, 0])

    def test_fan_out_accumulates(self):
        with Tape() as tape:
            a = tape.watch(Tensor([3.0]))
            f = ops.sum(ops.elementwise_mul(a, a))
        assert gradients(tape, f, [a])[0].data[0] == 6.0

    def test_tape_inputs_precede_nodes(self):
        with Tape() as tape:
            x = tape.watch(Tensor(np.ones((2, 3))))
            w = tape.watch(Tensor(np.ones((3, 1))))
            ops.sum(ops.tanh(ops.matmul(x, w)))
        for i, node in enumerate(tape.nodes):
            assert all(src is None or src < i for src in node.inputs)

    def test_replay_is_bit_exact(self):
        rng = np.random.default_rng(1)
        with Tape() as tape:
            x = tape.watch(Tensor(rng.normal(size=(4, 8))))
            w = tape.watch(Tensor(rng.normal(size=(8, 3))))
            y = ops.sum(ops.sigmoid(ops.matmul(x, w)))
        vals = tape.replay({x.node: x.data, w.node: w.data})
        assert vals[y.node].tobytes() == y.data.tobytes()

    def test_random_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(5, 4))
        ws = [rng.normal(size=(4, 6)), rng.normal(size=(6, 6)), rng.normal(size=(6, 1))]

        def mlp(x, w1, w2, w3):
            h = ops.tanh(ops.matmul(x, w1))
            h = ops.relu(ops.matmul(h, w2))
            return ops.sum(ops.sigmoid(ops.matmul(h, w3)))

        errs = check_gradients(mlp, [x, *ws])
        assert max(errs) < TOL, errs


def _rand(rng, *shape):
    return rng.normal(size=shape)


def _away_from_kinks(rng, *shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


# One scalar-valued probe per primitive. A random weighting tensor turns the
# primitive's output into a scalar so every output coordinate is exercised.
def _probe(rng, shape):
    return Tensor(rng.normal(size=shape), np.float64)


PRIMITIVE_CASES = {
    "matmul": (lambda rng: [_rand(rng, 3, 4), _rand(rng, 4, 2)], lambda a, b: ops.matmul(a, b)),
    "add": (lambda rng: [_rand(rng, 3, 4), _rand(rng, 3, 4)], lambda a, b: ops.add(a, b)),
    "sub": (lambda rng: [_rand(rng, 3, 4), _rand(rng, 3, 4)], lambda a, b: ops.sub(a, b)),
    "scale": (lambda rng: [_rand(rng, 3, 4)], lambda a: ops.scale(a, -2.5)),
    "relu": (lambda rng: [_away_from_kinks(rng, 3, 4)], ops.relu),
    "tanh": (lambda rng: [_rand(rng, 3, 4)], ops.tanh),
    "sigmoid": (lambda rng: [_rand(rng, 3, 4)], ops.sigmoid),
    "softplus": (lambda rng: [_rand(rng, 3, 4) * 3], ops.softplus),
    "sqrt": (lambda rng: [np.abs(_rand(rng, 3, 4)) + 0.5], ops.sqrt),
    "conv2d": (
        lambda rng: [_rand(rng, 2, 2, 6, 6), _rand(rng, 3, 2, 3, 3)],
        lambda x, w: ops.conv2d(x, w, stride=2, padding=1),
    ),
    "conv_transpose2d": (
        lambda rng: [_rand(rng, 2, 3, 3, 3), _rand(rng, 3, 2, 4, 4)],
        lambda x, w: ops.conv_transpose2d(x, w, stride=2, padding=1),
    ),
    "nearest_upsample2x": (lambda rng: [_rand(rng, 2, 2, 3, 3)], ops.nearest_upsample2x),
    "resize_bilinear": (lambda rng: [_rand(rng, 1, 2, 5, 7)], lambda x: ops.resize_bilinear(x, (8, 4))),
    "mean": (lambda rng: [_rand(rng, 3, 4, 2)], lambda x: ops.mean(x, axis=(0, 2))),
    "variance": (lambda rng: [_rand(rng, 3, 4, 2)], lambda x: ops.variance(x, axis=1)),
    "sum": (lambda rng: [_rand(rng, 3, 4)], lambda x: ops.sum(x, axis=1)),
    "l2_norm_sq": (lambda rng: [_rand(rng, 3, 4)], lambda x: ops.l2_norm_sq(x, axis=0)),
    "elementwise_mul": (lambda rng: [_rand(rng, 3, 4), _rand(rng, 3, 4)], ops.elementwise_mul),
    "concat": (lambda rng: [_rand(rng, 2, 3), _rand(rng, 2, 5)], lambda a, b: ops.concat([a, b], axis=1)),
    "reshape": (lambda rng: [_rand(rng, 3, 4)], lambda x: ops.reshape(x, (2, 6))),
    "broadcast_to": (lambda rng: [_rand(rng, 1, 4, 1)], lambda x: ops.broadcast_to(x, (3, 4, 5))),
    "slice": (lambda rng: [_rand(rng, 4, 5)], lambda x: ops.slice_(x, [(1, 3), (0, 4)])),
    "instance_norm": (lambda rng: [_rand(rng, 2, 3, 4, 4)], ops.instance_norm),
    "log_softmax": (lambda rng: [_rand(rng, 3, 5)], lambda x: ops.log_softmax(x, axis=1)),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
def test_primitive_gradient(kind):
    make, fn = PRIMITIVE_CASES[kind]
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    inputs = make(rng)
    # fixed probe weights make the scalar objective depend on every output entry
    out_shape = fn(*[Tensor(a, np.float64) for a in inputs]).shape
    probe = _probe(np.random.default_rng(7), out_shape)

    def objective(*args):
        return ops.sum(ops.elementwise_mul(fn(*args), probe))

    errs = check_gradients(objective, inputs)
    assert max(errs) < TOL, (kind, errs)


def test_every_primitive_has_a_gradient_case():
    from deepattrib.primitives import RULES

    assert set(RULES) == set(PRIMITIVE_CASES)


class TestAdam:
    def test_zero_gradient_keeps_variable(self):
        var = Tensor([1.0, -2.0, 3.0])
        new, state = adam_step(AdamState.zeros_like(var), var, Tensor(np.zeros(3)))
        np.testing.assert_array_equal(new.data, var.data)
        assert state.step == 1

    def test_first_step_moves_by_lr(self):
        # m = 0.1, v = 0.001 -> m_hat = 1, v_hat = 1 -> x = -0.1 / (1 + 1e-8)
        new, _ = adam_step(AdamState.zeros_like(Tensor([0.0])), Tensor([0.0]), Tensor([1.0]))
        assert new.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-6)

    def test_quadratic_convergence(self):
        x = Tensor([0.0])
        state = AdamState.zeros_like(x, lr=0.1)
        for _ in range(100):
            with Tape() as tape:
                xv = tape.watch(x)
                f = ops.l2_norm_sq(ops.sub(xv, Tensor([3.0])))
            (g,) = gradients(tape, f, [xv])
            x, state = adam_step(state, x, g)
        assert abs(x.data[0] - 3) < 0.05

    def test_defaults(self):
        s = AdamState.zeros_like(Tensor([0.0]))
        assert (s.lr, s.beta1, s.beta2, s.epsilon) == (0.1, 0.9, 0.999, 1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step(AdamState.zeros_like(Tensor([0.0, 1.0])), Tensor([0.0, 1.0]), Tensor([1.0]))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_rows_update_independently(self, values):
        # a batched update equals per-element updates (what batched attempts rely on)
        var = Tensor(np.array(values, dtype=np.float32))
        grad = Tensor(np.array(values[::-1], dtype=np.float32))
        batched, _ = adam_step(AdamState.zeros_like(var), var, grad)
        for i in range(len(values)):
            single, _ = adam_step(AdamState.zeros_like(Tensor(var.data[i : i + 1])), Tensor(var.data[i : i + 1]), Tensor(grad.data[i : i + 1]))
            assert single.data[0] == batched.data[i]


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 8, 8)).astype(np.float32)
    w = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    a = ops.conv_transpose2d(Tensor(x), Tensor(w), 2, 1)
    b = ops.conv_transpose2d(Tensor(x), Tensor(w), 2, 1)
    assert a.data.tobytes() == b.data.tobytes()
