import itertools
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvip.errors import GraphError, InputError
from cvip.tensor import Tensor, inflate_2d_to_3d, ops, precision, sgd_step
from cvip.tensor.checkpoint import checkpoint_bytes, parse_checkpoint
from cvip.errors import DecodeError
from cvip.tensor.gradcheck import check_gradients
from cvip.tensor.optim import SGD


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for j in range(o):
            for y in range(oh):
                for x_ in range(ow):
                    acc = b[j]
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, ci, y * stride + dy, x_ * stride + dx] * w[j, ci, dy, dx]
                    out[i, j, y, x_] = acc
    return out


def naive_conv3d(x, w, b, stride, pad):
    n, c, t, h, wd = x.shape
    o, _, kt, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    dims = [(s + 2 * pad - k) // stride + 1 for s, k in zip((t, h, wd), (kt, kh, kw))]
    out = np.zeros((n, o, *dims))
    for i, j, z, y, x_ in itertools.product(range(n), range(o), *(range(d) for d in dims)):
        acc = b[j]
        for ci, dz, dy, dx in itertools.product(range(c), range(kt), range(kh), range(kw)):
            acc += xp[i, ci, z * stride + dz, y * stride + dy, x_ * stride + dx] * w[j, ci, dz, dy, dx]
        out[i, j, z, y, x_] = acc
    return out


def test_conv2d_identity_and_counts():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    np.testing.assert_array_equal(ops.conv2d(x, w).data, x.data)
    ones = Tensor(np.ones((1, 1, 4, 4)))
    out = ops.conv2d(ones, Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_naive(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-5)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv3d_matches_naive(stride, pad):
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(1, 2, 4, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, stride, pad), atol=1e-5)


def test_conv3d_kt1_equals_per_frame_conv2d():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 6, 6)).astype(np.float32)
    w = rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
    out3 = ops.conv3d(Tensor(x), Tensor(w[:, :, None]), padding=(0, 1, 1)).data
    frames = x.transpose(0, 2, 1, 3, 4).reshape(8, 3, 6, 6)
    out2 = ops.conv2d(Tensor(frames), Tensor(w), padding=1).data
    np.testing.assert_array_equal(out3, out2.reshape(2, 4, 5, 6, 6).transpose(0, 2, 1, 3, 4))


def test_conv3d_constant_in_time():
    rng = np.random.default_rng(5)
    x = np.repeat(rng.normal(size=(1, 2, 1, 5, 5)), 6, axis=2)
    out = ops.conv3d(Tensor(x), Tensor(rng.normal(size=(3, 2, 3, 3, 3)))).data
    np.testing.assert_allclose(out, np.repeat(out[:, :, :1], out.shape[2], axis=2), atol=1e-5)


def test_conv_errors():
    with pytest.raises(InputError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(InputError):
        ops.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(InputError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), stride=0)


def test_simple_layers():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_allclose(ops.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    c = Tensor(np.full((2, 3, 4, 5, 5), 1.5))
    np.testing.assert_allclose(ops.global_avg_pool(c).data, np.full((2, 3), 1.5))
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(ops.max_pool(x, 2).data[0, 0], [[5, 7], [13, 15]])


def test_backward_basics():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(np.arange(6.0), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, 2 * y.data)
    untracked = Tensor(np.ones(3))
    z = Tensor(np.ones(3), requires_grad=True)
    (z * untracked).sum().backward()
    assert untracked.grad is None
    with pytest.raises(GraphError):
        (z * 2).backward()


def test_backward_cycle_detected():
    a = Tensor(np.ones(1), requires_grad=True)
    b = a * 2
    c = b * 3
    b._parents = (c,)
    with pytest.raises(GraphError):
        c.sum().backward()


def test_batch_norm_running_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.1 * flat.mean(1), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * flat.var(1, ddof=1), rtol=1e-5)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False).data
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect, rtol=1e-5)


def weighted(fn, shape_out_seed=0):
    """Random linear functional of fn's output so every output element matters."""
    def f(*ts):
        out = fn(*ts)
        r = np.random.default_rng(shape_out_seed).normal(size=out.shape)
        return (out * Tensor(r)).sum()
    return f


GRAD_CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (1, 4)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / b, [(2, 3), (2, 3)]),
    "abs": (ops.abs, [(3, 5)]),
    "relu": (ops.relu, [(3, 5)]),
    "mean": (lambda a: ops.mean(a, axis=1), [(3, 5)]),
    "softmax": (ops.softmax, [(3, 5)]),
    "log_softmax": (ops.log_softmax, [(3, 5)]),
    "linear": (ops.linear, [(4, 6), (3, 6), (3,)]),
    "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, 2, 1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    "conv3d": (lambda x, w: ops.conv3d(x, w, None, (2, 1, 1), 1), [(1, 2, 4, 4, 4), (3, 2, 3, 3, 3)]),
    "conv3d_replicate": (lambda x, w: ops.conv3d(x, w, None, 1, 1, "replicate"),
                         [(1, 2, 3, 3, 3), (2, 2, 3, 3, 3)]),
    "max_pool2d": (lambda x: ops.max_pool(x, 2), [(2, 2, 4, 4)]),
    "max_pool3d": (lambda x: ops.max_pool(x, (1, 3, 3), (1, 2, 2), (0, 1, 1)), [(1, 2, 2, 5, 5)]),
    "global_avg_pool": (ops.global_avg_pool, [(2, 3, 2, 3, 3)]),
    "pad_edge": (lambda x: ops.pad(x, [(0, 0), (2, 1), (1, 0)], "edge"), [(2, 3, 2)]),
    "bn_train": (lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(3), np.ones(3), True),
                 [(4, 3, 2, 2), (3,), (3,)]),
    "bn_eval": (lambda x, g, b: ops.batch_norm(x, g, b, np.full(3, 0.5), np.full(3, 2.0), False),
                [(4, 3, 2, 2), (3,), (3,)]),
    "pick": (lambda x: ops.pick(x, np.array([0, 2, 1])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_finite_difference(name):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [rng.normal(size=s) for s in shapes]
    # keep inputs clear of kinks (relu/abs at 0, max ties) so central differences are valid
    x = inputs[0]
    if name in ("abs", "relu", "div"):
        inputs = [np.sign(a) * (np.abs(a) + 0.1) for a in inputs]
    if name.startswith("max_pool"):
        inputs[0] = (rng.permutation(x.size).reshape(x.shape) * 0.01 + rng.uniform(0, 1e-3, x.shape))
    assert check_gradients(weighted(fn), inputs) < 1e-4


def test_inflation_modes():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    for mode in ("mean", "center"):
        np.testing.assert_array_equal(inflate_2d_to_3d(w, 1, mode)[:, :, 0], w)
    m = inflate_2d_to_3d(w, 3, "mean")
    np.testing.assert_allclose(m.sum(axis=2), w, rtol=1e-6)
    with pytest.raises(InputError):
        inflate_2d_to_3d(w, 0)


def test_mean_inflation_constant_clip():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    frame = rng.normal(size=(1, 3, 1, 6, 6)).astype(np.float32)
    clip = np.repeat(frame, 5, axis=2)
    out3 = ops.conv3d(Tensor(clip), Tensor(inflate_2d_to_3d(w, 3)), padding=1,
                      temporal_padding="replicate").data
    out2 = ops.conv2d(Tensor(frame[:, :, 0]), Tensor(w), padding=1).data
    for t in range(5):
        np.testing.assert_allclose(out3[:, :, t], out2, atol=1e-5)


def test_center_inflation_middle_frame():
    rng = np.random.default_rng(2)
    # small integers keep every partial sum exact regardless of summation order
    w = rng.integers(-4, 5, size=(2, 3, 3, 3)).astype(np.float32)
    clip = rng.integers(-8, 9, size=(1, 3, 3, 5, 5)).astype(np.float32)
    out3 = ops.conv3d(Tensor(clip), Tensor(inflate_2d_to_3d(w, 3, "center")), padding=1).data
    out2 = ops.conv2d(Tensor(clip[:, :, 1]), Tensor(w), padding=1).data
    np.testing.assert_array_equal(out3[:, :, 1], out2)


def test_sgd_examples():
    p = [np.array([1.0])]
    assert sgd_step(p, [np.array([0.5])], lr=0.0)[0][0] == 1.0
    assert sgd_step(p, [np.array([0.5])], lr=0.1)[0][0] == pytest.approx(0.95)
    vel = [np.zeros(1)]
    p1 = sgd_step(p, [np.array([0.5])], 0.1, 0.9, 0.0, vel)
    p2 = sgd_step(p1, [np.array([0.5])], 0.1, 0.9, 0.0, vel)
    # v1 = 0.5, v2 = 0.9 * 0.5 + 0.5 = 0.95
    assert p2[0][0] == pytest.approx(1.0 - 0.1 * 0.5 - 0.1 * 0.95)
    with pytest.raises(InputError):
        sgd_step(p, [np.zeros(2)], 0.1)


def test_sgd_class_weight_decay():
    t = Tensor(np.array([2.0]), requires_grad=True)
    opt = SGD([t], lr=0.1, momentum=0.0, weight_decay=0.5)
    t.grad = np.array([1.0], dtype=t.dtype)
    opt.step()
    assert t.data[0] == pytest.approx(2.0 - 0.1 * (1.0 + 0.5 * 2.0))


def test_checkpoint_round_trip_and_layout():
    state = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32(3.0) * np.ones(())}
    raw = checkpoint_bytes("arch=test", state)
    assert raw[:4] == b"CKPT"
    desc, back = parse_checkpoint(raw)
    assert desc == "arch=test"
    assert list(back) == ["a.weight", "b"]
    np.testing.assert_array_equal(back["a.weight"], state["a.weight"])
    with pytest.raises(DecodeError):
        parse_checkpoint(raw[:-1])
    with pytest.raises(DecodeError):
        parse_checkpoint(b"XXXX" + raw[4:])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(0, 2), st.integers(1, 2))
def test_conv_output_size_property(c, o, n, pad, stride):
    k = 3
    if n + 2 * pad < k:
        return
    out = ops.conv2d(Tensor(np.ones((1, c, n, n))), Tensor(np.ones((o, c, k, k))), None, stride, pad)
    assert out.shape[2] == (n + 2 * pad - k) // stride + 1
    assert np.isfinite(out.data).all()


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x, w = Tensor(rng.normal(size=(2, 3, 8, 8))), Tensor(rng.normal(size=(4, 3, 3, 3)))
    a = ops.conv2d(x, w, padding=1).data
    b = ops.conv2d(x, w, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_precision_context():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
