import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdakit import tensor as T
from fdakit.tensor import Tape, Tensor, grad_check


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


# ---------------------------------------------------------------- elementwise


def test_relu_definition():
    assert T.relu(T.tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]


def test_sign_definition():
    assert T.sign(T.tensor([-0.5, 0, 3])).data.tolist() == [-1, 0, 1]


def test_add_arithmetic():
    assert T.add(T.tensor([1, 2]), T.tensor([3, 4])).data.tolist() == [4, 6]


def test_elementwise_dispatch():
    a, b = T.tensor([1.0, -2.0]), T.tensor([3.0, 4.0])
    assert T.elementwise("sub", a, b).data.tolist() == [-2, -6]
    assert T.elementwise("mul", a, b).data.tolist() == [3, -8]
    assert T.elementwise("neg", a).data.tolist() == [-1, 2]
    assert T.elementwise("clamp", a, lo=-1, hi=0.5).data.tolist() == [0.5, -1]
    with pytest.raises(ValueError):
        T.elementwise("exp", a)


def test_binary_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.add(T.tensor([1, 2]), T.tensor([1, 2, 3]))


def test_scalar_operand_allowed():
    assert T.mul(T.tensor([1, 2]), 3.0).data.tolist() == [3, 6]


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(T.tensor([1.0, 0.0]))
    assert np.isfinite(T.log(T.tensor([0.0]), stabilize=1e-8).data).all()


def test_sign_and_relu_gradients():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.add(T.sign(x), T.relu(x)))
    tape.backward(y)
    # sign contributes nothing; relu subgradient at 0 is 0
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    m = T.tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(T.tensor(np.eye(2)), m).data, m.data)


def test_matmul_selector_row():
    assert T.matmul(T.tensor([[1, 0]]), T.tensor([[2], [5]])).data.tolist() == [[2]]


def test_matmul_dimension_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))


def test_matmul_grads_finite_difference():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = f64(rng.normal(size=(3, 2)))
    assert grad_check(lambda x: T.sum(T.mul(T.matmul(x, f64(b)), w)), a) < 1e-4
    assert grad_check(lambda x: T.sum(T.mul(T.matmul(f64(a), x), w)), b) < 1e-4


# ---------------------------------------------------------------- conv / pool


def test_conv_scaling():
    out = T.conv2d(T.tensor(np.ones((3, 3, 1))), T.tensor(np.full((1, 1, 1, 1), 2.0)))
    assert out.shape == (3, 3, 1)
    assert np.all(out.data == 2.0)


def test_conv_summation():
    x = np.arange(9.0).reshape(3, 3, 1)
    out = T.conv2d(T.tensor(x), T.tensor(np.ones((3, 3, 1, 1))))
    assert out.shape == (1, 1, 1)
    assert out.data.item() == x.sum()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 5, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    out = T.conv2d(f64(x), f64(k), stride=2, padding=1).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(out)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            for c in range(4):
                ref[i, j, c] = np.sum(patch * k[..., c])
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_output_too_small():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.tensor(np.ones((2, 2, 1))), T.tensor(np.ones((3, 3, 1, 1))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
def test_conv_grads_finite_difference(stride, padding):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=T.conv2d(f64(x), f64(k), stride, padding).shape)
    assert grad_check(lambda t: T.sum(T.mul(T.conv2d(t, f64(k), stride, padding, bias=f64(b)), f64(w))), x) < 1e-4
    assert grad_check(lambda t: T.sum(T.mul(T.conv2d(f64(x), t, stride, padding, bias=f64(b)), f64(w))), k) < 1e-4
    assert grad_check(lambda t: T.sum(T.mul(T.conv2d(f64(x), f64(k), stride, padding, bias=t), f64(w))), b) < 1e-4


def test_conv_batch_equals_single():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6, 6, 2)).astype(np.float32)
    k = rng.normal(size=(3, 3, 2, 5)).astype(np.float32)
    batched = T.conv2d(Tensor(x), Tensor(k), 1, 1).data
    for i in range(4):
        assert np.allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(k), 1, 1).data, atol=1e-5)


def test_maxpool_basic():
    out = T.maxpool2d(T.tensor(np.array([[1, 2], [3, 4]]).reshape(2, 2, 1)), 2)
    assert out.data.ravel().tolist() == [4]


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.ones((4, 4, 1)), requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.maxpool2d(x, 2))
    tape.backward(y)
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1
    assert np.array_equal(x.grad[..., 0], expected)


def test_maxpool_window_too_large():
    with pytest.raises(T.ShapeError):
        T.maxpool2d(T.tensor(np.ones((2, 2, 1))), 3)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_grads_finite_difference(window, stride):
    rng = np.random.default_rng(4)
    # a permutation keeps every window's max separated from the runner-up
    x = rng.permutation(32).reshape(4, 4, 2).astype(np.float64) / 4.0
    w = rng.normal(size=T.maxpool2d(f64(x), window, stride).shape)
    assert grad_check(lambda t: T.sum(T.mul(T.maxpool2d(t, window, stride), f64(w))), x) < 1e-4


# ---------------------------------------------------------------- losses / norms


def test_cross_entropy_uniform():
    loss = T.softmax_cross_entropy(T.tensor(np.zeros(10), dtype=np.float64), 3)
    assert math.isclose(loss.item(), math.log(10), rel_tol=1e-12)


def test_cross_entropy_stable_limit():
    loss = T.softmax_cross_entropy(T.tensor([1000.0, -1000.0]), 0)
    assert np.isfinite(loss.item()) and abs(loss.item()) < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(T.tensor(np.zeros(3)), 3)


def test_cross_entropy_grad():
    z = np.random.default_rng(5).normal(size=10)
    assert grad_check(lambda t: T.softmax_cross_entropy(t, 7), z) < 1e-4
    # analytic form: softmax - one_hot
    x = Tensor(z, requires_grad=True)
    with Tape() as tape:
        y = T.softmax_cross_entropy(x, 7)
    tape.backward(y)
    expected = T.softmax_np(z)
    expected[7] -= 1
    assert np.allclose(x.grad, expected, atol=1e-12)


def test_margin_values_and_grad():
    assert T.margin(T.tensor([5.0, 1.0, 0.0]), 0).item() == 4.0
    assert T.margin(T.tensor([1.0, 5.0, 0.0]), 0).item() == -4.0
    z = np.array([0.3, 2.0, -1.0, 0.9])
    assert grad_check(lambda t: T.margin(t, 0), z) < 1e-4


def test_masked_norm_345():
    assert T.masked_l2_norm(T.tensor([3.0, 4.0]), [True, True], delta=0).item() == 5.0


def test_masked_norm_selection():
    assert math.isclose(T.masked_l2_norm(T.tensor([3.0, 4.0]), [True, False]).item(), 3.0, rel_tol=1e-6)


def test_masked_norm_empty_mask():
    with pytest.raises(ValueError):
        T.masked_l2_norm(T.tensor([3.0, 4.0]), [False, False])


def test_masked_norm_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(10):
        t = rng.normal(size=16)
        mask = rng.random(16) < 0.5
        mask[0] = True
        total = 0.0
        for v, m in zip(t.tolist(), mask.tolist()):
            if m:
                total += v * v
        expected = math.sqrt(total + 1e-12)
        assert abs(T.masked_l2_norm(f64(t), mask).item() - expected) < 1e-6


def test_masked_norm_per_sample():
    t = np.array([[3.0, 4.0, 1.0], [1.0, 1.0, 1.0]])
    mask = np.array([[True, True, False], [False, False, False]])
    out = T.masked_l2_norm(f64(t), mask, delta=0.0, per_sample=True).data
    assert out.tolist() == [5.0, 0.0]


def test_masked_norm_grad():
    rng = np.random.default_rng(7)
    t = rng.normal(size=(2, 3, 4))
    mask = rng.random((2, 3, 4)) < 0.5
    assert grad_check(lambda x: T.masked_l2_norm(x, mask), t) < 1e-4
    w = np.array([0.7, -1.3])
    assert grad_check(lambda x: T.sum(T.mul(T.masked_l2_norm(x, mask, per_sample=True), f64(w))), t) < 1e-4


# ---------------------------------------------------------------- backward


def test_backward_linear():
    x = Tensor(np.array(2.0), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 3.0)
    tape.backward(y)
    assert x.grad == 3.0


def test_backward_dead_relu():
    x = Tensor(np.array(1.0), requires_grad=True)
    with Tape() as tape:
        y = T.relu(T.neg(x))
    tape.backward(y)
    assert x.grad == 0.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(T.ShapeError):
        tape.backward(y)
    with pytest.raises(T.ShapeError):
        T.backward(y)


def test_backward_accumulates_until_reset():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = T.sum(T.mul(x, x))
        tape.backward(y)
    assert x.grad.tolist() == [4.0, 8.0]
    T.reset_grads(x)
    assert x.grad is None


def test_tape_traverses_each_node_once():
    x = Tensor(np.array([1.5]), requires_grad=True)
    with Tape() as tape:
        a = T.mul(x, x)          # reused twice below
        y = T.sum(T.add(a, a))
    assert tape.mode == "frozen"
    tape.backward(y)
    assert np.allclose(x.grad, [4 * 1.5])
    ids = [t.node_id for n in tape.nodes for t in n.inputs if t.node_id is not None]
    assert all(i < len(tape.nodes) for i in ids)


def _composite(params):
    k, w, b = params

    def f(x):
        h = T.relu(T.conv2d(x, k, 1, 1))
        h = T.maxpool2d(h, 2)
        z = T.dense(T.flatten(h), w, b)
        return T.softmax_cross_entropy(z, 2)
    return f


def test_composite_grad_finite_difference():
    rng = np.random.default_rng(8)
    k = f64(rng.normal(size=(3, 3, 1, 3)))
    w = f64(rng.normal(size=(3 * 3 * 3, 4)) * 0.3)
    b = f64(rng.normal(size=4))
    x = rng.random((6, 6, 1))
    assert grad_check(_composite((k, w, b)), x) < 1e-4


def test_grad_check_linear_and_square():
    assert grad_check(T.sum, np.random.default_rng(9).normal(size=5)) < 1e-8
    assert grad_check(lambda x: T.sum(T.mul(x, x)), np.array([1.0]), step=1e-5) < 1e-8


# ---------------------------------------------------------------- properties


_OPS = {
    "mul": lambda x, c: T.sum(T.mul(T.mul(x, x), c)),
    "relu": lambda x, c: T.sum(T.mul(T.relu(x), c)),
    "log": lambda x, c: T.sum(T.mul(T.log(T.mul(x, x)), c)),
    "clamp": lambda x, c: T.sum(T.mul(T.clamp(x, -0.5, 0.5), c)),
    "sub_neg": lambda x, c: T.sum(T.mul(T.sub(T.neg(x), T.mul(x, 2.0)), c)),
    "matmul": lambda x, c: T.sum(T.mul(T.matmul(T.reshape(x, (2, 3)), f64(np.ones((3, 3)))), f64(np.ones((2, 3))))),
    "conv2d": lambda x, c: T.sum(T.conv2d(T.reshape(x, (2, 3, 1)), f64(np.arange(4.0).reshape(2, 2, 1, 1)))),
    "masked_l2_norm": lambda x, c: T.masked_l2_norm(x, np.array([1, 0, 1, 1, 0, 1], bool)),
    "softmax_cross_entropy": lambda x, c: T.softmax_cross_entropy(x, 4),
    "margin": lambda x, c: T.margin(x, 1),
}


@pytest.mark.parametrize("name", sorted(_OPS))
def test_every_op_on_20_random_inputs(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(20):
        x = away_from_zero(rng, (6,))
        # clamp kinks sit at +-0.5
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x * 1.2, x)
        c = f64(rng.normal(size=6))
        worst = max(worst, grad_check(lambda t: _OPS[name](t, c), x))
    assert worst <= 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(10)
    x0 = rng.normal(size=(5, 5, 1))
    k = f64(rng.normal(size=(3, 3, 1, 2)))
    f = lambda x: T.sum(T.relu(T.conv2d(x, k)))
    g = lambda x: T.softmax_cross_entropy(T.flatten(T.conv2d(x, k)), 3)
    a, b = 1.7, -0.4
    gf = T.analytic_grad(f, x0)
    gg = T.analytic_grad(g, x0)
    combo = T.analytic_grad(lambda x: T.add(T.mul(f(x), a), T.mul(g(x), b)), x0)
    assert np.allclose(combo, a * gf + b * gg, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20))
def test_full_mask_equals_euclidean_norm(vals):
    t = np.array(vals)
    got = T.masked_l2_norm(f64(t), np.ones(len(t), bool), delta=0.0).item()
    assert abs(got - np.linalg.norm(t)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), kh=st.integers(1, 4), kw=st.integers(1, 4),
       stride=st.integers(1, 3), padding=st.integers(0, 2))
def test_conv_output_shape_formula(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    x, k = T.tensor(np.ones((h, w, 2))), T.tensor(np.ones((kh, kw, 2, 3)))
    if ho < 1 or wo < 1:
        with pytest.raises(T.ShapeError):
            T.conv2d(x, k, stride, padding)
    else:
        assert T.conv2d(x, k, stride, padding).shape == (ho, wo, 3)


def test_float32_default_float64_selectable():
    assert T.tensor([1, 2]).dtype == np.float32
    assert T.tensor([1, 2], dtype=np.float64).dtype == np.float64
    out = T.conv2d(T.tensor(np.ones((3, 3, 1))), T.tensor(np.ones((1, 1, 1, 1))))
    assert out.dtype == np.float32
