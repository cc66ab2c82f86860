import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cadit import autodiff as ad
from cadit.autodiff import Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- forward

def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w), stride=1).data, x)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_conv_output_sizes():
    x = Tensor(np.zeros((3, 2, 16, 16)))
    assert ad.conv2d(x, Tensor(np.zeros((5, 2, 3, 3))), stride=2).shape == (3, 5, 8, 8)
    assert ad.conv2d(x, Tensor(np.zeros((5, 2, 3, 3))), stride=1).shape == (3, 5, 16, 16)
    y = Tensor(np.zeros((3, 5, 4, 4)))
    assert ad.conv2d_transpose(y, Tensor(np.zeros((5, 2, 3, 3))), stride=2).shape == (3, 2, 8, 8)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_no_broadcasting_except_scalars():
    x = Tensor(np.ones((2, 3)))
    assert (x + 1.0).shape == (2, 3)
    assert ad.mul(x, Tensor(np.array(2.0))).shape == (2, 3)
    with pytest.raises(ad.ShapeError):
        ad.add(x, Tensor(np.ones(3)))


def test_non_finite_output_raises():
    with pytest.raises(ad.NonFiniteError, match="log"):
        ad.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(ad.NonFiniteError, match="exp"):
        ad.exp(Tensor(np.array([1000.0])))


# ---------------------------------------------------------------- backward

def test_square_sum_gradient():
    x = leaf([3.0])
    ad.backward(ad.reduce_sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_l1_mean_subgradient():
    x = leaf([1.0, 2.0, 3.0, 5.0])
    y = Tensor(np.array([0.0, 2.0, 4.0, 1.0]))
    ad.backward(ad.reduce_mean(ad.abs(x - y)))
    np.testing.assert_array_equal(x.grad, [0.25, 0.0, -0.25, 0.25])


def test_composite_conv_leaky_mean_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(2, 2, 6, 6)))
    w = leaf(rng.normal(size=(3, 2, 3, 3)))
    f = lambda p: ad.reduce_mean(ad.leaky_relu(ad.conv2d(x, w, stride=2), 0.2))  # noqa: E731
    assert grad_check(f, x, 1e-5) <= 1e-4
    assert grad_check(f, w, 1e-5) <= 1e-4


def test_gradient_accumulates_over_reuse():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    x = leaf(a)
    loss = ad.reduce_sum(ad.tanh(x)) + ad.reduce_sum(ad.square(x))
    ad.backward(loss)
    path1 = 1 - np.tanh(a) ** 2
    path2 = 2 * a
    np.testing.assert_allclose(x.grad, path1 + path2, rtol=1e-14)


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tanh(x))


def test_backward_twice_without_reset_raises():
    x = leaf(np.ones(3))
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.square(x))
        tape.backward(loss)
        with pytest.raises(ad.TapeError):
            tape.backward(loss)
        tape.reset()
        loss2 = ad.reduce_sum(ad.square(x))
        tape.backward(loss2)
    np.testing.assert_array_equal(x.grad, 4 * np.ones(3))


def test_tape_records_in_topological_order():
    x = leaf(np.ones(2))
    with ad.Tape() as tape:
        a = ad.tanh(x)
        b = ad.square(a)
        c = ad.reduce_sum(b)
        outs = [e[0] for e in tape.entries]
        assert outs == [a, b, c]
        for i, (_, inputs, _) in enumerate(tape.entries):
            for inp in inputs:
                if not inp.is_leaf:
                    assert outs.index(inp) < i


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with ad.Tape() as tape, ad.no_grad():
        ad.reduce_sum(ad.square(x))
    assert len(tape) == 0


# ---------------------------------------------------------------- grad_check

def test_grad_check_linear_function_is_exact():
    x = Tensor(np.random.default_rng(4).normal(size=7))
    assert grad_check(lambda p: ad.reduce_sum(p), x, 1e-5) <= 1e-10


def test_grad_check_excludes_relu_kink():
    x = Tensor(np.array([0.0, 0.7, -0.4]))
    # the zero coordinate's one-sided slopes differ by 1; it must be skipped
    assert grad_check(lambda p: ad.reduce_sum(ad.relu(p)), x, 1e-5) <= 1e-10


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ad.ShapeError):
        grad_check(lambda p: ad.tanh(p), Tensor(np.ones(3)), 1e-5)


def test_grad_check_catches_a_wrong_gradient():
    x = Tensor(np.array([0.5, 1.5]))

    def bad(p):
        out = ad.square(p)
        # corrupt the recorded backward rule
        tape = ad.current_tape()
        o, inputs, _ = tape.entries[-1]
        tape.entries[-1] = (o, inputs, lambda g: (g * 3.0 * p.data,))
        return ad.reduce_sum(out)

    assert grad_check(bad, x, 1e-5) > 0.1


# --------------------------------------------------- per-primitive checks

def _cases():
    positive = lambda r, s: r.uniform(0.2, 2.0, size=s)  # noqa: E731
    normal = lambda r, s: r.normal(size=s)  # noqa: E731
    return [
        ("relu", ad.relu, normal, (3, 4)),
        ("leaky_relu", lambda x: ad.leaky_relu(x, 0.2), normal, (3, 4)),
        ("tanh", ad.tanh, normal, (3, 4)),
        ("sigmoid", ad.sigmoid, normal, (3, 4)),
        ("softmax", ad.softmax, normal, (3, 4)),
        ("log_softmax", ad.log_softmax, normal, (3, 4)),
        ("log", ad.log, positive, (3, 4)),
        ("exp", ad.exp, normal, (3, 4)),
        ("abs", ad.abs, normal, (3, 4)),
        ("square", ad.square, normal, (3, 4)),
        ("sqrt", ad.sqrt, positive, (3, 4)),
        ("scalar_mul", lambda x: ad.scalar_mul(x, -1.7), normal, (3, 4)),
        ("reshape", lambda x: ad.reshape(ad.square(x), (4, 3)), normal, (3, 4)),
        ("pairwise_sq_dist", ad.pairwise_sq_dist, normal, (4, 3)),
        ("clamp_max", lambda x: ad.clamp_max(x, 0.3), normal, (3, 4)),
    ]


UNARY = _cases()


@pytest.mark.parametrize("name,op,sampler,shape", UNARY, ids=[c[0] for c in UNARY])
def test_unary_primitive_gradients(name, op, sampler, shape):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = Tensor(sampler(rng, shape))
        out_shape = op(Tensor(x.data)).shape
        w = Tensor(rng.normal(size=out_shape))
        worst = max(worst, grad_check(lambda p: ad.reduce_sum(ad.mul(op(p), w)), x, 1e-5))
    assert worst <= 1e-4


def _check_binary(op, shape_a, shape_b, seed, trials=100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a = Tensor(rng.normal(size=shape_a))
        b = Tensor(rng.normal(size=shape_b))
        out_shape = op(Tensor(a.data), Tensor(b.data)).shape
        w = Tensor(rng.normal(size=out_shape))
        worst = max(worst, grad_check(lambda p: ad.reduce_sum(ad.mul(op(p, b), w)), a, 1e-5))
        worst = max(worst, grad_check(lambda p: ad.reduce_sum(ad.mul(op(a, p), w)), b, 1e-5))
    return worst


@pytest.mark.parametrize("name,op,sa,sb", [
    ("add", ad.add, (3, 4), (3, 4)),
    ("sub", ad.sub, (3, 4), (3, 4)),
    ("mul", ad.mul, (3, 4), (3, 4)),
    ("mul_scalar_tensor", ad.mul, (3, 4), ()),
    ("matmul", ad.matmul, (3, 4), (4, 2)),
    ("bias_add", ad.bias_add, (3, 4, 2, 2), (4,)),
    ("conv2d_s1", lambda x, w: ad.conv2d(x, w, 1), (2, 2, 5, 5), (3, 2, 3, 3)),
    ("conv2d_s2", lambda x, w: ad.conv2d(x, w, 2), (2, 2, 6, 6), (3, 2, 3, 3)),
    ("conv2d_transpose_s2", lambda y, w: ad.conv2d_transpose(y, w, 2), (2, 3, 3, 3), (3, 2, 3, 3)),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), (3, 2), (3, 4)),
])
def test_binary_primitive_gradients(name, op, sa, sb):
    assert _check_binary(op, sa, sb, seed=len(name)) <= 1e-4


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reductions_gradients(axis):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=np.sum(x.data, axis=axis).shape))
        for red in (ad.reduce_sum, ad.reduce_mean):
            worst = max(worst, grad_check(lambda p: ad.reduce_sum(ad.mul(red(p, axis), w)), x, 1e-5))
    assert worst <= 1e-4


# --------------------------------------------------------------- properties

@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,size", [(1, 5), (2, 8), (2, 4)])
def test_conv_transpose_is_adjoint(stride, size):
    rng = np.random.default_rng(stride * 10 + size)
    for _ in range(20):
        x = rng.normal(size=(3, 2, size, size))
        w = rng.normal(size=(4, 2, 3, 3))
        cx = ad.conv2d(Tensor(x), Tensor(w), stride).data
        y = rng.normal(size=cx.shape)
        ty = ad.conv2d_transpose(Tensor(y), Tensor(w), stride).data
        assert abs(np.vdot(cx, y) - np.vdot(x, ty)) <= 1e-10


def test_leaky_relu_subgradient_at_zero_is_slope():
    x = leaf([0.0, 1.0, -1.0])
    ad.backward(ad.reduce_sum(ad.leaky_relu(x, 0.2)))
    np.testing.assert_array_equal(x.grad, [0.2, 1.0, 0.2])
    y = leaf([0.0, 2.0])
    ad.backward(ad.reduce_sum(ad.relu(y)))
    np.testing.assert_array_equal(y.grad, [0.0, 1.0])
