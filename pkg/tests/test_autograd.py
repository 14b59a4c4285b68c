"""Reverse-mode gradients against central finite differences."""

import numpy as np
import pytest

import oracles
import minml
from minml import autograd
from minml.autograd import Variable, gradcheck, no_grad, register_custom_op


def var(a, dtype="f64"):
    return Variable(minml.tensor(np.asarray(a), dtype=dtype), requires_grad=True)


def test_square_sum_gradient_exact():
    x = var([[1.0, -2.0], [0.5, 3.0]])
    (x.mul(x)).sum().backward()
    np.testing.assert_array_equal(x.grad.numpy(), 2.0 * x.data.numpy())


def test_chain_matches_finite_differences():
    a = np.random.default_rng(0).normal(size=(3, 4))

    def f(arr):
        return float(np.tanh(arr * 0.5 + 1.0).sum())

    x = var(a)
    x.mul(0.5).add(1.0).tanh().sum().backward()
    np.testing.assert_allclose(x.grad.numpy(), oracles.central_diff(f, a), atol=1e-7)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))

    def fa(arr):
        return float((arr @ b).sum())

    def fb(arr):
        return float((a @ arr).sum())

    x, y = var(a), var(b)
    autograd.matmul(x, y).sum().backward()
    np.testing.assert_allclose(x.grad.numpy(), oracles.central_diff(fa, a), atol=1e-6)
    np.testing.assert_allclose(y.grad.numpy(), oracles.central_diff(fb, b), atol=1e-6)


def test_conv2d_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(1, 2, 5, 5))
    ker = rng.normal(size=(3, 2, 3, 3))

    def fi(arr):
        return float(oracles.conv2d_loops(arr, ker, stride=2, padding=1).sum())

    def fk(arr):
        return float(oracles.conv2d_loops(img, arr, stride=2, padding=1).sum())

    x, w = var(img), var(ker)
    autograd.conv2d(x, w, stride=2, padding=1).sum().backward()
    np.testing.assert_allclose(x.grad.numpy(), oracles.central_diff(fi, img), atol=1e-6)
    np.testing.assert_allclose(w.grad.numpy(), oracles.central_diff(fk, ker), atol=1e-6)


def test_broadcast_gradient_reduces_to_input_shape():
    a = np.random.default_rng(3).normal(size=(4, 3))
    bias = np.random.default_rng(4).normal(size=(3,))

    def fb(arr):
        return float(((a + arr) ** 2).sum())

    x, b = var(a), var(bias)
    s = x.add(b)
    s.mul(s).sum().backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad.numpy(), oracles.central_diff(fb, bias), atol=1e-6)


def test_reuse_accumulates():
    x = var([2.0])
    y = x.mul(x).add(x.mul(3.0))   # x^2 + 3x, dy/dx = 2x + 3
    y.sum().backward()
    assert x.grad.numpy().tolist() == [7.0]


def test_movement_op_gradients():
    a = np.random.default_rng(5).normal(size=(2, 6))
    x = var(a)
    x.reshape((3, 4)).transpose().slice((0, 1), (4, 3)).sum().backward()

    def f(arr):
        return float(arr.reshape(3, 4).T[0:4, 1:3].sum())

    np.testing.assert_allclose(x.grad.numpy(), oracles.central_diff(f, a), atol=1e-8)


def test_non_scalar_backward_needs_seed():
    x = var([1.0, 2.0])
    y = x.mul(2.0)
    with pytest.raises(autograd.SeedRequired):
        y.backward()
    y = x.mul(2.0)
    y.backward(seed_grad=minml.ones((2,), dtype="f64"))
    assert x.grad.numpy().tolist() == [2.0, 2.0]


def test_tape_is_single_use_unless_retained():
    x = var([3.0])
    y = x.mul(x).sum()
    y.backward(retain_graph=True)
    y.backward(retain_graph=True)
    assert x.grad.numpy().tolist() == [12.0]   # two passes accumulate
    z = x.mul(2.0).sum()
    z.backward()
    with pytest.raises(autograd.TapeConsumed):
        z.backward()


def test_no_grad_and_detach_stop_recording():
    x = var([1.0, 2.0])
    with no_grad():
        y = x.mul(5.0)
    assert y.tape_node is None
    d = x.mul(2.0).detach()
    assert d.requires_grad is False
    out = d.mul(3.0)
    assert out.tape_node is None


def test_gradcheck_passes_builtin_ops():
    rng = np.random.default_rng(6)
    x = minml.tensor(rng.normal(size=(3, 3)), dtype="f64")
    ok, err = gradcheck(lambda v: v.sigmoid().sum(), [x])
    assert ok, err
    ok, err = gradcheck(lambda v: v.exp().mean(), [x])
    assert ok, err


def test_gradcheck_catches_wrong_backward():
    def forward(ctx, a):
        ctx.save(a)
        return a.mul(a)

    def bad_backward(ctx, g):
        (a,) = ctx.saved
        return (g.mul(a),)       # missing the factor of 2

    bad = register_custom_op("bad_square_test", forward, bad_backward)
    x = minml.tensor(np.random.default_rng(7).normal(size=(4,)) + 3.0, dtype="f64")
    ok, err = gradcheck(lambda v: bad(v).sum(), [x])
    assert not ok
    assert err > 0.1


def test_custom_op_with_correct_backward():
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a.mul(b)

    def backward_fn(ctx, g):
        a, b = ctx.saved
        return g.mul(b), g.mul(a)

    prod = register_custom_op("pairwise_prod_test", forward, backward_fn)
    rng = np.random.default_rng(8)
    x = minml.tensor(rng.normal(size=(5,)), dtype="f64")
    y = minml.tensor(rng.normal(size=(5,)), dtype="f64")
    ok, err = gradcheck(lambda u, v: prod(u, v).sum(), [x, y])
    assert ok, err


def test_custom_op_shape_checked():
    def forward(ctx, a):
        return a.mul(2.0)

    def backward_fn(ctx, g):
        return (g.sum(),)        # wrong shape on purpose

    halved = register_custom_op("bad_shape_test", forward, backward_fn)
    x = var([1.0, 2.0, 3.0])
    out = halved(x).sum()
    with pytest.raises(autograd.GradShapeError):
        out.backward()


def test_integer_inputs_do_not_join_the_tape():
    idx = Variable(minml.tensor([1, 0]), requires_grad=False)
    x = var([[1.0, 2.0], [3.0, 4.0]])
    y = x.sum()
    assert idx.tape_node is None
    y.backward()
    assert x.grad is not None
