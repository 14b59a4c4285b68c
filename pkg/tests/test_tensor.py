"""Tensor handle semantics and primitive numerics on the default backend."""

import numpy as np
import pytest

import oracles
import minml
from minml._tensor import BackendMismatch, Shape, ShapeError, dtypes


def rnd(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_construction_infers_dtype():
    assert minml.tensor([1.0, 2.0]).dtype.name == "f32"
    assert minml.tensor(np.zeros(3, dtype=np.float64)).dtype.name == "f64"
    assert minml.tensor([1, 2, 3]).dtype.name == "i64"
    assert minml.tensor([True, False]).dtype.name == "bool"
    assert minml.tensor(2.5).shape == ()


def test_shape_properties():
    s = Shape((2, 3, 4))
    assert s.size == 24
    assert s.rank == 3
    assert s == (2, 3, 4)
    t = minml.zeros((2, 3))
    assert t.shape == (2, 3)
    with pytest.raises(ShapeError):
        Shape((2, -1))


@pytest.mark.parametrize("name,f", [
    ("add", lambda x, y: x + y),
    ("sub", lambda x, y: x - y),
    ("mul", lambda x, y: x * y),
    ("maximum", max),
    ("minimum", min),
])
def test_binary_broadcast_against_index_oracle(name, f):
    a = rnd((3, 1, 4), seed=1)
    b = rnd((2, 4), seed=2)
    got = getattr(minml.tensor(a), name)(minml.tensor(b)).numpy()
    want = oracles.elementwise(f, a, b)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_div_and_pow():
    a = rnd((5,), seed=3)
    b = np.abs(rnd((5,), seed=4)) + 0.5
    np.testing.assert_allclose(
        minml.tensor(a).div(minml.tensor(b)).numpy(),
        oracles.elementwise(lambda x, y: x / y, a, b), rtol=1e-6)
    np.testing.assert_allclose(
        minml.tensor(b).pow(2.0).numpy(),
        oracles.elementwise(lambda x, y: x ** y, b, 2.0), rtol=1e-6)


def test_scalar_operands_promote():
    t = minml.tensor([1.0, 2.0, 3.0])
    assert t.add(1).numpy().tolist() == [2.0, 3.0, 4.0]
    assert t.mul(2.0).numpy().tolist() == [2.0, 4.0, 6.0]


def test_unary_ops():
    a = rnd((7,), seed=5)
    t = minml.tensor(a, dtype="f64")
    np.testing.assert_allclose(t.exp().numpy(), [oracles.elementwise(lambda x, _: np.exp(x), a, 0.0)][0])
    np.testing.assert_allclose(t.neg().numpy(), -a)
    np.testing.assert_allclose(t.abs().numpy(), np.abs(a))
    np.testing.assert_allclose(t.relu().numpy(), np.where(a > 0, a, 0.0))
    pos = np.abs(a) + 0.1
    np.testing.assert_allclose(minml.tensor(pos, dtype="f64").log().numpy(), np.log(pos), rtol=1e-12)
    np.testing.assert_allclose(minml.tensor(pos, dtype="f64").sqrt().numpy(), np.sqrt(pos), rtol=1e-12)


def test_matmul_against_loop_oracle():
    a = rnd((4, 6), seed=6)
    b = rnd((6, 5), seed=7)
    got = minml.matmul(minml.tensor(a, dtype="f64"), minml.tensor(b, dtype="f64")).numpy()
    np.testing.assert_allclose(got, oracles.matmul_loops(a, b), rtol=1e-12)


def test_matmul_fixed_values():
    a = minml.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = minml.tensor([[5.0, 6.0], [7.0, 8.0]])
    assert minml.matmul(a, b).numpy().tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_conv2d_against_loop_oracle():
    x = rnd((2, 3, 8, 8), seed=8)
    w = rnd((4, 3, 3, 3), seed=9)
    bias = rnd((4,), seed=10)
    got = minml.conv2d(minml.tensor(x, dtype="f64"), minml.tensor(w, dtype="f64"),
                       minml.tensor(bias, dtype="f64"), stride=2, padding=1).numpy()
    want = oracles.conv2d_loops(x, w, bias, stride=2, padding=1)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_reductions():
    a = rnd((3, 4, 5), seed=11)
    t = minml.tensor(a, dtype="f64")
    np.testing.assert_allclose(t.sum().scalar(), a.sum(), rtol=1e-12)
    np.testing.assert_allclose(t.sum(axis=1).numpy(), a.sum(axis=1), rtol=1e-12)
    np.testing.assert_allclose(t.mean(axis=-1).numpy(), a.mean(axis=-1), rtol=1e-12)
    np.testing.assert_allclose(t.max(axis=2).numpy(), a.max(axis=2))
    np.testing.assert_allclose(t.min().scalar(), a.min())
    np.testing.assert_allclose(t.var(axis=0).numpy(), a.var(axis=0), rtol=1e-10)
    assert t.sum(axis=1, keepdims=True).shape == (3, 1, 5)


def test_mean_pinned_value():
    t = minml.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.mean(axis=0).numpy().tolist() == oracles.MEAN_AXIS0_1234


def test_argmax():
    a = rnd((6, 10), seed=12)
    got = minml.tensor(a).argmax(axis=1).numpy()
    assert got.tolist() == a.astype(np.float32).argmax(axis=1).tolist()
    assert got.dtype == np.int64


def test_movement_ops():
    a = rnd((2, 3, 4), seed=13)
    t = minml.tensor(a, dtype="f64")
    np.testing.assert_array_equal(t.reshape((6, 4)).numpy(), a.reshape(6, 4))
    np.testing.assert_array_equal(t.transpose((2, 0, 1)).numpy(), a.transpose(2, 0, 1))
    np.testing.assert_array_equal(t.transpose().numpy(), a.transpose())
    np.testing.assert_array_equal(t.slice((0, 1, 0), (2, 3, 4), (1, 1, 2)).numpy(),
                                  a[0:2, 1:3, 0:4:2])
    np.testing.assert_array_equal(t.pad(((0, 0), (1, 2), (0, 1))).numpy(),
                                  np.pad(a, ((0, 0), (1, 2), (0, 1))))
    np.testing.assert_array_equal(t.tile((2, 1, 1)).numpy(), np.tile(a, (2, 1, 1)))


def test_concat():
    a, b = rnd((2, 3), seed=14), rnd((4, 3), seed=15)
    got = minml.concat([minml.tensor(a, dtype="f64"), minml.tensor(b, dtype="f64")], axis=0)
    np.testing.assert_array_equal(got.numpy(), np.concatenate([a, b], axis=0))


def test_comparisons_and_logic():
    a = minml.tensor([1.0, 5.0, 3.0])
    b = minml.tensor([2.0, 5.0, 1.0])
    assert a.lt(b).numpy().tolist() == [True, False, False]
    assert a.gt(b).numpy().tolist() == [False, False, True]
    assert a.eq(b).numpy().tolist() == [False, True, False]
    m = a.lt(b).logical_or(a.eq(b))
    assert m.numpy().tolist() == [True, True, False]
    assert m.logical_not().numpy().tolist() == [False, False, True]


def test_astype_round_trip():
    t = minml.tensor([1.9, -2.7])
    i = t.astype("i64")
    assert i.numpy().tolist() == [1, -2]
    assert i.astype("f32").dtype.name == "f32"


def test_factories():
    assert minml.zeros((2, 2)).numpy().tolist() == [[0.0, 0.0], [0.0, 0.0]]
    assert minml.ones((3,), dtype="f64").numpy().tolist() == [1.0, 1.0, 1.0]
    assert minml.full((2,), 7.5).numpy().tolist() == [7.5, 7.5]
    assert minml.arange(5).numpy().tolist() == [0, 1, 2, 3, 4]
    assert minml.identity(3).numpy().tolist() == np.eye(3).tolist()


def test_random_factories_deterministic():
    be = minml.registry.get("eager")
    be.seed(99)
    a = minml.rand_uniform((100,)).numpy()
    be.seed(99)
    b = minml.rand_uniform((100,)).numpy()
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() < 1.0
    be.seed(99)
    z = minml.rand_normal((10_000,)).numpy()
    assert abs(z.mean()) < 0.05


def test_shape_errors():
    with pytest.raises(ShapeError):
        minml.tensor([[1.0, 2.0]]).add(minml.tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        minml.matmul(minml.zeros((2, 3)), minml.zeros((4, 5)))
    with pytest.raises(ShapeError):
        minml.zeros((2, 3)).reshape((7,))
    with pytest.raises(ShapeError):
        minml.concat([minml.zeros((2, 3)), minml.zeros((2, 4))], axis=0)


def test_dtype_errors():
    with pytest.raises(dtypes.DTypeError):
        minml.tensor([1.0], dtype="f16")
    with pytest.raises(dtypes.DTypeError):
        minml.tensor([True]).log()


def test_backend_mismatch_rejected():
    from minml.registry import Backend
    import minml as m
    other = m.EagerBackend(name="tensor-test-alt", seed=0)
    m.registry.register(other)
    try:
        a = minml.tensor([1.0], backend="eager")
        b = minml.tensor([1.0], backend="tensor-test-alt")
        with pytest.raises(BackendMismatch):
            a.add(b)
    finally:
        m.registry.unregister("tensor-test-alt")


def test_scalar_requires_single_element():
    with pytest.raises(ShapeError):
        minml.zeros((2,)).scalar()
    assert minml.tensor(3.5).scalar() == 3.5
