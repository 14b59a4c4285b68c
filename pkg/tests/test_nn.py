"""Layers, the module tree, losses, meters, and the checkpoint format."""

import io

import numpy as np
import pytest

import oracles
import minml
from minml import nn, ops
from minml.autograd import Variable


def var(a, dtype="f64"):
    return Variable(minml.tensor(np.asarray(a), dtype=dtype), requires_grad=True)


def test_linear_forward_matches_oracle():
    layer = nn.Linear(4, 3, dtype="f64")
    x = np.random.default_rng(0).normal(size=(5, 4))
    got = layer(Variable(minml.tensor(x, dtype="f64"))).numpy()
    w = layer.weight.numpy()
    b = layer.bias.numpy()
    np.testing.assert_allclose(got, oracles.matmul_loops(x, w.T) + b, rtol=1e-12)


def test_linear_init_bounds_and_zero_bias():
    layer = nn.Linear(100, 50)
    bound = 1.0 / np.sqrt(100)
    w = layer.weight.numpy()
    assert np.all(np.abs(w) <= bound)
    assert w.std() > bound / 4          # actually random, not degenerate
    assert np.all(layer.bias.numpy() == 0.0)
    assert nn.Linear(4, 2, bias=False).bias is None


def test_conv2d_layer_matches_oracle():
    layer = nn.Conv2D(2, 3, kernel=3, stride=2, padding=1, dtype="f64")
    x = np.random.default_rng(1).normal(size=(2, 2, 6, 6))
    got = layer(Variable(minml.tensor(x, dtype="f64"))).numpy()
    want = oracles.conv2d_loops(x, layer.weight.numpy(), layer.bias.numpy(),
                                stride=2, padding=1)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_sequential_and_module_tree():
    model = nn.Sequential(nn.Linear(6, 4), nn.ReLU(), nn.Linear(4, 2))
    names = [n for n, _ in model.named_params()]
    assert names == ["0.weight", "0.bias", "2.weight", "2.bias"]
    assert len(model.params()) == 4
    x = Variable(minml.tensor(np.ones((1, 6), dtype=np.float32)))
    assert model(x).shape == (1, 2)


def test_train_eval_propagates():
    model = nn.Sequential(nn.Linear(3, 3), nn.Dropout(0.5))
    assert model.training
    model.eval()
    assert not model.training and not model[1].training
    model.train()
    assert model[1].training


def test_dropout_semantics():
    d = nn.Dropout(0.5)
    x = Variable(minml.ones((1000,)))
    d.eval()
    assert np.array_equal(d(x).numpy(), np.ones(1000))
    d.train()
    mask = minml.tensor(np.random.default_rng(2).uniform(size=1000).astype(np.float32))
    d.fixed_mask = mask
    out = d(x).numpy()
    kept = mask.numpy() > 0.5
    np.testing.assert_allclose(out[kept], 2.0)
    np.testing.assert_allclose(out[~kept], 0.0)
    with pytest.raises(ValueError):
        nn.Dropout(1.0)


def test_batchnorm_normalizes_and_tracks_running_stats():
    bn = nn.BatchNorm(3, dtype="f64")
    x = np.random.default_rng(3).normal(loc=5.0, scale=2.0, size=(64, 3))
    out = bn(Variable(minml.tensor(x, dtype="f64"))).numpy()
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)  # eps shifts it
    assert "running_mean" in bn.buffer_names()
    bn.eval()
    frozen = bn(Variable(minml.tensor(x, dtype="f64"))).numpy()
    assert not np.allclose(frozen.mean(axis=0), 0.0, atol=1e-3)


def test_view_reshapes_batch():
    v = nn.View((6,))
    x = Variable(minml.ones((2, 2, 3)))
    assert v(x).shape == (2, 6)


def test_cross_entropy_uniform_pinned_value():
    logp = minml.full((2, 4), float(np.log(0.25)), dtype="f64")
    loss = nn.cross_entropy(Variable(logp), minml.tensor([0, 3]))
    assert abs(loss.scalar() - oracles.CROSS_ENTROPY_UNIFORM_4) < 1e-12


def test_cross_entropy_matches_formula_and_reductions():
    rng = np.random.default_rng(4)
    raw = rng.normal(size=(6, 5))
    targets = rng.integers(0, 5, size=6)
    logp_host = raw - np.log(np.exp(raw).sum(axis=1, keepdims=True))
    want = -logp_host[np.arange(6), targets]
    logp = Variable(minml.tensor(logp_host, dtype="f64"))
    t = minml.tensor(targets)
    assert abs(nn.cross_entropy(logp, t).scalar() - want.mean()) < 1e-10
    assert abs(nn.cross_entropy(logp, t, reduction="sum").scalar() - want.sum()) < 1e-9
    with pytest.raises(ValueError):
        nn.cross_entropy(logp, t, reduction="none")


def test_cross_entropy_rejects_bad_targets():
    logp = Variable(minml.zeros((2, 3), dtype="f64"))
    with pytest.raises(IndexError):
        nn.cross_entropy(logp, minml.tensor([0, 3]))
    with pytest.raises(IndexError):
        nn.cross_entropy(logp, minml.tensor([-1, 0]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(4, 3))
    targets = minml.tensor([0, 2, 1, 1])

    def f(arr):
        logp = arr - np.log(np.exp(arr).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(4), [0, 2, 1, 1]].mean())

    x = var(raw)
    nn.cross_entropy(ops.log_softmax(x), targets).backward()
    np.testing.assert_allclose(x.grad.numpy(), oracles.central_diff(f, raw), atol=1e-8)


def test_mse():
    p = Variable(minml.tensor([1.0, 2.0], dtype="f64"))
    t = minml.tensor([0.0, 4.0], dtype="f64")
    assert abs(nn.mse(p, t).scalar() - 2.5) < 1e-12


def test_meters():
    avg = nn.AverageMeter()
    avg.update(1.0)
    avg.update(3.0, n=3)
    assert avg.result() == 2.5
    acc = nn.AccuracyMeter()
    outputs = minml.tensor([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    acc.update(outputs, minml.tensor([0, 1, 1]))
    assert abs(acc.result() - 2.0 / 3.0) < 1e-12
    with pytest.raises(nn.EmptyMeter):
        nn.AverageMeter().result()


def test_serialize_round_trip_bit_exact():
    model = nn.Sequential(nn.Conv2D(1, 2, 3), nn.ReLU(), nn.View((8,)),
                          nn.Linear(8, 4), nn.BatchNorm(4))
    x = Variable(minml.tensor(np.random.default_rng(6).normal(size=(1, 1, 4, 4)),
                              dtype="f32"))
    model(x)                                # move BatchNorm stats off zero
    blob = nn.serialize(model)
    clone = nn.deserialize(blob)
    for (name, p), (cname, c) in zip(model.named_params(), clone.named_params()):
        assert name == cname
        assert np.array_equal(p.numpy(), c.numpy())
    model.eval()
    clone.eval()
    np.testing.assert_array_equal(model(x).numpy(), clone(x).numpy())


def test_save_load_module_file(tmp_path):
    model = nn.Linear(3, 2)
    path = tmp_path / "weights.bin"
    nn.save_module(model, str(path))
    clone = nn.load_module(str(path))
    assert np.array_equal(model.weight.numpy(), clone.weight.numpy())


def test_deserialize_rejects_corrupt_payloads():
    model = nn.Linear(2, 2)
    blob = nn.serialize(model)
    with pytest.raises(nn.FormatError):
        nn.deserialize(b"XXXX" + blob[4:])
    with pytest.raises(nn.FormatError):
        nn.deserialize(blob[:-3])
    with pytest.raises(nn.FormatError):
        nn.deserialize(blob + b"\x00")


def test_custom_module_kind_round_trip():
    class Doubler(nn.Module):
        def forward(self, x):
            return x.mul(2.0)

        def get_config(self):
            return {}

    nn.register_module_kind("doubler_test", Doubler)
    blob = nn.serialize(nn.Sequential(Doubler(), nn.Linear(2, 2)))
    clone = nn.deserialize(blob)
    assert type(clone[0]).__name__ == "Doubler"
