"""Neural-net modules, losses, meters, and module serialization.

Modules register their parameters and children explicitly, so params()
enumerates depth-first in a stable order: a module's own parameters in
registration order, then each child's, recursively. That order is what
optimizers and checkpoints key on.

Serialization is a versioned, length-prefixed binary format: every module
writes its kind tag, a JSON config blob, its children, then its arrays.
Deserializing rebuilds the tree through the kind registry and overwrites
the fresh parameters with the stored bytes, so a round trip is bit-exact.
"""

import json
import math
import struct

import numpy as np

from . import autograd, ops
from . import _tensor as T
from .autograd import Variable
from .errors import DTypeError, EmptyMeter, FormatError, ShapeError

FORMAT_MAGIC = b"MNNB"
FORMAT_VERSION = 1


class Module:
    def __init__(self):
        self.training = True
        self._params = []
        self._children = []

    def register_param(self, name, variable):
        self._params.append((name, variable))
        return variable

    def register_buffer(self, name, tensor):
        # non-learned state (e.g. running stats); saved but never updated by optimizers
        if not hasattr(self, "_buffers"):
            self._buffers = []
        self._buffers.append(name)
        setattr(self, name, tensor)
        return tensor

    def register_child(self, name, module):
        self._children.append((name, module))
        return module

    def params(self):
        found = [v for _, v in self._params]
        for _, child in self._children:
            found.extend(child.params())
        return found

    def named_params(self, prefix=""):
        for name, v in self._params:
            yield prefix + name, v
        for cname, child in self._children:
            yield from child.named_params(f"{prefix}{cname}.")

    def buffer_names(self):
        return list(getattr(self, "_buffers", ()))

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children:
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    # serialization hooks; leaves with constructor arguments override get_config
    def get_config(self):
        return {}

    @classmethod
    def from_config(cls, config, backend=None):
        if "backend" in _init_accepts(cls):
            config = dict(config, backend=backend)
        return cls(**config)


def _init_accepts(cls):
    import inspect

    return inspect.signature(cls.__init__).parameters


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        for i, m in enumerate(modules):
            self.register_child(str(i), m)

    def forward(self, x):
        for _, child in self._children:
            x = child(x)
        return x

    def __getitem__(self, i):
        return self._children[i][1]

    def __len__(self):
        return len(self._children)


def _uniform_init(shape, fan_in, dtype, backend):
    bound = 1.0 / math.sqrt(fan_in)
    u = T.rand_uniform(shape, dtype=dtype, backend=backend)
    return u * (2.0 * bound) - bound


class Linear(Module):
    """y = x W^T + b with W shaped [out_features, in_features]."""

    def __init__(self, in_features, out_features, bias=True, dtype="f32", backend=None):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.dtype = dtype
        self.weight = self.register_param(
            "weight",
            Variable(
                _uniform_init((out_features, in_features), in_features, dtype, backend),
                requires_grad=True,
            ),
        )
        if bias:
            self.bias = self.register_param(
                "bias",
                Variable(T.zeros((out_features,), dtype=dtype, backend=backend), requires_grad=True),
            )
        else:
            self.bias = None

    def forward(self, x):
        if x.shape.rank != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"Linear({self.in_features} -> {self.out_features}) got input shape {tuple(x.shape)}"
            )
        y = autograd.matmul(x, self.weight.transpose())
        if self.bias is not None:
            y = y + self.bias
        return y

    def get_config(self):
        return {
            "in_features": self.in_features,
            "out_features": self.out_features,
            "bias": self.bias is not None,
            "dtype": self.dtype,
        }


class Conv2D(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=True,
                 dtype="f32", backend=None):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = T._pair(kernel, "kernel")
        self.stride = T._pair(stride, "stride")
        self.padding = T._pair(padding, "padding")
        self.dtype = dtype
        kh, kw = self.kernel
        fan_in = in_channels * kh * kw
        self.weight = self.register_param(
            "weight",
            Variable(
                _uniform_init((out_channels, in_channels, kh, kw), fan_in, dtype, backend),
                requires_grad=True,
            ),
        )
        if bias:
            self.bias = self.register_param(
                "bias",
                Variable(T.zeros((out_channels,), dtype=dtype, backend=backend), requires_grad=True),
            )
        else:
            self.bias = None

    def forward(self, x):
        if x.shape.rank != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv2D({self.in_channels} -> {self.out_channels}) got input shape {tuple(x.shape)}"
            )
        return autograd.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def get_config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "bias": self.bias is not None,
            "dtype": self.dtype,
        }


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)


class MaxPool2D(Module):
    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = T._pair(kernel, "kernel")
        self.stride = self.kernel if stride is None else T._pair(stride, "stride")

    def forward(self, x):
        if x.shape.rank != 4:
            raise ShapeError(f"MaxPool2D needs an NCHW input, got shape {tuple(x.shape)}")
        return ops.max_pool2d(x, self.kernel, self.stride)

    def get_config(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}


class Dropout(Module):
    """Zeroes each element with probability p in training, scaling the rest
    by 1/(1-p); identity in eval mode (and everywhere when p == 0).

    fixed_mask, when set to a uniform-[0,1) tensor of the input's shape,
    replaces the RNG draw; it exists so numeric checks can re-run the
    forward deterministically. It is never serialized.
    """

    def __init__(self, p=0.5):
        super().__init__()
        p = float(p)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.fixed_mask = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        if not x.dtype.is_float:
            raise DTypeError(f"Dropout needs a float input, got {x.dtype.name}")
        draw = self.fixed_mask
        if draw is None:
            draw = T.rand_uniform(tuple(x.shape), dtype=x.dtype.name, backend=x.backend_id)
        keep = draw.gt(self.p).astype(x.dtype.name)
        return x * keep * (1.0 / (1.0 - self.p))

    def get_config(self):
        return {"p": self.p}


class BatchNorm(Module):
    """Normalizes over every axis but the channel one ([N,F] or [N,C,H,W]).

    Training uses batch statistics (ddof 0) and folds them into running
    stats with the given momentum; eval uses the running stats and leaves
    them untouched.
    """

    def __init__(self, features, momentum=0.1, eps=1e-5, dtype="f32", backend=None):
        super().__init__()
        self.features = int(features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.dtype = dtype
        self.gamma = self.register_param(
            "gamma", Variable(T.ones((features,), dtype=dtype, backend=backend), requires_grad=True)
        )
        self.beta = self.register_param(
            "beta", Variable(T.zeros((features,), dtype=dtype, backend=backend), requires_grad=True)
        )
        self.register_buffer("running_mean", T.zeros((features,), dtype=dtype, backend=backend))
        self.register_buffer("running_var", T.ones((features,), dtype=dtype, backend=backend))

    def _stat_shape(self, rank):
        return (1, self.features) if rank == 2 else (1, self.features, 1, 1)

    def forward(self, x):
        rank = x.shape.rank
        if rank not in (2, 4) or x.shape[1] != self.features:
            raise ShapeError(f"BatchNorm({self.features}) got input shape {tuple(x.shape)}")
        stat_shape = self._stat_shape(rank)
        if self.training:
            mean = x.mean(axis=0) if rank == 2 else x.mean(axis=3).mean(axis=2).mean(axis=0)
            centered = x - mean.reshape(stat_shape)
            sq = centered * centered
            var = sq.mean(axis=0) if rank == 2 else sq.mean(axis=3).mean(axis=2).mean(axis=0)
            m = self.momentum
            self.running_mean = self.running_mean * (1.0 - m) + _data(mean) * m
            self.running_var = self.running_var * (1.0 - m) + _data(var) * m
            xhat = centered / (var.reshape(stat_shape) + self.eps).sqrt()
        else:
            mean = self.running_mean.reshape(stat_shape)
            var = self.running_var.reshape(stat_shape)
            xhat = (x - mean) / (var + self.eps).sqrt()
        return xhat * self.gamma.reshape(stat_shape) + self.beta.reshape(stat_shape)

    def get_config(self):
        return {
            "features": self.features,
            "momentum": self.momentum,
            "eps": self.eps,
            "dtype": self.dtype,
        }


class LogSoftmax(Module):
    def __init__(self, axis=-1):
        super().__init__()
        self.axis = int(axis)

    def forward(self, x):
        return ops.log_softmax(x, self.axis)

    def get_config(self):
        return {"axis": self.axis}


class View(Module):
    """Reshapes everything after the batch axis to a fixed trailing shape."""

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(d) for d in shape)

    def forward(self, x):
        batch = x.shape[0]
        want = math.prod(self.shape)
        have = x.shape.size // batch if batch else want
        if batch and have != want:
            raise ShapeError(
                f"View{self.shape} cannot reshape per-sample size {have} from {tuple(x.shape)}"
            )
        return x.reshape((batch,) + self.shape)

    def get_config(self):
        return {"shape": list(self.shape)}


def _data(x):
    return x.data if isinstance(x, Variable) else x


# -- losses


def _check_reduction(reduction):
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def cross_entropy(log_probs, targets, reduction="mean"):
    """Negative picked log-probability; log_probs [N, C], integer targets [N]."""
    _check_reduction(reduction)
    if log_probs.shape.rank != 2:
        raise ShapeError(f"cross_entropy needs [N, C] log-probs, got {tuple(log_probs.shape)}")
    t = _data(targets)
    if not t.dtype.is_integer or t.shape.rank != 1:
        raise DTypeError("cross_entropy targets must be a rank-1 integer tensor")
    n, classes = log_probs.shape
    if t.shape[0] != n:
        raise ShapeError(f"{n} rows of log-probs but {t.shape[0]} targets")
    ids = t.to_host_buffer()
    bad = (ids < 0) | (ids >= classes)
    if bad.any():
        raise IndexError(f"target {int(ids[bad][0])} out of range for {classes} classes")
    onehot = ops.one_hot(t, classes, dtype=log_probs.dtype.name)
    picked = (log_probs * onehot).sum(axis=1)
    total = picked.sum().neg()
    return total / n if reduction == "mean" else total


def mse(pred, target, reduction="mean"):
    _check_reduction(reduction)
    if tuple(pred.shape) != tuple(_data(target).shape):
        raise ShapeError(f"mse shapes differ: {tuple(pred.shape)} vs {tuple(_data(target).shape)}")
    d = pred - target
    sq = d * d
    return sq.mean() if reduction == "mean" else sq.sum()


# -- meters


def _host(x):
    if isinstance(x, Variable):
        x = x.data
    if isinstance(x, T.Tensor):
        return x.to_host_buffer()
    return np.asarray(x)


class AverageMeter:
    def __init__(self):
        self.reset()

    def reset(self):
        self.total = 0.0
        self.count = 0

    def update(self, value, n=1):
        self.total += float(value) * n
        self.count += n

    def result(self):
        if self.count == 0:
            raise EmptyMeter("average over zero updates")
        return self.total / self.count


class AccuracyMeter:
    def __init__(self):
        self.reset()

    def reset(self):
        self.correct = 0
        self.count = 0

    def update(self, outputs, targets):
        out = _host(outputs)
        t = _host(targets)
        pred = np.argmax(out, axis=1) if out.ndim == 2 else out
        self.correct += int((pred == t).sum())
        self.count += int(t.shape[0])

    def result(self):
        if self.count == 0:
            raise EmptyMeter("accuracy over zero samples")
        return self.correct / self.count


# -- serialization

_KINDS = {}


def register_module_kind(name, cls):
    _KINDS[name] = cls
    cls.kind = name
    return cls


for _name, _cls in [
    ("sequential", Sequential),
    ("linear", Linear),
    ("conv2d", Conv2D),
    ("relu", ReLU),
    ("max_pool2d", MaxPool2D),
    ("dropout", Dropout),
    ("batch_norm", BatchNorm),
    ("log_softmax", LogSoftmax),
    ("view", View),
]:
    register_module_kind(_name, _cls)


def _w_str(buf, s):
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def _w_array(buf, name, array):
    _w_str(buf, name)
    _w_str(buf, array.dtype.str)
    buf += struct.pack("<B", array.ndim)
    for d in array.shape:
        buf += struct.pack("<Q", d)
    raw = array.tobytes()
    buf += struct.pack("<Q", len(raw))
    buf += raw


def _write_module(buf, module):
    kind = getattr(type(module), "kind", None)
    if kind is None or _KINDS.get(kind) is not type(module):
        raise FormatError(f"module type {type(module).__name__} is not a registered kind")
    _w_str(buf, kind)
    _w_str(buf, json.dumps(module.get_config(), sort_keys=True))
    entries = [(n, v.data) for n, v in module._params]
    entries += [(n, getattr(module, n)) for n in module.buffer_names()]
    buf += struct.pack("<I", len(entries))
    for name, tensor in entries:
        _w_array(buf, name, tensor.to_host_buffer())
    buf += struct.pack("<I", len(module._children))
    for _, child in module._children:
        _write_module(buf, child)


def serialize(module):
    buf = bytearray()
    buf += FORMAT_MAGIC
    buf += struct.pack("<I", FORMAT_VERSION)
    _write_module(buf, module)
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"stream ends {self.pos + n - len(self.data)} bytes early", offset=self.pos
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def _read_module(r, backend):
    kind = r.string()
    cls = _KINDS.get(kind)
    if cls is None:
        raise FormatError(f"unknown module kind {kind!r}", offset=r.pos)
    config = json.loads(r.string())
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        dtype = np.dtype(r.string())
        shape = tuple(r.u64() for _ in range(r.u8()))
        raw = r.take(r.u64())
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    children = None
    n_children = r.u32()
    if cls is Sequential:
        children = [_read_module(r, backend) for _ in range(n_children)]
        module = Sequential(*children)
    else:
        for _ in range(n_children):
            _read_module(r, backend)  # non-container kinds have none; tolerate and drop
        module = cls.from_config(config, backend=backend)
    for name, v in module._params:
        if name in arrays:
            v.data = T.tensor(arrays[name], backend=backend)
    for name in module.buffer_names():
        if name in arrays:
            setattr(module, name, T.tensor(arrays[name], backend=backend))
    return module


def deserialize(data, backend=None):
    r = _Reader(data)
    if r.take(4) != FORMAT_MAGIC:
        raise FormatError("not a module stream (bad magic)", offset=0)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    module = _read_module(r, backend)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", offset=r.pos)
    return module


def save_module(module, path):
    data = serialize(module)
    with open(path, "wb") as f:
        f.write(data)


def load_module(path, backend=None):
    with open(path, "rb") as f:
        return deserialize(f.read(), backend=backend)
