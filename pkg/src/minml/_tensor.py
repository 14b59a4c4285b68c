"""Tensor handle and the op dispatch layer.

A Tensor owns an opaque adapter produced by its backend plus the planned
shape and dtype. All computation funnels through apply(): plan the result
with the shared inference rules, build an OpCall, hand it to the backend.
Which backend runs an op is decided by the operands; creation ops go to
the default backend unless one is named.

Python scalars in binary ops stay weakly typed (they ride along in the
op's params instead of materializing), so f32 arithmetic is not silently
widened by a bare float.
"""

import numpy as np

from . import dtypes, infer, registry
from . import rng as _rng
from .errors import BackendMismatch, DTypeError, ShapeError
from .registry import OpCall
from .shape import Shape


def _resolve_backend(backend):
    if backend is None:
        return registry.default()
    if isinstance(backend, registry.Backend):
        return backend
    return registry.get(backend)


def apply(name, params, inputs, backend=None):
    """Plan and execute one primitive op, returning a new Tensor."""
    if backend is None and inputs:
        backend_id = inputs[0].backend_id
        for t in inputs[1:]:
            if t.backend_id != backend_id:
                raise BackendMismatch(
                    f"operands live on different backends: {backend_id!r} and {t.backend_id!r}"
                )
        backend = registry.get(backend_id)
    else:
        backend = _resolve_backend(backend)
    shape, dtype = infer.plan(name, params, [(t.shape, t.dtype) for t in inputs])
    call = OpCall(name, params, shape, dtype)
    adapter = backend.execute(call, [t.adapter for t in inputs])
    return Tensor(adapter, backend.name, shape, dtype)


def _scalarize(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, (bool, int, float)):
        return value
    return None


class Tensor:
    __slots__ = ("adapter", "backend_id", "shape", "dtype", "__weakref__")

    def __init__(self, adapter, backend_id, shape, dtype):
        self.adapter = adapter
        self.backend_id = backend_id
        self.shape = Shape(shape)
        self.dtype = dtype

    # -- extraction

    def to_host_buffer(self):
        """Copy the value out as a fresh host ndarray (forces deferred graphs)."""
        call = OpCall("to_host", {}, self.shape, self.dtype)
        return registry.get(self.backend_id).execute(call, [self.adapter])

    def numpy(self):
        return self.to_host_buffer()

    def scalar(self):
        if self.shape.size != 1:
            raise ShapeError(f"scalar() needs a single-element tensor, got shape {tuple(self.shape)}")
        return self.to_host_buffer().reshape(())[()].item()

    def force(self):
        """Materialize in place on a deferred backend; a no-op on eager ones."""
        materialize = getattr(self.adapter, "materialize", None)
        if materialize is not None:
            materialize()
        return self

    # -- elementwise

    def _binop(self, name, other):
        if isinstance(other, Tensor):
            return apply(name, {}, [self, other])
        scalar = _scalarize(other)
        if scalar is None:
            raise DTypeError(f"{name} needs a tensor or python scalar, got {type(other).__name__}")
        return apply(name, {"scalar": scalar}, [self])

    def _rbinop(self, name, other):
        scalar = _scalarize(other)
        if scalar is None:
            raise DTypeError(f"{name} needs a tensor or python scalar, got {type(other).__name__}")
        return apply(name, {"scalar": scalar, "scalar_side": "left"}, [self])

    def add(self, other):
        return self._binop("add", other)

    def sub(self, other):
        return self._binop("sub", other)

    def mul(self, other):
        return self._binop("mul", other)

    def div(self, other):
        return self._binop("div", other)

    def pow(self, other):
        return self._binop("pow", other)

    def minimum(self, other):
        return self._binop("minimum", other)

    def maximum(self, other):
        return self._binop("maximum", other)

    def eq(self, other):
        return self._binop("eq", other)

    def lt(self, other):
        return self._binop("lt", other)

    def gt(self, other):
        return self._binop("gt", other)

    def logical_and(self, other):
        return self._binop("logical_and", other)

    def logical_or(self, other):
        return self._binop("logical_or", other)

    def neg(self):
        return apply("neg", {}, [self])

    def abs(self):
        return apply("abs", {}, [self])

    def exp(self):
        return apply("exp", {}, [self])

    def log(self):
        return apply("log", {}, [self])

    def sqrt(self):
        return apply("sqrt", {}, [self])

    def sin(self):
        return apply("sin", {}, [self])

    def cos(self):
        return apply("cos", {}, [self])

    def tanh(self):
        return apply("tanh", {}, [self])

    def logical_not(self):
        return apply("logical_not", {}, [self])

    def astype(self, dtype):
        return apply("astype", {"dtype": dtypes.by_name(dtype).name}, [self])

    # -- reductions

    def sum(self, axis=None, keepdims=False):
        return apply("sum", {"axis": axis, "keepdims": keepdims}, [self])

    def max(self, axis=None, keepdims=False):
        return apply("max_reduce", {"axis": axis, "keepdims": keepdims}, [self])

    def min(self, axis=None, keepdims=False):
        return apply("min_reduce", {"axis": axis, "keepdims": keepdims}, [self])

    def argmax(self, axis, keepdims=False):
        return apply("argmax", {"axis": axis, "keepdims": keepdims}, [self])

    def relu(self):
        from . import ops

        return ops.relu(self)

    def sigmoid(self):
        from . import ops

        return ops.sigmoid(self)

    def clip(self, lo=None, hi=None):
        from . import ops

        return ops.clip(self, lo, hi)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        from . import ops

        return ops.var(self, axis, keepdims)

    # -- shape

    def reshape(self, shape):
        return apply("reshape", {"shape": tuple(Shape(shape))}, [self])

    def transpose(self, perm=None):
        params = {} if perm is None else {"perm": tuple(int(p) for p in perm)}
        return apply("transpose", params, [self])

    def slice(self, starts, stops, steps=None):
        starts = tuple(int(s) for s in starts)
        stops = tuple(int(s) for s in stops)
        steps = (1,) * len(starts) if steps is None else tuple(int(s) for s in steps)
        return apply("slice", {"starts": starts, "stops": stops, "steps": steps}, [self])

    def pad(self, pad_width, value=0):
        pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
        return apply("pad", {"pad_width": pad_width, "value": value}, [self])

    def tile(self, reps):
        from . import ops

        return ops.tile(self, reps)

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        if len(index) > self.shape.rank:
            raise ShapeError(f"too many indices for shape {tuple(self.shape)}")
        starts, stops, steps, dropped = [], [], [], []
        for axis, dim in enumerate(self.shape):
            ix = index[axis] if axis < len(index) else slice(None)
            if isinstance(ix, (int, np.integer)):
                i = int(ix)
                if i < 0:
                    i += dim
                if not 0 <= i < dim:
                    raise ShapeError(f"index {ix} out of range for axis {axis} with extent {dim}")
                starts.append(i)
                stops.append(i + 1)
                steps.append(1)
                dropped.append(axis)
            elif isinstance(ix, slice):
                if ix.step is not None and ix.step <= 0:
                    raise ShapeError("slice steps must be positive")
                start, stop, step = ix.indices(dim)
                starts.append(start)
                stops.append(max(stop, start))
                steps.append(step)
            else:
                raise DTypeError(f"unsupported index {ix!r}")
        out = self.slice(starts, stops, steps)
        if dropped:
            kept = tuple(d for a, d in enumerate(out.shape) if a not in dropped)
            out = out.reshape(kept)
        return out

    # -- operators

    def __add__(self, other):
        return self.add(other)

    def __radd__(self, other):
        return self._rbinop("add", other)

    def __sub__(self, other):
        return self.sub(other)

    def __rsub__(self, other):
        return self._rbinop("sub", other)

    def __mul__(self, other):
        return self.mul(other)

    def __rmul__(self, other):
        return self._rbinop("mul", other)

    def __truediv__(self, other):
        return self.div(other)

    def __rtruediv__(self, other):
        return self._rbinop("div", other)

    def __pow__(self, other):
        return self.pow(other)

    def __rpow__(self, other):
        return self._rbinop("pow", other)

    def __matmul__(self, other):
        return apply("matmul", {}, [self, other])

    def __neg__(self):
        return self.neg()

    def __abs__(self):
        return self.abs()

    def __bool__(self):
        raise DTypeError("tensor truth value is ambiguous; use scalar()")

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype.name}, backend={self.backend_id!r})"


# -- creation


def tensor(data, dtype=None, backend=None):
    """Build a tensor from host data, copying it onto the backend."""
    if isinstance(data, Tensor):
        if dtype is not None and dtypes.by_name(dtype) is not data.dtype:
            return data.astype(dtype)
        return data
    arr = np.asarray(data)
    if dtype is not None:
        dt = dtypes.by_name(dtype)
    elif isinstance(data, (np.ndarray, np.generic)):
        dt = dtypes.from_numpy(arr.dtype)
    else:
        dt = {"f": dtypes.f32, "i": dtypes.i64, "u": dtypes.i64, "b": dtypes.bool_}.get(arr.dtype.kind)
        if dt is None:
            raise DTypeError(f"cannot build a tensor from host dtype {arr.dtype}")
    host = np.array(arr, dtype=dt.np, copy=True, order="C")
    return apply("from_host", {"array": host}, [], backend=backend)


def full(shape, value, dtype=None, backend=None):
    if dtype is None:
        dtype = dtypes.scalar_dtype(value)
    dt = dtypes.by_name(dtype)
    params = {"shape": tuple(Shape(shape)), "value": value, "dtype": dt.name}
    return apply("full", params, [], backend=backend)


def zeros(shape, dtype="f32", backend=None):
    return full(shape, 0, dtype, backend)


def ones(shape, dtype="f32", backend=None):
    return full(shape, 1, dtype, backend)


def arange(n, backend=None):
    return apply("arange", {"n": int(n), "dtype": "i64"}, [], backend=backend)


def identity(n, dtype="f32", backend=None):
    # composed: arange broadcast against its own transpose marks the diagonal
    row = arange(n, backend=backend)
    return row.reshape((n, 1)).eq(row.reshape((1, n))).astype(dtype)


def _rand(name, shape, dtype, backend, counters):
    backend = _resolve_backend(backend)
    dt = dtypes.by_name(dtype)
    shape = Shape(shape)
    offset = backend.rng.reserve(counters(shape.size))
    params = {"shape": tuple(shape), "dtype": dt.name, "seed": backend.rng.seed, "offset": offset}
    return apply(name, params, [], backend=backend)


def rand_uniform(shape, dtype="f32", backend=None):
    return _rand("rand_uniform", shape, dtype, backend, lambda n: n)


def rand_normal(shape, dtype="f32", backend=None):
    return _rand("rand_normal", shape, dtype, backend, _rng.normal_counters)


# -- n-ary and convolution entry points


def concat(tensors, axis):
    tensors = list(tensors)
    return apply("concat", {"axis": int(axis)}, tensors)


def matmul(a, b):
    return apply("matmul", {}, [a, b])


def _pair(v, what):
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    pair = tuple(int(x) for x in v)
    if len(pair) != 2:
        raise ShapeError(f"{what} must be an int or a pair, got {v!r}")
    return pair


def conv2d(x, w, bias=None, stride=1, padding=0):
    params = {"stride": _pair(stride, "stride"), "padding": _pair(padding, "padding")}
    inputs = [x, w] if bias is None else [x, w, bias]
    return apply("conv2d", params, inputs)


def conv2d_grad_input(grad, w, x_shape, stride=1, padding=0):
    params = {
        "x_shape": tuple(Shape(x_shape)),
        "stride": _pair(stride, "stride"),
        "padding": _pair(padding, "padding"),
    }
    return apply("conv2d_grad_input", params, [grad, w])


def conv2d_grad_weight(x, grad, w_shape, stride=1, padding=0):
    params = {
        "w_shape": tuple(Shape(w_shape)),
        "stride": _pair(stride, "stride"),
        "padding": _pair(padding, "padding"),
    }
    return apply("conv2d_grad_weight", params, [x, grad])
