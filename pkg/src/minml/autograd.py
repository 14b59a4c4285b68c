"""Reverse-mode autograd on a dynamic tape.

Variables wrap tensors; every differentiable op records a tape node when
(and only when) some input requires grad and grad mode is on, so programs
that never ask for gradients pay nothing. backward() walks the recorded
nodes in reverse execution order, accumulates into leaf .grad fields with
+=, and then frees the tape unless retain_graph is passed.

All gradient rules are themselves compositions of registry primitives, so
an op-counting backend sees the backward pass with the same fidelity as
the forward one. Broadcasting in a forward op is undone by summing the
corresponding grad axes.
"""

import contextlib
import itertools
import threading

import numpy as np

from . import _tensor as T
from .errors import DTypeError, GradShapeError, SeedRequired, TapeConsumed
from .shape import normalize_axis
from ._tensor import Tensor

_SEQ = itertools.count()
_STATE = threading.local()


def _enabled():
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording for the enclosed block (per thread)."""
    prev = _enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class TapeNode:
    __slots__ = ("seq", "op", "inputs", "grad_fn", "released")

    def __init__(self, op, inputs, grad_fn):
        self.seq = next(_SEQ)
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.released = False


class Variable:
    """A tensor plus its place on the tape.

    grad, once populated, has the same shape and dtype as data. Only
    float tensors may require grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, Tensor):
            data = T.tensor(data)
        if requires_grad and not data.dtype.is_float:
            raise DTypeError(f"only float tensors can require grad, got {data.dtype.name}")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def backend_id(self):
        return self.data.backend_id

    def numpy(self):
        return self.data.to_host_buffer()

    def to_host_buffer(self):
        return self.data.to_host_buffer()

    def scalar(self):
        return self.data.scalar()

    def force(self):
        self.data.force()
        return self

    def detach(self):
        return Variable(self.data)

    def backward(self, seed_grad=None, retain_graph=False):
        backward(self, seed_grad, retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Variable(shape={tuple(self.shape)}, dtype={self.dtype.name}{flag})"

    # -- elementwise, defined below as module functions

    def add(self, other):
        return _add(self, other)

    def sub(self, other):
        return _sub(self, other)

    def mul(self, other):
        return _mul(self, other)

    def div(self, other):
        return _div(self, other)

    def pow(self, other):
        return _pow(self, other)

    def maximum(self, other):
        return _extremum(self, other, largest=True)

    def minimum(self, other):
        return _extremum(self, other, largest=False)

    def eq(self, other):
        return _nondiff_binary("eq", self, other)

    def lt(self, other):
        return _nondiff_binary("lt", self, other)

    def gt(self, other):
        return _nondiff_binary("gt", self, other)

    def neg(self):
        return _make(self.data.neg(), "neg", (self,), lambda g: (g.neg(),))

    def abs(self):
        return _abs(self)

    def exp(self):
        return _exp(self)

    def log(self):
        return _log(self)

    def sqrt(self):
        return _sqrt(self)

    def sin(self):
        return _sin(self)

    def cos(self):
        return cos(self)

    def tanh(self):
        return _tanh(self)

    def astype(self, dtype):
        return _astype(self, dtype)

    def relu(self):
        from . import ops

        return ops.relu(self)

    def sigmoid(self):
        from . import ops

        return ops.sigmoid(self)

    def clip(self, lo=None, hi=None):
        from . import ops

        return ops.clip(self, lo, hi)

    # -- reductions

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        from . import ops

        return ops.var(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return _reduce_extremum(self, axis, keepdims, largest=True)

    def min(self, axis=None, keepdims=False):
        return _reduce_extremum(self, axis, keepdims, largest=False)

    def argmax(self, axis, keepdims=False):
        return Variable(self.data.argmax(axis, keepdims))

    # -- shape

    def reshape(self, shape):
        return _reshape(self, shape)

    def transpose(self, perm=None):
        return _transpose(self, perm)

    def slice(self, starts, stops, steps=None):
        return _slice(self, starts, stops, steps)

    def pad(self, pad_width, value=0):
        return _pad(self, pad_width, value)

    # -- operators

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _rsub(self, other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _rdiv(self, other)

    def __pow__(self, other):
        return _pow(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return self.neg()

    def __abs__(self):
        return self.abs()

    def __bool__(self):
        raise DTypeError("variable truth value is ambiguous; use scalar()")


# -- tape plumbing


def _lift(value):
    if isinstance(value, Variable):
        return value
    if isinstance(value, Tensor):
        return Variable(value)
    return None  # python scalar: stays in the op's params


def _wants_grad(*variables):
    if not _enabled():
        return False
    return any(v is not None and v.requires_grad for v in variables)


def _make(out_data, op, inputs, grad_fn):
    """Wrap an op result; record a tape node if gradients can flow."""
    out = Variable(out_data)
    if _wants_grad(*inputs) and out_data.dtype.is_float:
        out.requires_grad = True
        out.tape_node = TapeNode(op, tuple(inputs), grad_fn)
    return out


def _unbroadcast(g, shape):
    """Sum a grad back down to the shape its operand had before broadcasting."""
    while g.shape.rank > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root, seed_grad=None, retain_graph=False):
    """Accumulate d(root)/d(leaf) into every reachable leaf's .grad."""
    data = root.data
    if seed_grad is None:
        if data.shape.size != 1:
            raise SeedRequired(
                f"root has shape {tuple(data.shape)}; pass seed_grad for non-scalar roots"
            )
        seed = T.ones(tuple(data.shape), dtype=data.dtype.name, backend=data.backend_id)
    else:
        seed = seed_grad.data if isinstance(seed_grad, Variable) else seed_grad
        if tuple(seed.shape) != tuple(data.shape):
            raise GradShapeError(
                f"seed grad shape {tuple(seed.shape)} does not match root shape {tuple(data.shape)}"
            )
    node = root.tape_node
    if node is None:
        if root.requires_grad:
            _deposit(root, seed)
        return

    nodes, visited, stack = [], set(), [node]
    while stack:
        n = stack.pop()
        if id(n) in visited:
            continue
        if n.released:
            raise TapeConsumed(
                "this graph was already freed by a backward pass; "
                "pass retain_graph=True to keep it"
            )
        visited.add(id(n))
        nodes.append(n)
        for v in n.inputs:
            p = v.tape_node
            if p is not None and id(p) not in visited:
                stack.append(p)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    flows = {id(node): seed}
    for n in nodes:
        g = flows.pop(id(n), None)
        if g is None:
            continue
        for v, gi in zip(n.inputs, n.grad_fn(g)):
            if gi is None:
                continue
            p = v.tape_node
            if p is not None:
                held = flows.get(id(p))
                flows[id(p)] = gi if held is None else held + gi
            elif v.requires_grad:
                _deposit(v, gi)

    if not retain_graph:
        for n in nodes:
            n.released = True
            n.inputs = ()
            n.grad_fn = None


def _deposit(v, g):
    if g.dtype is not v.data.dtype:
        g = g.astype(v.data.dtype.name)
    v.grad = g if v.grad is None else v.grad + g


# -- custom ops (the extension point; built-in cos goes through it too)


class OpContext:
    """Scratch space a custom forward can stash tensors on for its backward."""

    __slots__ = ("saved",)

    def __init__(self):
        self.saved = ()

    def save(self, *tensors):
        self.saved = tensors


def register_custom_op(name, forward, backward_fn):
    """Build a differentiable op from tensor-level forward/backward callables.

    forward(ctx, *tensors) returns the output tensor; backward_fn(ctx, g)
    returns one grad per input (None for non-differentiable slots). Grad
    shapes are checked against the inputs when the backward pass runs.
    """

    def op(*args):
        variables = []
        for a in args:
            v = _lift(a)
            if v is None:
                raise DTypeError(f"{name} takes tensors or variables, got {type(a).__name__}")
            variables.append(v)
        ctx = OpContext()
        out_data = forward(ctx, *[v.data for v in variables])
        if not (_wants_grad(*variables) and out_data.dtype.is_float):
            return Variable(out_data)

        def grad_fn(g):
            grads = backward_fn(ctx, g)
            if not isinstance(grads, (tuple, list)):
                grads = (grads,)
            if len(grads) != len(variables):
                raise GradShapeError(
                    f"{name} backward returned {len(grads)} grads for {len(variables)} inputs"
                )
            for i, (v, gi) in enumerate(zip(variables, grads)):
                if gi is None:
                    continue
                if tuple(gi.shape) != tuple(v.data.shape):
                    raise GradShapeError(
                        f"{name} grad {i} has shape {tuple(gi.shape)}, "
                        f"input has {tuple(v.data.shape)}"
                    )
            return tuple(grads)

        return _make(out_data, name, tuple(variables), grad_fn)

    op.__name__ = name
    return op


def _cos_forward(ctx, x):
    ctx.save(x)
    return x.cos()


def _cos_backward(ctx, g):
    (x,) = ctx.saved
    return ((g * x.sin()).neg(),)


cos = register_custom_op("cos", _cos_forward, _cos_backward)


# -- elementwise rules


def _add(a, b):
    bv = _lift(b)
    if bv is None:
        return _make(a.data + b, "add", (a,), lambda g: (g,))
    xs, ys = a.data.shape, bv.data.shape
    return _make(
        a.data + bv.data,
        "add",
        (a, bv),
        lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)),
    )


def _sub(a, b):
    bv = _lift(b)
    if bv is None:
        return _make(a.data - b, "sub", (a,), lambda g: (g,))
    xs, ys = a.data.shape, bv.data.shape
    return _make(
        a.data - bv.data,
        "sub",
        (a, bv),
        lambda g: (_unbroadcast(g, xs), _unbroadcast(g.neg(), ys)),
    )


def _rsub(a, s):
    return _make(s - a.data, "sub", (a,), lambda g: (g.neg(),))


def _mul(a, b):
    bv = _lift(b)
    if bv is None:
        return _make(a.data * b, "mul", (a,), lambda g: (g * b,))
    x, y = a.data, bv.data
    return _make(
        x * y,
        "mul",
        (a, bv),
        lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def _div(a, b):
    bv = _lift(b)
    if bv is None:
        return _make(a.data / b, "div", (a,), lambda g: (g / b,))
    x, y = a.data, bv.data
    out = x / y
    return _make(
        out,
        "div",
        (a, bv),
        lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast((g * out / y).neg(), y.shape)),
    )


def _rdiv(a, s):
    x = a.data
    out = s / x
    return _make(out, "div", (a,), lambda g: ((g * out / x).neg(),))


def _pow(a, b):
    bv = _lift(b)
    x = a.data
    if bv is None:
        out = x.pow(b)
        return _make(out, "pow", (a,), lambda g: (g * (x.pow(b - 1) * b),))
    y = bv.data
    out = x.pow(y)
    return _make(
        out,
        "pow",
        (a, bv),
        lambda g: (
            _unbroadcast(g * y * x.pow(y - 1), x.shape),
            _unbroadcast(g * out * x.log(), y.shape),
        ),
    )


def _extremum(a, b, largest):
    op = "maximum" if largest else "minimum"
    bv = _lift(b)
    x = a.data
    if bv is None:
        out = x.maximum(b) if largest else x.minimum(b)
        # ties keep the tensor side
        keep = x.lt(b) if largest else x.gt(b)
        mask = keep.logical_not().astype(out.dtype.name)
        return _make(out, op, (a,), lambda g: (g * mask,))
    y = bv.data
    out = x.maximum(y) if largest else x.minimum(y)
    keep = x.lt(y) if largest else x.gt(y)
    mask = keep.logical_not().astype(out.dtype.name)
    return _make(
        out,
        op,
        (a, bv),
        lambda g: (
            _unbroadcast(g * mask, x.shape),
            _unbroadcast(g * (1 - mask), y.shape),
        ),
    )


def _nondiff_binary(op, a, b):
    bv = _lift(b)
    other = b if bv is None else bv.data
    return Variable(getattr(a.data, op)(other))


def _abs(a):
    x = a.data
    out = x.abs()
    if _wants_grad(a) and out.dtype.is_float:
        sign = x.gt(0).astype(x.dtype.name) - x.lt(0).astype(x.dtype.name)
        return _make(out, "abs", (a,), lambda g: (g * sign,))
    return Variable(out)


def _exp(a):
    out = a.data.exp()
    return _make(out, "exp", (a,), lambda g: (g * out,))


def _log(a):
    x = a.data
    return _make(x.log(), "log", (a,), lambda g: (g / x,))


def _sqrt(a):
    out = a.data.sqrt()
    return _make(out, "sqrt", (a,), lambda g: (g / (out * 2),))


def _sin(a):
    x = a.data
    return _make(x.sin(), "sin", (a,), lambda g: (g * x.cos(),))


def _tanh(a):
    out = a.data.tanh()
    return _make(out, "tanh", (a,), lambda g: (g * (1 - out * out),))


def _astype(a, dtype):
    x = a.data
    out = x.astype(dtype)
    if out.dtype.is_float and x.dtype.is_float:
        return _make(out, "astype", (a,), lambda g: (g.astype(x.dtype.name),))
    return Variable(out)  # casts out of float do not carry gradient


# -- reduction rules


def _keepdims_grad(g, in_shape, axis):
    if axis is None:
        return g.reshape((1,) * len(in_shape))
    ax = normalize_axis(axis, len(in_shape))
    if g.shape.rank == len(in_shape):
        return g  # forward used keepdims
    dims = list(g.shape)
    dims.insert(ax, 1)
    return g.reshape(dims)


def _sum(a, axis=None, keepdims=False):
    x = a.data
    out = x.sum(axis, keepdims)

    def grad_fn(g):
        spread = T.ones(tuple(x.shape), dtype=x.dtype.name, backend=x.backend_id)
        return (spread * _keepdims_grad(g, tuple(x.shape), axis),)

    return _make(out, "sum", (a,), grad_fn)


def _extremum_mask(x, axis, largest):
    """One-hot tensor marking each reduced slice's extreme element (ties: lowest index)."""
    if axis is None:
        flat = x.reshape((x.shape.size,))
        src = flat if largest else flat.neg()
        winner = src.argmax(0, keepdims=True)
        lane = T.arange(flat.shape[0], backend=x.backend_id)
        return lane.eq(winner).astype(x.dtype.name).reshape(tuple(x.shape))
    ax = normalize_axis(axis, x.shape.rank)
    src = x if largest else x.neg()
    winner = src.argmax(ax, keepdims=True)
    extent = x.shape[ax]
    lane_shape = tuple(extent if i == ax else 1 for i in range(x.shape.rank))
    lane = T.arange(extent, backend=x.backend_id).reshape(lane_shape)
    return lane.eq(winner).astype(x.dtype.name)


def _reduce_extremum(a, axis, keepdims, largest):
    x = a.data
    out = x.max(axis, keepdims) if largest else x.min(axis, keepdims)
    if not (_wants_grad(a) and out.dtype.is_float):
        return Variable(out)
    mask = _extremum_mask(x, axis, largest)
    op = "max" if largest else "min"
    return _make(out, op, (a,), lambda g: (mask * _keepdims_grad(g, tuple(x.shape), axis),))


# -- shape rules


def _reshape(a, shape):
    x_shape = tuple(a.data.shape)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(x_shape),))


def _transpose(a, perm=None):
    rank = a.data.shape.rank
    p = tuple(reversed(range(rank))) if perm is None else tuple(int(i) for i in perm)
    inverse = [0] * rank
    for i, axis in enumerate(p):
        inverse[axis] = i
    inverse = tuple(inverse)
    return _make(a.data.transpose(p), "transpose", (a,), lambda g: (g.transpose(inverse),))


def _slice_grad(g, in_shape, starts, stops, steps):
    t = g
    for axis, (start, step, dim) in enumerate(zip(starts, steps, in_shape)):
        m = t.shape[axis]
        if m == dim and start == 0 and step == 1:
            continue
        if step == 1:
            pads = [(0, 0)] * t.shape.rank
            pads[axis] = (start, dim - start - m)
            t = t.pad(pads)
            continue
        # strided: widen each kept element into a stride-sized group of zeros
        covered = 0 if m == 0 else (m - 1) * step + 1
        s = tuple(t.shape)
        t = t.reshape(s[:axis] + (m, 1) + s[axis + 1 :])
        pads = [(0, 0)] * t.shape.rank
        pads[axis + 1] = (0, step - 1)
        t = t.pad(pads)
        t = t.reshape(s[:axis] + (m * step,) + s[axis + 1 :])
        if covered < m * step:
            stops2 = list(t.shape)
            stops2[axis] = covered
            t = t.slice([0] * t.shape.rank, stops2)
        pads = [(0, 0)] * t.shape.rank
        pads[axis] = (start, dim - start - covered)
        t = t.pad(pads)
    return t


def _slice(a, starts, stops, steps=None):
    x_shape = tuple(a.data.shape)
    starts = tuple(int(s) for s in starts)
    stops = tuple(int(s) for s in stops)
    steps = (1,) * len(starts) if steps is None else tuple(int(s) for s in steps)
    out = a.data.slice(starts, stops, steps)
    return _make(
        out, "slice", (a,), lambda g: (_slice_grad(g, x_shape, starts, stops, steps),)
    )


def _pad(a, pad_width, value=0):
    x_shape = tuple(a.data.shape)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    out = a.data.pad(pad_width, value)

    def grad_fn(g):
        starts = [lo for lo, _ in pad_width]
        stops = [lo + d for (lo, _), d in zip(pad_width, x_shape)]
        return (g.slice(starts, stops),)

    return _make(out, "pad", (a,), grad_fn)


def concat(values, axis):
    variables = [_lift(v) for v in values]
    if any(v is None for v in variables):
        raise DTypeError("concat takes tensors or variables")
    datas = [v.data for v in variables]
    out = T.concat(datas, axis)
    ax = normalize_axis(axis, out.shape.rank)
    extents = [d.shape[ax] for d in datas]

    def grad_fn(g):
        grads, offset = [], 0
        for extent in extents:
            starts = [0] * g.shape.rank
            stops = list(g.shape)
            starts[ax], stops[ax] = offset, offset + extent
            grads.append(g.slice(starts, stops))
            offset += extent
        return tuple(grads)

    return _make(out, "concat", tuple(variables), grad_fn)


# -- contractions


def matmul(a, b):
    av, bv = _lift(a), _lift(b)
    if av is None or bv is None:
        raise DTypeError("matmul takes tensors or variables")
    x, y = av.data, bv.data
    out = x @ y
    perm = None if x.shape.rank == 2 else (0, 2, 1)

    def grad_fn(g):
        return (g @ y.transpose(perm), x.transpose(perm) @ g)

    return _make(out, "matmul", (av, bv), grad_fn)


def conv2d(x, w, bias=None, stride=1, padding=0):
    xv, wv = _lift(x), _lift(w)
    if xv is None or wv is None:
        raise DTypeError("conv2d takes tensors or variables")
    bv = _lift(bias) if bias is not None else None
    xd, wd = xv.data, wv.data
    out = T.conv2d(xd, wd, None if bv is None else bv.data, stride, padding)
    x_shape, w_shape = tuple(xd.shape), tuple(wd.shape)

    if bv is None:

        def grad_fn(g):
            return (
                T.conv2d_grad_input(g, wd, x_shape, stride, padding),
                T.conv2d_grad_weight(xd, g, w_shape, stride, padding),
            )

        return _make(out, "conv2d", (xv, wv), grad_fn)

    def grad_fn(g):
        return (
            T.conv2d_grad_input(g, wd, x_shape, stride, padding),
            T.conv2d_grad_weight(xd, g, w_shape, stride, padding),
            g.sum(axis=3).sum(axis=2).sum(axis=0),
        )

    return _make(out, "conv2d", (xv, wv, bv), grad_fn)


# -- numeric verification


def gradcheck(f, inputs, tolerance=1e-4, backend=None):
    """Compare backward() against central differences in f64.

    f maps Variables to one Variable; non-scalar outputs are summed.
    Returns (passed, max_rel_err) with rel err |a - n| / max(|a|, |n|, 1).
    """
    hosts = []
    for x in inputs:
        if isinstance(x, (Tensor, Variable)):
            x = x.numpy()
        hosts.append(np.asarray(x, dtype=np.float64))
    variables = [
        Variable(T.tensor(h, dtype="f64", backend=backend), requires_grad=True) for h in hosts
    ]
    out = f(*variables)
    y = out if out.data.shape.size == 1 else out.sum()
    backward(y)
    analytic = [
        np.zeros(h.shape) if v.grad is None else v.grad.numpy() for v, h in zip(variables, hosts)
    ]

    def evaluate(arrays):
        with no_grad():
            vs = [Variable(T.tensor(a, dtype="f64", backend=backend)) for a in arrays]
            o = f(*vs)
            o = o if o.data.shape.size == 1 else o.sum()
            return float(o.scalar())

    eps = 1e-6
    worst = 0.0
    for k, host in enumerate(hosts):
        for j in range(host.size):
            plus = [h.copy() for h in hosts]
            minus = [h.copy() for h in hosts]
            plus[k].reshape(-1)[j] += eps
            minus[k].reshape(-1)[j] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            a = analytic[k].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst <= tolerance, worst
