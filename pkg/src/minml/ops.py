"""Derived ops, built purely by composing registry primitives.

Nothing in this module touches a backend directly; everything routes
through the same dispatch as user code, which is what keeps the
primitive registry small and lets op-counting wrappers observe these
compositions too.
"""

import math

from . import _tensor as T
from .errors import ShapeError
from .shape import normalize_axis


def relu(x):
    return x.maximum(0)


def sigmoid(x):
    return 1.0 / ((-x).exp() + 1.0)


def clip(x, lo=None, hi=None):
    out = x
    if lo is not None:
        out = out.maximum(lo)
    if hi is not None:
        out = out.minimum(hi)
    return out


def mean(x, axis=None, keepdims=False):
    total = x.sum(axis, keepdims)
    count = x.shape.size if axis is None else x.shape[normalize_axis(axis, x.shape.rank)]
    return total / count


def var(x, axis=None, keepdims=False):
    centered = x - mean(x, axis, keepdims=True)
    return mean(centered * centered, axis, keepdims)


def softmax(x, axis=-1):
    shifted = x - x.max(axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis, keepdims=True)


def log_softmax(x, axis=-1):
    shifted = x - x.max(axis, keepdims=True)
    return shifted - shifted.exp().sum(axis, keepdims=True).log()


def gelu(x):
    # tanh approximation
    inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)
    return 0.5 * x * (inner.tanh() + 1.0)


def one_hot(indices, classes, dtype="f32"):
    """[..., ] integer tensor to [..., classes] 0/1 tensor."""
    lane = T.arange(classes, backend=indices.backend_id)
    cols = lane.reshape((1,) * indices.shape.rank + (classes,))
    rows = indices.reshape(tuple(indices.shape) + (1,))
    return rows.eq(cols).astype(dtype)


def max_pool2d(x, kernel, stride=None):
    if x.shape.rank != 4:
        raise ShapeError(f"max_pool2d needs an NCHW input, got shape {tuple(x.shape)}")
    kh, kw = T._pair(kernel, "kernel")
    sh, sw = (kh, kw) if stride is None else T._pair(stride, "stride")
    n, c, h, w = x.shape
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError("max_pool2d kernel and stride must be positive")
    if kh > h or kw > w:
        raise ShapeError(f"pool window ({kh}, {kw}) exceeds input ({h}, {w})")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = None
    for i in range(kh):
        for j in range(kw):
            window = x.slice(
                (0, 0, i, j),
                (n, c, i + sh * (ho - 1) + 1, j + sw * (wo - 1) + 1),
                (1, 1, sh, sw),
            )
            out = window if out is None else out.maximum(window)
    return out


def tile(x, reps):
    reps = tuple(int(r) for r in reps)
    if len(reps) != x.shape.rank:
        raise ShapeError(f"tile needs one repeat per axis: shape {tuple(x.shape)}, reps {reps}")
    if any(r < 0 for r in reps):
        raise ShapeError("tile repeats must be non-negative")
    out = x
    for axis, r in enumerate(reps):
        if r == 1:
            continue
        if r == 0:
            starts = [0] * out.shape.rank
            stops = list(out.shape)
            stops[axis] = 0
            out = out.slice(starts, stops)
        else:
            out = T.concat([out] * r, axis)
    return out


def zeros_like(x):
    return T.zeros(tuple(x.shape), dtype=x.dtype.name, backend=x.backend_id)


def ones_like(x):
    return T.ones(tuple(x.shape), dtype=x.dtype.name, backend=x.backend_id)


# shape helper shared by pooling layers
def pool_out_hw(h, w, kernel, stride):
    kh, kw = kernel
    sh, sw = stride
    return (h - kh) // sh + 1, (w - kw) // sw + 1
