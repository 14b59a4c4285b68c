"""numpy kernels for every primitive, shared by both reference backends.

Each kernel has the signature fn(call, args, out=None): args is a tuple of
input ndarrays, and out, when given, is a preallocated ndarray of the
planned shape/dtype the result is written into (the eager backend passes
its managed buffer). With out=None a fresh unmanaged array of the planned
dtype is returned, which is what the deferred backend's fused chains use
for intermediates.

Value-domain policy: float ops follow IEEE-754 (NaN/Inf, never errors),
integer arithmetic wraps, and the two integer cases with no representable
result (division by zero, negative powers) raise DomainError.
"""

import numpy as np

from . import rng
from .errors import DomainError


def _quiet():
    return np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore")


def _finish(call, value, out):
    if out is not None:
        np.copyto(out, value, casting="unsafe")
        return out
    value = np.asarray(value)
    if value.dtype != call.dtype.np:
        value = value.astype(call.dtype.np)
    return value


def _sides(call, args):
    params = call.params
    if "scalar" in params:
        (a,) = args
        if params.get("scalar_side") == "left":
            return params["scalar"], a
        return a, params["scalar"]
    return args


def _int_like(v):
    if isinstance(v, np.ndarray):
        return v.dtype.kind in "iu"
    return isinstance(v, int) and not isinstance(v, bool)


# ------------------------------------------------------------- creation


def k_full(call, args, out=None):
    if out is not None:
        np.copyto(out, call.params["value"], casting="unsafe")
        return out
    return np.full(tuple(call.shape), call.params["value"], dtype=call.dtype.np)


def k_arange(call, args, out=None):
    return _finish(call, np.arange(call.params["n"], dtype=np.int64), out)


def k_rand_uniform(call, args, out=None):
    p = call.params
    values = rng.uniform(p["seed"], p["offset"], call.shape.size)
    return _finish(call, values.reshape(tuple(call.shape)), out)


def k_rand_normal(call, args, out=None):
    p = call.params
    values = rng.normal(p["seed"], p["offset"], call.shape.size)
    return _finish(call, values.reshape(tuple(call.shape)), out)


def k_from_host(call, args, out=None):
    return _finish(call, call.params["array"], out)


def k_to_host(call, args, out=None):
    return np.array(args[0], copy=True)


# ---------------------------------------------------- binary elementwise


def _binary(ufunc):
    def kernel(call, args, out=None):
        a, b = _sides(call, args)
        with _quiet():
            return _finish(call, ufunc(a, b), out)

    return kernel


def k_div(call, args, out=None):
    a, b = _sides(call, args)
    if _int_like(a) and _int_like(b):
        zero = np.any(np.asarray(b) == 0)
        if zero:
            raise DomainError("integer division by zero")
    with _quiet():
        return _finish(call, np.true_divide(a, b), out)


def k_pow(call, args, out=None):
    a, b = _sides(call, args)
    try:
        with _quiet():
            return _finish(call, np.power(a, b), out)
    except ValueError as exc:  # numpy rejects integers to negative powers
        raise DomainError(str(exc)) from None


# ----------------------------------------------------- unary elementwise


def _unary(ufunc):
    def kernel(call, args, out=None):
        with _quiet():
            return _finish(call, ufunc(args[0]), out)

    return kernel


def k_astype(call, args, out=None):
    with _quiet():
        return _finish(call, args[0], out) if out is not None else args[0].astype(call.dtype.np)


# ------------------------------------------------------------ reductions


def _axis_args(call):
    return call.params.get("axis"), bool(call.params.get("keepdims", False))


def k_sum(call, args, out=None):
    a = args[0]
    axis, keepdims = _axis_args(call)
    # f32 accumulates in f64; integer sums accumulate (and wrap) in their own width
    acc = np.float64 if a.dtype == np.float32 else a.dtype
    with _quiet():
        return _finish(call, np.sum(a, axis=axis, keepdims=keepdims, dtype=acc), out)


def k_max_reduce(call, args, out=None):
    axis, keepdims = _axis_args(call)
    return _finish(call, np.max(args[0], axis=axis, keepdims=keepdims), out)


def k_min_reduce(call, args, out=None):
    axis, keepdims = _axis_args(call)
    return _finish(call, np.min(args[0], axis=axis, keepdims=keepdims), out)


def k_argmax(call, args, out=None):
    axis, keepdims = _axis_args(call)
    return _finish(call, np.argmax(args[0], axis=axis, keepdims=keepdims), out)


# ---------------------------------------------------------- contractions


def k_matmul(call, args, out=None):
    a, b = args
    if call.dtype.name == "f32":
        res = np.matmul(a.astype(np.float64), b.astype(np.float64))
    else:
        with _quiet():
            res = np.matmul(a, b)
    return _finish(call, res, out)


def _conv_acc(call, *arrays):
    if call.dtype.name == "f32":
        return [a.astype(np.float64) for a in arrays]
    return list(arrays)


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def k_conv2d(call, args, out=None):
    x, w = args[0], args[1]
    bias = args[2] if len(args) == 3 else None
    f, _, kh, kw = w.shape
    stride, padding = call.params["stride"], call.params["padding"]
    if bias is None:
        xx, ww = _conv_acc(call, x, w)
    else:
        xx, ww, bias = _conv_acc(call, x, w, bias)
    cols, ho, wo = _im2col(xx, kh, kw, stride, padding)
    res = np.matmul(ww.reshape(f, -1)[None], cols).reshape(x.shape[0], f, ho, wo)
    if bias is not None:
        res = res + bias[None, :, None, None]
    return _finish(call, res, out)


def k_conv2d_grad_input(call, args, out=None):
    g, w = args
    gg, ww = _conv_acc(call, g, w)
    n, f, ho, wo = g.shape
    _, c, kh, kw = w.shape
    sh, sw = call.params["stride"]
    ph, pw = call.params["padding"]
    _, _, h, w_in = call.params["x_shape"]
    dcols = np.matmul(ww.reshape(f, -1).T[None], gg.reshape(n, f, ho * wo))
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * ph, w_in + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, i, j]
    dx = dxp[:, :, ph : ph + h, pw : pw + w_in]
    return _finish(call, dx, out)


def k_conv2d_grad_weight(call, args, out=None):
    x, g = args
    xx, gg = _conv_acc(call, x, g)
    n, f, ho, wo = g.shape
    _, c, kh, kw = call.params["w_shape"]
    stride, padding = call.params["stride"], call.params["padding"]
    cols, _, _ = _im2col(xx, kh, kw, stride, padding)
    dw = np.matmul(gg.reshape(n, f, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return _finish(call, dw.reshape(f, c, kh, kw), out)


# ---------------------------------------------------- shape manipulation


def k_reshape(call, args, out=None):
    return _finish(call, args[0].reshape(tuple(call.shape)), out)


def k_transpose(call, args, out=None):
    perm = call.params.get("perm") or tuple(reversed(range(args[0].ndim)))
    return _finish(call, np.transpose(args[0], perm), out)


def k_concat(call, args, out=None):
    with _quiet():
        return _finish(call, np.concatenate(args, axis=call.params["axis"]), out)


def k_slice(call, args, out=None):
    p = call.params
    index = tuple(slice(st, sp, step) for st, sp, step in zip(p["starts"], p["stops"], p["steps"]))
    return _finish(call, args[0][index], out)


def k_pad(call, args, out=None):
    p = call.params
    value = p.get("value", 0)
    padded = np.pad(args[0], tuple(p["pad_width"]), constant_values=value)
    return _finish(call, padded, out)


KERNELS = {
    "full": k_full,
    "arange": k_arange,
    "rand_uniform": k_rand_uniform,
    "rand_normal": k_rand_normal,
    "from_host": k_from_host,
    "to_host": k_to_host,
    "add": _binary(np.add),
    "sub": _binary(np.subtract),
    "mul": _binary(np.multiply),
    "div": k_div,
    "pow": k_pow,
    "minimum": _binary(np.minimum),
    "maximum": _binary(np.maximum),
    "eq": _binary(np.equal),
    "lt": _binary(np.less),
    "gt": _binary(np.greater),
    "logical_and": _binary(np.logical_and),
    "logical_or": _binary(np.logical_or),
    "neg": _unary(np.negative),
    "abs": _unary(np.abs),
    "exp": _unary(np.exp),
    "log": _unary(np.log),
    "sqrt": _unary(np.sqrt),
    "sin": _unary(np.sin),
    "cos": _unary(np.cos),
    "tanh": _unary(np.tanh),
    "logical_not": _unary(np.logical_not),
    "astype": k_astype,
    "sum": k_sum,
    "max_reduce": k_max_reduce,
    "min_reduce": k_min_reduce,
    "argmax": k_argmax,
    "matmul": k_matmul,
    "conv2d": k_conv2d,
    "conv2d_grad_input": k_conv2d_grad_input,
    "conv2d_grad_weight": k_conv2d_grad_weight,
    "reshape": k_reshape,
    "transpose": k_transpose,
    "concat": k_concat,
    "slice": k_slice,
    "pad": k_pad,
}
