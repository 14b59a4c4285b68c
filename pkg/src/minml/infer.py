"""Shape and dtype inference for every primitive.

The tensor layer runs plan() before dispatching to any backend, so invalid
programs fail at the same call site whether execution is immediate or
deferred. Backends may assume their inputs already passed these checks.
"""

from . import dtypes
from .errors import AxisError, DTypeError, EmptyReduction, ShapeError
from .shape import Shape, broadcast, normalize_axis, reduced

_ARITH = ("add", "sub", "mul", "div", "pow")
_MINMAX = ("minimum", "maximum")
_COMPARE = ("eq", "lt", "gt")
_LOGICAL = ("logical_and", "logical_or")
_FLOAT_UNARY = ("exp", "log", "sqrt", "sin", "cos", "tanh")


def plan(name, params, inputs):
    """Infer (Shape, DType) of a primitive's output, validating its inputs.

    inputs is a sequence of (Shape, DType) pairs describing the tensor
    operands in order; scalar operands ride in params.
    """
    rule = _RULES.get(name)
    if rule is None:
        raise KeyError(f"unknown primitive {name!r}")
    return rule(params, inputs)


def _binary_operands(name, params, inputs):
    """Resolve the (shape, dtype) pair of each side of a binary op."""
    if "scalar" in params:
        (shape_a, dtype_a) = inputs[0]
        scalar_dt = dtypes.scalar_dtype(params["scalar"], dtype_a)
        if params.get("scalar_side") == "left":
            return Shape(()), scalar_dt, shape_a, dtype_a
        return shape_a, dtype_a, Shape(()), scalar_dt
    (shape_a, dtype_a), (shape_b, dtype_b) = inputs
    return shape_a, dtype_a, shape_b, dtype_b


def _infer_binary(name):
    def rule(params, inputs):
        shape_a, dtype_a, shape_b, dtype_b = _binary_operands(name, params, inputs)
        out_shape = broadcast(shape_a, shape_b)
        if name in _LOGICAL:
            if not (dtype_a.is_bool and dtype_b.is_bool):
                raise DTypeError(f"{name} requires bool operands, got {dtype_a}, {dtype_b}")
            return out_shape, dtypes.bool_
        if name in _COMPARE:
            return out_shape, dtypes.bool_
        if name in _ARITH and (dtype_a.is_bool or dtype_b.is_bool):
            raise DTypeError(f"{name} is not defined on bool; cast first")
        if name == "div":
            return out_shape, dtypes.div_result(dtype_a, dtype_b)
        return out_shape, dtypes.promote(dtype_a, dtype_b)

    return rule


def _infer_unary(name):
    def rule(params, inputs):
        shape, dtype = inputs[0]
        if name in _FLOAT_UNARY and not dtype.is_float:
            raise DTypeError(f"{name} requires a float tensor, got {dtype}")
        if name in ("neg", "abs") and dtype.is_bool:
            raise DTypeError(f"{name} is not defined on bool; cast first")
        if name == "logical_not" and not dtype.is_bool:
            raise DTypeError(f"logical_not requires bool, got {dtype}")
        if name == "astype":
            return shape, dtypes.by_name(params["dtype"])
        return shape, dtype

    return rule


def _infer_reduce(name):
    def rule(params, inputs):
        shape, dtype = inputs[0]
        axis = params.get("axis")
        keepdims = bool(params.get("keepdims", False))
        if name == "argmax" and axis is None:
            raise AxisError("argmax requires an axis")
        if axis is not None:
            axis = normalize_axis(axis, shape.rank)
            if name != "sum" and shape[axis] == 0:
                raise EmptyReduction(f"{name} over axis {axis} of extent 0")
        elif name != "sum" and shape.size == 0:
            raise EmptyReduction(f"{name} over an empty tensor")
        if name == "sum" and dtype.is_bool:
            raise DTypeError("sum is not defined on bool; cast first")
        out_dtype = dtypes.i64 if name == "argmax" else dtype
        return reduced(shape, axis, keepdims), out_dtype

    return rule


def _infer_matmul(params, inputs):
    (shape_a, dtype_a), (shape_b, dtype_b) = inputs
    if dtype_a.is_bool or dtype_b.is_bool:
        raise DTypeError("matmul is not defined on bool")
    if shape_a.rank == 2 and shape_b.rank == 2:
        m, k = shape_a
        k2, n = shape_b
        if k != k2:
            raise ShapeError(f"matmul inner extents differ: {tuple(shape_a)} x {tuple(shape_b)}")
        out = Shape((m, n))
    elif shape_a.rank == 3 and shape_b.rank == 3:
        if shape_a[0] != shape_b[0]:
            raise ShapeError(
                f"batched matmul batch extents differ: {tuple(shape_a)} x {tuple(shape_b)}"
            )
        if shape_a[2] != shape_b[1]:
            raise ShapeError(f"matmul inner extents differ: {tuple(shape_a)} x {tuple(shape_b)}")
        out = Shape((shape_a[0], shape_a[1], shape_b[2]))
    else:
        raise ShapeError(
            f"matmul takes rank-2 pairs or rank-3 pairs, got ranks {shape_a.rank}, {shape_b.rank}"
        )
    return out, dtypes.promote(dtype_a, dtype_b)


def _conv_out_hw(h, w, kh, kw, stride, padding):
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv2d padding must be non-negative, got {padding}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"kernel ({kh}, {kw}) larger than padded input ({h + 2 * ph}, {w + 2 * pw})"
        )
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _infer_conv2d(params, inputs):
    (shape_x, dtype_x), (shape_w, dtype_w) = inputs[0], inputs[1]
    if shape_x.rank != 4 or shape_w.rank != 4:
        raise ShapeError(
            f"conv2d expects NCHW input and FCKK weight, got ranks {shape_x.rank}, {shape_w.rank}"
        )
    n, c, h, w = shape_x
    f, c2, kh, kw = shape_w
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c2}")
    ho, wo = _conv_out_hw(h, w, kh, kw, params["stride"], params["padding"])
    out_dtype = dtypes.promote(dtype_x, dtype_w)
    if len(inputs) == 3:
        shape_b, dtype_b = inputs[2]
        if tuple(shape_b) != (f,):
            raise ShapeError(f"conv2d bias must have shape ({f},), got {tuple(shape_b)}")
        out_dtype = dtypes.promote(out_dtype, dtype_b)
    return Shape((n, f, ho, wo)), out_dtype


def _infer_conv2d_grad_input(params, inputs):
    (shape_g, dtype_g), (shape_w, dtype_w) = inputs
    x_shape = Shape(params["x_shape"])
    n, c, h, w = x_shape
    f, c2, kh, kw = shape_w
    if c != c2:
        raise ShapeError(f"conv2d_grad_input channel mismatch: {c} vs {c2}")
    ho, wo = _conv_out_hw(h, w, kh, kw, params["stride"], params["padding"])
    if tuple(shape_g) != (n, f, ho, wo):
        raise ShapeError(
            f"conv2d_grad_input expects gradient shape {(n, f, ho, wo)}, got {tuple(shape_g)}"
        )
    return x_shape, dtypes.promote(dtype_g, dtype_w)


def _infer_conv2d_grad_weight(params, inputs):
    (shape_x, dtype_x), (shape_g, dtype_g) = inputs
    w_shape = Shape(params["w_shape"])
    n, c, h, w = shape_x
    f, c2, kh, kw = w_shape
    if c != c2:
        raise ShapeError(f"conv2d_grad_weight channel mismatch: {c} vs {c2}")
    ho, wo = _conv_out_hw(h, w, kh, kw, params["stride"], params["padding"])
    if tuple(shape_g) != (n, f, ho, wo):
        raise ShapeError(
            f"conv2d_grad_weight expects gradient shape {(n, f, ho, wo)}, got {tuple(shape_g)}"
        )
    return w_shape, dtypes.promote(dtype_x, dtype_g)


def _infer_reshape(params, inputs):
    shape, dtype = inputs[0]
    new_shape = Shape(params["shape"])
    if new_shape.size != shape.size:
        raise ShapeError(
            f"reshape cannot change element count: {tuple(shape)} ({shape.size}) "
            f"-> {tuple(new_shape)} ({new_shape.size})"
        )
    return new_shape, dtype


def _infer_transpose(params, inputs):
    shape, dtype = inputs[0]
    perm = tuple(params.get("perm") or reversed(range(shape.rank)))
    if sorted(perm) != list(range(shape.rank)):
        raise ShapeError(f"perm {perm} is not a permutation of rank {shape.rank}")
    return Shape(tuple(shape[p] for p in perm)), dtype


def _infer_concat(params, inputs):
    if not inputs:
        raise ShapeError("concat needs at least one input")
    axis = normalize_axis(params["axis"], inputs[0][0].rank)
    first, dtype = inputs[0]
    total = 0
    for shape, dt in inputs:
        if shape.rank != first.rank:
            raise ShapeError(f"concat rank mismatch: {tuple(first)} vs {tuple(shape)}")
        for i, (a, b) in enumerate(zip(first, shape)):
            if i != axis and a != b:
                raise ShapeError(
                    f"concat operands disagree on axis {i}: {tuple(first)} vs {tuple(shape)}"
                )
        total += shape[axis]
        dtype = dtypes.promote(dtype, dt)
    dims = list(first)
    dims[axis] = total
    return Shape(dims), dtype


def _infer_slice(params, inputs):
    shape, dtype = inputs[0]
    starts, stops, steps = params["starts"], params["stops"], params["steps"]
    if not (len(starts) == len(stops) == len(steps) == shape.rank):
        raise ShapeError(f"slice needs one (start, stop, step) triple per axis of rank {shape.rank}")
    dims = []
    for dim, (start, stop, step) in zip(shape, zip(starts, stops, steps)):
        if step < 1:
            raise ShapeError(f"slice step must be >= 1, got {step}")
        if not (0 <= start <= stop <= dim):
            raise ShapeError(f"slice range [{start}, {stop}) invalid for extent {dim}")
        dims.append(-(-(stop - start) // step))
    return Shape(dims), dtype


def _infer_pad(params, inputs):
    shape, dtype = inputs[0]
    pad_width = params["pad_width"]
    if len(pad_width) != shape.rank:
        raise ShapeError(f"pad needs one (lo, hi) pair per axis of rank {shape.rank}")
    dims = []
    for dim, (lo, hi) in zip(shape, pad_width):
        if lo < 0 or hi < 0:
            raise ShapeError(f"pad widths must be non-negative, got ({lo}, {hi})")
        dims.append(dim + lo + hi)
    return Shape(dims), dtype


def _infer_full(params, inputs):
    return Shape(params["shape"]), dtypes.by_name(params["dtype"])


def _infer_arange(params, inputs):
    n = int(params["n"])
    if n < 0:
        raise ShapeError(f"arange length must be non-negative, got {n}")
    return Shape((n,)), dtypes.by_name(params["dtype"])


def _infer_rand(params, inputs):
    dtype = dtypes.by_name(params["dtype"])
    if not dtype.is_float:
        raise DTypeError(f"random tensors must be float, got {dtype}")
    return Shape(params["shape"]), dtype


def _infer_from_host(params, inputs):
    array = params["array"]
    return Shape(array.shape), dtypes.from_numpy(array.dtype)


def _infer_to_host(params, inputs):
    return inputs[0]


_RULES = {
    "full": _infer_full,
    "arange": _infer_arange,
    "rand_uniform": _infer_rand,
    "rand_normal": _infer_rand,
    "from_host": _infer_from_host,
    "to_host": _infer_to_host,
    "matmul": _infer_matmul,
    "conv2d": _infer_conv2d,
    "conv2d_grad_input": _infer_conv2d_grad_input,
    "conv2d_grad_weight": _infer_conv2d_grad_weight,
    "reshape": _infer_reshape,
    "transpose": _infer_transpose,
    "concat": _infer_concat,
    "slice": _infer_slice,
    "pad": _infer_pad,
}
for _name in _ARITH + _MINMAX + _COMPARE + _LOGICAL:
    _RULES[_name] = _infer_binary(_name)
for _name in ("neg", "abs", "logical_not", "astype") + _FLOAT_UNARY:
    _RULES[_name] = _infer_unary(_name)
for _name in ("sum", "max_reduce", "min_reduce", "argmax"):
    _RULES[_name] = _infer_reduce(_name)
