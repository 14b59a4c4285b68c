"""Element types and the promotion lattice.

The set is closed: f32, f64, i32, i64, u8, bool. Promotion follows the
total order bool < u8 < i32 < i64 < f32 < f64, and true division of two
integer (or bool) operands produces f32.
"""

import numpy as np

from .errors import DTypeError


class DType:
    """One element-type tag. Compare instances by identity."""

    __slots__ = ("name", "np", "itemsize", "kind", "rank")

    def __init__(self, name, np_dtype, kind, rank):
        self.name = name
        self.np = np.dtype(np_dtype)
        self.itemsize = self.np.itemsize
        self.kind = kind  # "f" float, "i" signed int, "u" unsigned int, "b" bool
        self.rank = rank  # position in the promotion order

    @property
    def is_float(self):
        return self.kind == "f"

    @property
    def is_integer(self):
        return self.kind in ("i", "u")

    @property
    def is_bool(self):
        return self.kind == "b"

    def __repr__(self):
        return self.name


bool_ = DType("bool", np.bool_, "b", 0)
u8 = DType("u8", np.uint8, "u", 1)
i32 = DType("i32", np.int32, "i", 2)
i64 = DType("i64", np.int64, "i", 3)
f32 = DType("f32", np.float32, "f", 4)
f64 = DType("f64", np.float64, "f", 5)

ALL = (bool_, u8, i32, i64, f32, f64)
_BY_NAME = {d.name: d for d in ALL}
_BY_NP = {d.np: d for d in ALL}


def by_name(name):
    """Look up a dtype by tag, accepting DType instances unchanged."""
    if isinstance(name, DType):
        return name
    try:
        return _BY_NAME[name]
    except KeyError:
        raise DTypeError(f"unsupported dtype tag {name!r}") from None


def from_numpy(np_dtype):
    try:
        return _BY_NP[np.dtype(np_dtype)]
    except KeyError:
        raise DTypeError(f"no dtype corresponds to numpy {np_dtype!r}") from None


def promote(a, b):
    """The join of two dtypes in the promotion order."""
    return a if a.rank >= b.rank else b


def div_result(a, b):
    """True division: integer (or bool) operands produce f32."""
    out = promote(a, b)
    return out if out.is_float else f32


def scalar_dtype(value, other=None):
    """Dtype a bare Python scalar adopts in a binary op.

    Scalars are weak: they take the tensor operand's dtype when the kinds are
    compatible, and only force a promotion when a float scalar meets an
    integer tensor.
    """
    if isinstance(value, bool):
        return other if other is not None else bool_
    if isinstance(value, int):
        if other is not None and not other.is_bool:
            return other
        return i64
    if isinstance(value, float):
        if other is not None and other.is_float:
            return other
        return f32
    raise DTypeError(f"unsupported scalar operand of type {type(value).__name__}")
