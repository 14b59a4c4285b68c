"""Shapes: immutable extent tuples with rank <= 8 and numpy-style broadcasting."""

import math

from .errors import AxisError, ShapeError

MAX_RANK = 8


class Shape(tuple):
    """An ordered tuple of non-negative extents. The empty shape is a scalar."""

    def __new__(cls, dims=()):
        if isinstance(dims, Shape):
            return dims
        if isinstance(dims, int):
            dims = (dims,)
        out = []
        for d in dims:
            if isinstance(d, bool) or not isinstance(d, (int,)):
                try:
                    d = int(d)  # numpy integer scalars
                except (TypeError, ValueError):
                    raise ShapeError(f"shape extents must be integers, got {d!r}") from None
            if d < 0:
                raise ShapeError(f"negative extent {d} in shape {tuple(dims)}")
            out.append(int(d))
        if len(out) > MAX_RANK:
            raise ShapeError(f"rank {len(out)} exceeds the maximum of {MAX_RANK}")
        return super().__new__(cls, out)

    @property
    def rank(self):
        return len(self)

    @property
    def size(self):
        return math.prod(self)

    def __repr__(self):
        return f"Shape{tuple(self)}"


def broadcast(a, b):
    """Right-aligned broadcast of two shapes; extent 1 stretches."""
    a, b = Shape(a), Shape(b)
    rank = max(a.rank, b.rank)
    pa = (1,) * (rank - a.rank) + tuple(a)
    pb = (1,) * (rank - b.rank) + tuple(b)
    dims = []
    for x, y in zip(pa, pb):
        if x == y or y == 1:
            dims.append(x)
        elif x == 1:
            dims.append(y)
        else:
            raise ShapeError(f"cannot broadcast {tuple(a)} with {tuple(b)}")
    return Shape(dims)


def normalize_axis(axis, rank):
    """Resolve a possibly negative axis against a rank."""
    if not isinstance(axis, int):
        raise AxisError(f"axis must be an integer, got {axis!r}")
    orig = axis
    if axis < 0:
        axis += rank
    if not 0 <= axis < rank:
        raise AxisError(f"axis {orig} out of range for rank {rank}")
    return axis


def reduced(shape, axis, keepdims):
    """Shape left after reducing one axis (or all axes when axis is None)."""
    shape = Shape(shape)
    if axis is None:
        return Shape((1,) * shape.rank) if keepdims else Shape(())
    axis = normalize_axis(axis, shape.rank)
    if keepdims:
        return Shape(shape[:axis] + (1,) + shape[axis + 1 :])
    return Shape(shape[:axis] + shape[axis + 1 :])
