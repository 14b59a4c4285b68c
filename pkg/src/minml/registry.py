"""The primitive operation table and the two-part backend contract.

A backend is the global half: it owns state (RNG counters, an attached
memory manager) and knows how to execute every primitive in PRIMITIVES.
The per-tensor half is the handle a backend returns from execute(): an
opaque adapter object (dense storage, a graph node, ...) that the Tensor
type carries around without inspecting.

Everything user-facing that is not in PRIMITIVES is derived by composing
primitives, which is what keeps alternative backends small to write. The
table is capped at MAX_PRIMITIVES entries and introspectable, so the cap
is enforced by a test rather than trusted.
"""

import threading

from .errors import DuplicateBackend, UnknownBackend, ManagerBusy
from .memory import NativeManager
from .rng import RngState

MAX_PRIMITIVES = 60

# name -> one-line contract. params listed after ';' ride on the op descriptor.
PRIMITIVES = {
    # creation and host transfer
    "full": "constant tensor; params shape, dtype, value",
    "arange": "integers 0..n-1; params n, dtype",
    "rand_uniform": "U[0,1) floats; params shape, dtype, seed, offset",
    "rand_normal": "N(0,1) floats; params shape, dtype, seed, offset",
    "from_host": "copy a row-major host array in; params array",
    "to_host": "copy out as a row-major host array",
    # binary elementwise (one operand may be a scalar carried in params)
    "add": "elementwise a + b with broadcasting",
    "sub": "elementwise a - b",
    "mul": "elementwise a * b",
    "div": "true division; integer operands produce f32",
    "pow": "elementwise a ** b",
    "minimum": "elementwise min(a, b)",
    "maximum": "elementwise max(a, b)",
    "eq": "elementwise a == b -> bool",
    "lt": "elementwise a < b -> bool",
    "gt": "elementwise a > b -> bool",
    "logical_and": "elementwise and over bool operands",
    "logical_or": "elementwise or over bool operands",
    # unary elementwise
    "neg": "elementwise -x",
    "abs": "elementwise |x|",
    "exp": "elementwise e**x (float only)",
    "log": "natural log (float only)",
    "sqrt": "square root (float only)",
    "sin": "sine (float only)",
    "cos": "cosine (float only)",
    "tanh": "hyperbolic tangent (float only)",
    "logical_not": "elementwise not over bool",
    "astype": "cast to another dtype; params dtype",
    # reductions
    "sum": "sum over one axis or all; params axis, keepdims",
    "max_reduce": "maximum over one axis or all; params axis, keepdims",
    "min_reduce": "minimum over one axis or all; params axis, keepdims",
    "argmax": "index of the row maximum, ties to the lowest index; params axis, keepdims",
    # contractions
    "matmul": "rank-2 matrix product, or batched rank-3 with matching batch",
    "conv2d": "NCHW cross-correlation; params stride, padding; optional bias input",
    "conv2d_grad_input": "gradient of conv2d w.r.t. its input; params stride, padding, x_shape",
    "conv2d_grad_weight": "gradient of conv2d w.r.t. its weight; params stride, padding, w_shape",
    # shape manipulation
    "reshape": "row-major reshape to a new shape; params shape",
    "transpose": "permute axes; params perm",
    "concat": "join tensors along an axis; params axis",
    "slice": "strided crop; params starts, stops, steps",
    "pad": "constant-pad each axis; params pad_width, value",
}

assert len(PRIMITIVES) <= MAX_PRIMITIVES


def primitive_names():
    return tuple(PRIMITIVES)


class OpCall:
    """A primitive invocation descriptor: the op name, its static params,
    and the already-inferred output shape/dtype."""

    __slots__ = ("name", "params", "shape", "dtype")

    def __init__(self, name, params, shape, dtype):
        self.name = name
        self.params = params
        self.shape = shape
        self.dtype = dtype

    def __repr__(self):
        return f"OpCall({self.name}, {dict(self.params)}, {tuple(self.shape)}, {self.dtype})"


class Backend:
    """Global half of the backend contract.

    Subclasses implement execute(call, args) for every primitive, where args
    are the handles of the input tensors and the return value is the handle
    of the output (to_host returns a host ndarray instead). Handles from one
    backend are meaningless to another.
    """

    def __init__(self, name, seed=0):
        self.name = name
        self.rng = RngState(seed)
        self._manager = self._default_manager()

    def _default_manager(self):
        return NativeManager()

    @property
    def manager(self):
        return self._manager

    def attach_manager(self, manager):
        if self._manager is not None and self._manager.live_blocks:
            raise ManagerBusy(
                f"backend {self.name!r} has {self._manager.live_blocks} live blocks"
            )
        self._manager = manager

    def detach_manager(self):
        old = self._manager
        if old is not None and old.live_blocks:
            raise ManagerBusy(
                f"backend {self.name!r} has {old.live_blocks} live blocks"
            )
        self._manager = self._default_manager()
        return old

    def seed(self, value):
        self.rng.reseed(value)

    def execute(self, call, args):
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.name!r}>"


_lock = threading.Lock()
_backends = {}
_default_id = None


def register(backend):
    """Register a backend under its name; names must be unique."""
    global _default_id
    with _lock:
        if backend.name in _backends:
            raise DuplicateBackend(f"backend {backend.name!r} already registered")
        _backends[backend.name] = backend
        if _default_id is None:
            _default_id = backend.name
    return backend


def unregister(backend_id):
    """Remove a backend (e.g. a temporary instrumentation wrapper)."""
    global _default_id
    with _lock:
        if backend_id not in _backends:
            raise UnknownBackend(f"no backend registered as {backend_id!r}")
        del _backends[backend_id]
        if _default_id == backend_id:
            _default_id = next(iter(_backends), None)


def get(backend_id):
    with _lock:
        try:
            return _backends[backend_id]
        except KeyError:
            raise UnknownBackend(f"no backend registered as {backend_id!r}") from None


def set_default(backend_id):
    """Make a registered backend the default for tensor creation; from there
    every derived op, layer, and optimizer computation follows the tensors."""
    global _default_id
    with _lock:
        if backend_id not in _backends:
            raise UnknownBackend(f"no backend registered as {backend_id!r}")
        _default_id = backend_id


def default():
    with _lock:
        if _default_id is None:
            raise UnknownBackend("no backend registered yet")
        return _backends[_default_id]


def registered_ids():
    with _lock:
        return tuple(_backends)
