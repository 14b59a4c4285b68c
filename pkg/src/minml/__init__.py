"""A small modular ML library built around one idea: a tensor is a handle,
and everything numeric happens behind a swappable backend interface.

Importing the package registers the two reference backends; "eager" comes
first and is therefore the default for tensor creation. Layers, losses,
optimizers, datasets, and collectives all live in submodules and only talk
to tensors, so they follow whatever backend a tensor was created on.
"""

from . import registry
from .eager import EagerBackend
from .deferred import DeferredBackend

registry.register(EagerBackend("eager"))
registry.register(DeferredBackend("deferred"))

from . import data, distributed, memory, nn, ops, optim  # noqa: E402
from .autograd import Variable, gradcheck, no_grad, register_custom_op  # noqa: E402
from .dtypes import DType, by_name as dtype_by_name  # noqa: E402
from .errors import Error  # noqa: E402
from .registry import OpCall, primitive_names  # noqa: E402
from .shape import Shape  # noqa: E402
from ._tensor import (  # noqa: E402
    Tensor,
    arange,
    concat,
    conv2d,
    full,
    identity,
    matmul,
    ones,
    rand_normal,
    rand_uniform,
    tensor,
    zeros,
)
from .wrappers import CountingBackend, ForwardingBackend  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CountingBackend",
    "DeferredBackend",
    "DType",
    "EagerBackend",
    "Error",
    "ForwardingBackend",
    "OpCall",
    "Shape",
    "Tensor",
    "Variable",
    "arange",
    "concat",
    "conv2d",
    "data",
    "distributed",
    "dtype_by_name",
    "full",
    "gradcheck",
    "identity",
    "matmul",
    "memory",
    "nn",
    "no_grad",
    "ones",
    "ops",
    "optim",
    "primitive_names",
    "rand_normal",
    "rand_uniform",
    "register_custom_op",
    "registry",
    "tensor",
    "zeros",
]
