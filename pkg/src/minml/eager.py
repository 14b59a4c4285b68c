"""Eager reference backend: every op runs immediately on a dense buffer."""

import weakref

import numpy as np

from .kernels import KERNELS
from .registry import Backend


class DenseStorage:
    """Adapter handle: one op result in one managed allocation.

    buffer is an ndarray view over the block's memory, so dropping the
    last reference to the storage is what returns the block to the
    manager (via a weakref finalizer, never __del__).
    """

    __slots__ = ("buffer", "shape", "dtype", "alloc_id", "block", "__weakref__")

    def __init__(self, buffer, shape, dtype, block):
        self.buffer = buffer
        self.shape = shape
        self.dtype = dtype
        self.block = block
        self.alloc_id = None if block is None else block.block_id

    @property
    def array(self):
        return self.buffer


def execute_managed(manager, call, arrays):
    """Run one kernel with its output in exactly one fresh managed allocation."""
    manager.on_op_begin(call.name)
    try:
        nbytes = call.shape.size * call.dtype.itemsize
        if nbytes == 0:
            empty = np.empty(tuple(call.shape), dtype=call.dtype.np)
            return DenseStorage(empty, call.shape, call.dtype, None)
        block = manager.alloc(nbytes, op=call.name)
        try:
            out = np.frombuffer(block.data, dtype=call.dtype.np, count=call.shape.size)
            out = out.reshape(tuple(call.shape))
            KERNELS[call.name](call, arrays, out=out)
        except BaseException:
            manager.free(block)
            raise
        storage = DenseStorage(out, call.shape, call.dtype, block)
        weakref.finalize(storage, manager.free, block)
        return storage
    finally:
        manager.on_op_end(call.name)


class EagerBackend(Backend):
    def __init__(self, name="eager", seed=0):
        super().__init__(name, seed)

    def execute(self, call, args):
        arrays = tuple(a.array for a in args)
        if call.name == "to_host":
            return KERNELS["to_host"](call, arrays)
        return execute_managed(self.manager, call, arrays)
