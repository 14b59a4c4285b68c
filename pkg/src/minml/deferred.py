"""Deferred reference backend: ops record dataflow nodes, values appear on demand.

Recording does no numeric work (shape and dtype checks already ran in the
dispatch layer, so malformed programs fail at record time exactly where
the eager backend would fail). materialize() evaluates just the subgraph
an output needs, in topological order, and caches results on the nodes.

Single-consumer chains of elementwise ops are fused: interior links
produce short-lived host temporaries and only the chain-final node gets a
managed allocation, which is observable by comparing the manager's alloc
counts against the eager backend. A node is never fused while a live
tensor handle points at it, since that handle could be read later.

Graph lifetime rides on ordinary reference counts: consumers hold their
inputs, handles pin their nodes, and a stored node drops its input edges.
A finished training step therefore releases the previous step's subgraph
without any explicit pruning call.
"""

import gc
import itertools
import threading
import weakref

import numpy as np

from .eager import execute_managed
from .kernels import KERNELS
from .registry import Backend

_ELEMENTWISE = frozenset(
    {
        "add", "sub", "mul", "div", "pow", "minimum", "maximum",
        "eq", "lt", "gt", "logical_and", "logical_or",
        "neg", "abs", "exp", "log", "sqrt", "sin", "cos", "tanh",
        "logical_not", "astype",
    }
)
_PRODUCERS = frozenset({"full", "arange", "rand_uniform", "rand_normal", "from_host"})
_FUSABLE = _ELEMENTWISE | _PRODUCERS


def _drop_edges(input_refs):
    # fires when a recorded-but-never-stored node is collected
    for ref in input_refs:
        node = ref()
        if node is not None:
            node.consumer_count -= 1


class GraphNode:
    __slots__ = (
        "node_id", "call", "inputs", "consumer_count", "value", "backend",
        "_handles", "_edge_finalizer", "__weakref__",
    )

    def __init__(self, node_id, call, inputs, backend):
        self.node_id = node_id
        self.call = call
        self.inputs = tuple(inputs)
        self.consumer_count = 0
        self.value = None
        self.backend = backend
        self._handles = weakref.WeakSet()
        if inputs:
            refs = [weakref.ref(i) for i in self.inputs]
            self._edge_finalizer = weakref.finalize(self, _drop_edges, refs)
        else:
            self._edge_finalizer = None

    @property
    def shape(self):
        return self.call.shape

    @property
    def dtype(self):
        return self.call.dtype

    @property
    def materialized(self):
        return self.value is not None

    @property
    def pinned(self):
        return len(self._handles) > 0

    def release_inputs(self):
        if self._edge_finalizer is not None:
            self._edge_finalizer.detach()
            self._edge_finalizer = None
        for node in self.inputs:
            node.consumer_count -= 1
        self.inputs = ()

    def __repr__(self):
        state = "materialized" if self.materialized else "pending"
        return f"GraphNode(n{self.node_id}, {self.call.name}, {state})"


class Handle:
    """What a deferred Tensor actually holds; its lifetime pins the node."""

    __slots__ = ("node", "__weakref__")

    def __init__(self, node):
        self.node = node
        node._handles.add(self)

    @property
    def shape(self):
        return self.node.shape

    @property
    def dtype(self):
        return self.node.dtype

    def materialize(self):
        self.node.backend.materialize(self.node)
        return self


class DeferredBackend(Backend):
    def __init__(self, name="deferred", seed=0):
        super().__init__(name, seed)
        self._graph_lock = threading.RLock()
        self._ids = itertools.count()
        self._nodes = weakref.WeakSet()

    @property
    def node_count(self):
        return len(self._nodes)

    def execute(self, call, args):
        if call.name == "to_host":
            node = args[0].node
            self.materialize(node)
            return np.array(node.value.array, copy=True)
        with self._graph_lock:
            inputs = [h.node for h in args]
            node = GraphNode(next(self._ids), call, inputs, self)
            for inp in inputs:
                inp.consumer_count += 1
            self._nodes.add(node)
            return Handle(node)

    def materialize(self, node):
        with self._graph_lock:
            if node.materialized:
                return node
            temps = {}
            for n in self._postorder(node):
                arrays = tuple(
                    temps[id(i)] if id(i) in temps else i.value.array for i in n.inputs
                )
                if n is not node and self._fusable(n):
                    temps[id(n)] = KERNELS[n.call.name](n.call, arrays)
                else:
                    n.value = execute_managed(self.manager, n.call, arrays)
                    n.release_inputs()
            return node

    def _fusable(self, n):
        return n.call.name in _FUSABLE and n.consumer_count == 1 and not n.pinned

    def _postorder(self, root):
        order, visited, stack = [], set(), [(root, False)]
        while stack:
            n, ready = stack.pop()
            if ready:
                order.append(n)
                continue
            if id(n) in visited or n.materialized:
                continue
            visited.add(id(n))
            stack.append((n, True))
            for i in n.inputs:
                stack.append((i, False))
        return order

    def prune_unreferenced(self):
        """Sweep any unreachable nodes; returns how many were dropped."""
        with self._graph_lock:
            before = len(self._nodes)
            gc.collect()
            return max(0, before - len(self._nodes))

    def to_dot(self, root):
        """Render the dataflow graph reachable from a tensor as DOT text."""
        node = getattr(root, "adapter", root)
        if isinstance(node, Handle):
            node = node.node
        lines = ["digraph dataflow {", '  node [shape=box, fontname="monospace"];']
        seen = set()
        stack = [node]
        while stack:
            n = stack.pop()
            if n.node_id in seen:
                continue
            seen.add(n.node_id)
            dims = "x".join(str(d) for d in n.shape) if n.shape.rank else "scalar"
            label = f"n{n.node_id} {n.call.name}\\n{n.dtype.name} [{dims}]"
            style = ", style=filled, fillcolor=lightgrey" if n.materialized else ""
            lines.append(f'  n{n.node_id} [label="{label}"{style}];')
            for i in n.inputs:
                lines.append(f"  n{i.node_id} -> n{n.node_id};")
                stack.append(i)
        lines.append("}")
        return "\n".join(lines)
