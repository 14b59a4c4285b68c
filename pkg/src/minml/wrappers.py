"""Backend wrappers, mainly for introspection.

A wrapper is itself a backend: register one and point tensors at it, and
because dispatch follows the operands every op in a program flows through
the wrapper's execute. CountingBackend uses that to tally primitive calls,
which is how composition claims are checked (derived ops may only show up
as their primitive parts, and nothing may reach a buffer any other way).
"""

import collections
import threading

from .registry import Backend


class ForwardingBackend(Backend):
    """Delegates every op to an inner backend; a base for instrumentation."""

    def __init__(self, inner, name=None, seed=0):
        super().__init__(name or f"forwarding({inner.name})", seed)
        self.inner = inner

    @property
    def manager(self):
        return self.inner.manager

    def attach_manager(self, manager):
        self.inner.attach_manager(manager)

    def detach_manager(self):
        return self.inner.detach_manager()

    def execute(self, call, args):
        return self.inner.execute(call, args)


class CountingBackend(ForwardingBackend):
    """Counts executed ops by primitive name."""

    def __init__(self, inner, name=None, seed=0):
        super().__init__(inner, name or f"counting({inner.name})", seed)
        self.counts = collections.Counter()
        self._count_lock = threading.Lock()

    def execute(self, call, args):
        with self._count_lock:
            self.counts[call.name] += 1
        return self.inner.execute(call, args)

    def reset_counts(self):
        with self._count_lock:
            self.counts.clear()

    def total(self):
        with self._count_lock:
            return sum(self.counts.values())
