"""Pluggable memory management for tensor payloads.

A MemoryManager hands out MemoryBlocks and takes them back; backends route
every payload allocation through the attached manager, tagging each block
with the op that asked for it (via the on_op_begin/on_op_end hooks).

Managers model a device pool held in host memory. alloc_count / free_count
describe pool traffic: blocks obtained from and returned to the system.
Caching managers recycle freed blocks without touching those counters;
flush_cache() / close() return cached blocks to the system. Replay runs the
same managers in simulate mode, where no real buffers are created.

Policies:
  native            grant exactly what was requested, return on free
  caching           round requests to a bin (<=512 -> 512, else next power
                    of two); freed blocks are cached and reused on an exact
                    bin match
  split_restricted  like caching, but a cached block no larger than the
                    threshold may be split: the request is granted rounded
                    up to 512-byte granularity and the remainder re-enters
                    the cache (remainders under 512 bytes are absorbed into
                    the grant); blocks above the threshold are never split
                    and are reused whole only on an exact bin match

Trace files are line oriented: "A <id> <bytes> <op>" and "F <id>", with "-"
standing for an unknown op. Blank lines and lines starting with "#" are
ignored.
"""

import statistics
import threading
from collections import deque
from dataclasses import asdict, dataclass

from .errors import AllocError, ManagerBusy, OutOfMemory, TraceError

CACHE_FLOOR = 512
SPLIT_GRANULARITY = 512
DEFAULT_SPLIT_THRESHOLD = 1 << 20  # 1 MiB


def bin_size(nbytes):
    """Caching bin for a request: 512-byte floor, next power of two above."""
    if nbytes <= CACHE_FLOOR:
        return CACHE_FLOOR
    return 1 << (int(nbytes) - 1).bit_length()


def round_up(nbytes, granularity=SPLIT_GRANULARITY):
    return -(-int(nbytes) // granularity) * granularity


@dataclass
class MemoryBlock:
    """One live allocation. granted_bytes >= requested_bytes always holds;
    the difference is the block's internal fragmentation. bin_size is the
    size class the block returns to the cache as."""

    block_id: int
    requested_bytes: int
    granted_bytes: int
    bin_size: int
    originating_op: str | None = None
    data: memoryview | None = None

    @property
    def internal_fragmentation(self):
        return self.granted_bytes - self.requested_bytes


@dataclass
class AllocatorStats:
    live_bytes_requested: int = 0
    live_bytes_granted: int = 0
    peak_granted: int = 0
    cache_bytes: int = 0
    alloc_count: int = 0
    free_count: int = 0
    internal_fragmentation: int = 0
    external_fragmentation_ratio: float = 0.0

    def as_dict(self):
        return asdict(self)


class MemoryManager:
    """Pass-through manager and the base class for the caching policies.

    alloc/free/stats are serialized behind one lock; hooks are invoked on
    the executing context and only maintain the current-op tag.
    """

    policy = "native"

    def __init__(self, capacity=None, simulate=False):
        self._lock = threading.RLock()
        self.capacity = capacity
        self.simulate = simulate
        self._next_id = 0
        self._live = {}
        self._op_stack = []
        self._live_req = 0
        self._live_granted = 0
        self._peak_granted = 0
        self._peak_internal = 0
        self._alloc_count = 0
        self._free_count = 0
        self._cache_total = 0
        self._request_sizes = []

    # ------------------------------------------------------------ hooks
    def on_op_begin(self, op):
        with self._lock:
            self._op_stack.append(op)

    def on_op_end(self, op):
        with self._lock:
            if self._op_stack:
                self._op_stack.pop()

    def current_op(self):
        with self._lock:
            return self._op_stack[-1] if self._op_stack else None

    # ------------------------------------------------------- allocation
    def alloc(self, nbytes, op=None):
        nbytes = int(nbytes)
        if nbytes <= 0:
            raise AllocError(f"allocation size must be positive, got {nbytes}")
        with self._lock:
            granted, data = self._acquire(nbytes)
            self._next_id += 1
            block = MemoryBlock(
                block_id=self._next_id,
                requested_bytes=nbytes,
                granted_bytes=granted,
                bin_size=granted,
                originating_op=op if op is not None else self.current_op(),
                data=data,
            )
            self._live[block.block_id] = block
            self._live_req += nbytes
            self._live_granted += granted
            self._peak_granted = max(self._peak_granted, self._live_granted)
            self._peak_internal = max(self._peak_internal, self._live_granted - self._live_req)
            self._request_sizes.append(nbytes)
            return block

    def free(self, block):
        block_id = block.block_id if isinstance(block, MemoryBlock) else int(block)
        with self._lock:
            live = self._live.pop(block_id, None)
            if live is None:
                raise AllocError(f"free of unknown or already-freed block {block_id}")
            self._live_req -= live.requested_bytes
            self._live_granted -= live.granted_bytes
            self._release(live)

    # ----------------------------------------------------- policy seams
    def _acquire(self, nbytes):
        """Return (granted_bytes, data) for a request, from cache or system."""
        return nbytes, self._system_alloc(nbytes)

    def _release(self, block):
        """Dispose of a freed block. The native policy returns it to the system."""
        self._free_count += 1
        block.data = None

    def _can_serve(self, cached_size, probe):
        """Whether a cached block of this size could satisfy a probe request."""
        return False

    # ------------------------------------------------------------ cache
    def flush_cache(self):
        """Return every cached block to the system; returns the count released."""
        return 0

    def _system_alloc(self, granted):
        if self.capacity is not None:
            if self._live_granted + self._cache_total + granted > self.capacity:
                self.flush_cache()
            if self._live_granted + granted > self.capacity:
                raise OutOfMemory(
                    f"request for {granted} bytes exceeds capacity {self.capacity} "
                    f"({self._live_granted} live)"
                )
        self._alloc_count += 1
        return None if self.simulate else memoryview(bytearray(granted))

    # ------------------------------------------------------------ state
    @property
    def live_blocks(self):
        with self._lock:
            return len(self._live)

    @property
    def peak_internal_fragmentation(self):
        with self._lock:
            return self._peak_internal

    def live_block_list(self):
        with self._lock:
            return list(self._live.values())

    def stats(self):
        with self._lock:
            return AllocatorStats(
                live_bytes_requested=self._live_req,
                live_bytes_granted=self._live_granted,
                peak_granted=self._peak_granted,
                cache_bytes=self._cache_total,
                alloc_count=self._alloc_count,
                free_count=self._free_count,
                internal_fragmentation=self._live_granted - self._live_req,
                external_fragmentation_ratio=self._external_ratio(),
            )

    def _external_ratio(self):
        if self._cache_total == 0 or not self._request_sizes:
            return 0.0
        probe = int(statistics.median(self._request_sizes))
        unusable = 0
        for size, entries in self._iter_cache():
            if not self._can_serve(size, probe):
                unusable += size * len(entries)
        return unusable / self._cache_total

    def _iter_cache(self):
        return ()

    def close(self):
        """Release cached blocks. Live blocks keep the manager busy."""
        with self._lock:
            if self._live:
                raise ManagerBusy(f"{len(self._live)} live blocks at close")
            self.flush_cache()


class NativeManager(MemoryManager):
    """Every request is its own system block of exactly the requested size."""


class CachingManager(MemoryManager):
    """Bin-rounding cache: freed blocks are kept and reused on exact bin match."""

    policy = "caching"

    def __init__(self, capacity=None, simulate=False):
        super().__init__(capacity=capacity, simulate=simulate)
        self._cache = {}

    def _acquire(self, nbytes):
        b = bin_size(nbytes)
        entry = self._cache_pop(b)
        if entry is not _MISS:
            return b, entry
        return b, self._system_alloc(b)

    def _release(self, block):
        self._cache_push(block.granted_bytes, block.data)
        block.data = None

    def _can_serve(self, cached_size, probe):
        return cached_size == bin_size(probe)

    def _cache_pop(self, size):
        entries = self._cache.get(size)
        if not entries:
            return _MISS
        self._cache_total -= size
        return entries.popleft()

    def _cache_push(self, size, data):
        self._cache.setdefault(size, deque()).append(data)
        self._cache_total += size

    def _iter_cache(self):
        return [(size, entries) for size, entries in self._cache.items() if entries]

    def flush_cache(self):
        released = 0
        for size, entries in self._cache.items():
            released += len(entries)
            self._cache_total -= size * len(entries)
            entries.clear()
        self._cache = {size: e for size, e in self._cache.items() if e}
        self._free_count += released
        return released


class SplitRestrictedManager(CachingManager):
    """Caching with restricted splitting of cached blocks.

    A cached block no larger than threshold_bytes may be carved up: the grant
    is the request rounded up to 512-byte granularity and the remainder goes
    back to the cache, so warm steady-state grants track requested sizes
    instead of power-of-two bins. Blocks above the threshold are never split
    and serve only requests whose bin matches their size exactly, which makes
    threshold 0 behave identically to the plain caching policy.
    """

    policy = "split_restricted"

    def __init__(self, threshold=DEFAULT_SPLIT_THRESHOLD, capacity=None, simulate=False):
        super().__init__(capacity=capacity, simulate=simulate)
        if threshold is None:
            threshold = DEFAULT_SPLIT_THRESHOLD
        self.threshold = int(threshold)

    def _acquire(self, nbytes):
        tight = round_up(nbytes)
        best = None
        for size in self._cache:
            if self._cache[size] and tight <= size <= self.threshold:
                if best is None or size < best:
                    best = size
        if best is not None:
            data = self._cache_pop(best)
            remainder = best - tight
            if remainder >= CACHE_FLOOR:
                self._cache_push(remainder, None if data is None else data[tight:])
                grant_data = None if data is None else data[:tight]
                return tight, grant_data
            return best, data  # sliver absorbed into the grant
        b = bin_size(nbytes)
        entry = self._cache_pop(b)
        if entry is not _MISS:
            return b, entry
        return b, self._system_alloc(b)

    def _can_serve(self, cached_size, probe):
        if cached_size <= self.threshold and cached_size >= round_up(probe):
            return True
        return cached_size == bin_size(probe)


_MISS = object()


def make_manager(policy, threshold=None, capacity=None, simulate=False):
    if policy == "native":
        return NativeManager(capacity=capacity, simulate=simulate)
    if policy == "caching":
        return CachingManager(capacity=capacity, simulate=simulate)
    if policy in ("split_restricted", "split"):
        return SplitRestrictedManager(threshold=threshold, capacity=capacity, simulate=simulate)
    raise ValueError(f"unknown allocator policy {policy!r}")


def attach_manager(backend, manager):
    """Route a backend's payload allocations through manager.

    Raises ManagerBusy if the currently attached manager still has live
    blocks. Accepts a backend handle or a registered backend id.
    """
    from . import registry

    if isinstance(backend, str):
        backend = registry.get(backend)
    backend.attach_manager(manager)


def detach_manager(backend):
    """Restore the backend's default manager; ManagerBusy if blocks are live."""
    from . import registry

    if isinstance(backend, str):
        backend = registry.get(backend)
    return backend.detach_manager()


# --------------------------------------------------------------- recording


class RecordingManager:
    """Wraps a manager and records its alloc/free traffic as trace lines."""

    def __init__(self, inner):
        self.inner = inner
        self.lines = []

    @property
    def policy(self):
        return self.inner.policy

    def alloc(self, nbytes, op=None):
        block = self.inner.alloc(nbytes, op)
        tag = block.originating_op if block.originating_op else "-"
        self.lines.append(f"A {block.block_id} {block.requested_bytes} {tag}")
        return block

    def free(self, block):
        block_id = block.block_id if isinstance(block, MemoryBlock) else int(block)
        self.inner.free(block)
        self.lines.append(f"F {block_id}")

    def on_op_begin(self, op):
        self.inner.on_op_begin(op)

    def on_op_end(self, op):
        self.inner.on_op_end(op)

    def current_op(self):
        return self.inner.current_op()

    def stats(self):
        return self.inner.stats()

    def flush_cache(self):
        return self.inner.flush_cache()

    def close(self):
        return self.inner.close()

    @property
    def live_blocks(self):
        return self.inner.live_blocks

    @property
    def peak_internal_fragmentation(self):
        return self.inner.peak_internal_fragmentation

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(self.lines) + "\n")


def parse_trace(lines):
    """Parse trace text into [("A", id, bytes, op) | ("F", id)] events."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    events = []
    seen = set()
    live = set()
    for raw_line in lines:
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        index = len(events)
        parts = line.split()
        kind = parts[0]
        if kind == "A":
            if len(parts) != 4:
                raise TraceError(f"expected 'A <id> <bytes> <op>', got {line!r}", index)
            try:
                block_id, nbytes = int(parts[1]), int(parts[2])
            except ValueError:
                raise TraceError(f"non-integer field in {line!r}", index) from None
            if nbytes <= 0:
                raise TraceError(f"non-positive size {nbytes}", index)
            if block_id in seen:
                raise TraceError(f"duplicate block id {block_id}", index)
            seen.add(block_id)
            live.add(block_id)
            op = None if parts[3] == "-" else parts[3]
            events.append(("A", block_id, nbytes, op))
        elif kind == "F":
            if len(parts) != 2:
                raise TraceError(f"expected 'F <id>', got {line!r}", index)
            try:
                block_id = int(parts[1])
            except ValueError:
                raise TraceError(f"non-integer id in {line!r}", index) from None
            if block_id not in live:
                raise TraceError(f"free of id {block_id} with no live allocation", index)
            live.discard(block_id)
            events.append(("F", block_id))
        else:
            raise TraceError(f"unknown event kind {kind!r}", index)
    return events


@dataclass
class ReplayResult:
    """Outcome of replaying one trace under one policy.

    timeline rows are (event_index, live_bytes_requested, live_bytes_granted,
    internal_fragmentation, cache_bytes), one per event.
    """

    policy: str
    timeline: list
    stats: AllocatorStats
    peak_internal_fragmentation: int


def replay(trace, policy, threshold=None, capacity=None):
    """Replay a trace (text, lines, or parsed events) under one policy."""
    if trace and isinstance(trace, (list, tuple)) and isinstance(trace[0], tuple):
        events = trace
    else:
        events = parse_trace(trace)
    mgr = make_manager(policy, threshold=threshold, capacity=capacity, simulate=True)
    blocks = {}
    timeline = []
    for index, event in enumerate(events):
        if event[0] == "A":
            _, block_id, nbytes, op = event
            blocks[block_id] = mgr.alloc(nbytes, op=op)
        else:
            _, block_id = event
            try:
                mgr.free(blocks.pop(block_id))
            except (AllocError, KeyError):
                raise TraceError(f"free of unknown block {block_id}", index) from None
        snap = mgr.stats()
        timeline.append(
            (
                index,
                snap.live_bytes_requested,
                snap.live_bytes_granted,
                snap.internal_fragmentation,
                snap.cache_bytes,
            )
        )
    return ReplayResult(
        policy=mgr.policy,
        timeline=timeline,
        stats=mgr.stats(),
        peak_internal_fragmentation=mgr.peak_internal_fragmentation,
    )


def bundled_trace_path():
    """Path of the synthetic training trace shipped with the package."""
    from importlib import resources

    return resources.files(__package__) / "_traces" / "synthetic_conv.trace"


def load_bundled_trace():
    return bundled_trace_path().read_text(encoding="ascii").splitlines()


# ------------------------------------------------------- trace generation


def make_synthetic_trace(steps=6, warm_batches=2):
    """Build the bundled trace: a small conv-net training job's allocations.

    The job warms up with no-grad evaluation batches (short-lived buffers,
    working set of a few blocks), then runs training steps whose forward
    buffers all stay live until the backward pass consumes them, with
    gradient and update traffic recycling freed blocks. Sizes follow a
    batch-of-12 conv net; several are deliberately not powers of two.
    """
    param_sizes = [3200, 128, 204800, 256, 524288, 512, 5120, 40]
    forward = [
        ("from_host", 37632),
        ("conv2d", 884736),
        ("maximum", 884736),
        ("slice", 221184),
        ("slice", 221184),
        ("slice", 221184),
        ("slice", 221184),
        ("maximum", 221184),
        ("maximum", 221184),
        ("maximum", 221184),
        ("conv2d", 196608),
        ("maximum", 196608),
        ("slice", 49152),
        ("slice", 49152),
        ("slice", 49152),
        ("slice", 49152),
        ("maximum", 49152),
        ("maximum", 49152),
        ("maximum", 49152),
        ("reshape", 49152),
        ("matmul", 6144),
        ("add", 6144),
        ("maximum", 6144),
        ("matmul", 480),
        ("add", 480),
        ("max_reduce", 48),
        ("sub", 480),
        ("exp", 480),
        ("sum", 48),
        ("log", 48),
        ("sub", 480),
        ("mul", 480),
        ("sum", 8),
        ("neg", 8),
    ]

    lines = []
    next_id = [0]

    def alloc(nbytes, op):
        next_id[0] += 1
        lines.append(f"A {next_id[0]} {nbytes} {op}")
        return next_id[0]

    def free(block_id):
        lines.append(f"F {block_id}")

    params = [alloc(size, "init") for size in param_sizes]

    # warm-up evaluation batches: every buffer dies a couple of ops later
    for _ in range(warm_batches):
        window = deque()
        for op, size in forward:
            window.append(alloc(size, op))
            if len(window) > 2:
                free(window.popleft())
        while window:
            free(window.popleft())

    momentum = []
    for step in range(steps):
        held = [alloc(size, op) for op, size in forward]
        # backward: gradient for node i arrives, node i's buffer is released
        grads = deque()
        for op, size in reversed(forward):
            grads.append(alloc(size, "backward"))
            free(held.pop())
            if len(grads) > 2:
                free(grads.popleft())
        while grads:
            free(grads.popleft())
        # parameter gradients live until the update consumes them
        param_grads = [alloc(size, "backward") for size in param_sizes]
        new_params = []
        new_momentum = []
        for i, size in enumerate(param_sizes):
            new_momentum.append(alloc(size, "update"))
            if momentum:
                free(momentum[i])
            new_params.append(alloc(size, "update"))
            free(params[i])
            free(param_grads[i])
        params = new_params
        momentum = new_momentum
    for block_id in params + momentum:
        free(block_id)
    return lines
