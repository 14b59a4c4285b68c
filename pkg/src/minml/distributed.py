"""In-process distributed primitives over thread ranks.

A Rendezvous hands out dense ranks and a Communicator per participant.
Collectives are synchronous SPMD: every rank must call the same sequence.
Metadata (shape, dtype, op) is exchanged first, so mismatches surface as
CollectiveShapeError on every rank instead of corrupt math; slow or absent
peers surface as CollectiveTimeout (default 30s, configurable).

all_reduce runs the chunked ring algorithm: 2(world-1) steps per rank,
a reduce-scatter pass then an all-gather pass. Each chunk is combined in
a single deterministic order around the ring, so every rank ends with
bitwise-identical bytes.
"""

import queue
import threading

import numpy as np

from . import _tensor as T
from .errors import CollectiveShapeError, CollectiveTimeout, MissingGradient

DEFAULT_TIMEOUT = 30.0


class _Board:
    """One all-to-all exchange slot set, keyed by collective sequence number."""

    def __init__(self, world):
        self.world = world
        self.cond = threading.Condition()
        self.slots = [None] * world
        self.posted = 0
        self.read = 0

    def exchange(self, rank, value, timeout):
        with self.cond:
            self.slots[rank] = value
            self.posted += 1
            self.cond.notify_all()
            while self.posted < self.world:
                if not self.cond.wait(timeout):
                    raise CollectiveTimeout(
                        f"rank {rank}: peers missing after {timeout}s"
                    )
            self.read += 1
            return list(self.slots), self.read == self.world


class _SharedState:
    def __init__(self, world, timeout):
        self.world = world
        self.timeout = timeout
        self.queues = {
            (src, dst): queue.Queue()
            for src in range(world)
            for dst in range(world)
            if src != dst
        }
        self.barrier = threading.Barrier(world)
        self._boards = {}
        self._board_lock = threading.Lock()

    def exchange(self, seq, rank, value, timeout):
        with self._board_lock:
            board = self._boards.get(seq)
            if board is None:
                board = self._boards[seq] = _Board(self.world)
        values, last = board.exchange(rank, value, timeout)
        if last:
            with self._board_lock:
                self._boards.pop(seq, None)
        return values


class Communicator:
    def __init__(self, rank, shared):
        self.rank = rank
        self.world_size = shared.world
        self._shared = shared
        self._seq = 0

    # -- plumbing

    def _next_seq(self):
        seq = self._seq
        self._seq += 1
        return seq

    def _send(self, dst, tag, payload):
        self._shared.queues[(self.rank, dst)].put((tag, payload))

    def _recv(self, src, tag, timeout):
        try:
            got_tag, payload = self._shared.queues[(src, self.rank)].get(timeout=timeout)
        except queue.Empty:
            raise CollectiveTimeout(
                f"rank {self.rank}: nothing from rank {src} after {timeout}s"
            ) from None
        if got_tag != tag:
            raise RuntimeError(
                f"rank {self.rank}: expected message {tag} from {src}, got {got_tag};"
                " ranks are running different collective sequences"
            )
        return payload

    def _meta_check(self, seq, kind, meta, timeout):
        # distinct board key per round: a rank may reach the payload
        # exchange while a peer is still reading the metadata board
        posted = self._shared.exchange((seq, "meta"), self.rank, (kind,) + meta, timeout)
        mine = (kind,) + meta
        for peer_rank, peer in enumerate(posted):
            if peer != mine:
                raise CollectiveShapeError(
                    f"rank {self.rank} called {mine}, rank {peer_rank} called {peer}"
                )

    # -- collectives

    def barrier(self, timeout=None):
        timeout = self._shared.timeout if timeout is None else timeout
        try:
            self._shared.barrier.wait(timeout)
        except threading.BrokenBarrierError:
            raise CollectiveTimeout(
                f"rank {self.rank}: barrier broke after {timeout}s"
            ) from None

    def all_reduce(self, tensor, op="sum"):
        if op not in ("sum", "max"):
            raise ValueError(f"all_reduce op must be 'sum' or 'max', got {op!r}")
        timeout = self._shared.timeout
        seq = self._next_seq()
        host = tensor.to_host_buffer()
        self._meta_check(seq, "all_reduce", (tuple(host.shape), host.dtype.str, op), timeout)
        world, rank = self.world_size, self.rank
        if world == 1:
            return tensor
        combine = np.add if op == "sum" else np.maximum
        chunks = list(np.array_split(host.reshape(-1), world))
        right = (rank + 1) % world
        left = (rank - 1) % world
        # chunks are only ever rebound, never mutated, so sends can share memory
        for step in range(world - 1):
            send_idx = (rank - step) % world
            recv_idx = (rank - step - 1) % world
            self._send(right, (seq, "rs", step), chunks[send_idx])
            incoming = self._recv(left, (seq, "rs", step), timeout)
            chunks[recv_idx] = combine(chunks[recv_idx], incoming)
        for step in range(world - 1):
            send_idx = (rank + 1 - step) % world
            recv_idx = (rank - step) % world
            self._send(right, (seq, "ag", step), chunks[send_idx])
            chunks[recv_idx] = self._recv(left, (seq, "ag", step), timeout)
        flat = np.concatenate(chunks) if chunks else np.empty(0, dtype=host.dtype)
        return T.tensor(flat.reshape(host.shape), backend=tensor.backend_id)

    def all_gather(self, tensor):
        timeout = self._shared.timeout
        seq = self._next_seq()
        host = tensor.to_host_buffer()
        self._meta_check(seq, "all_gather", (tuple(host.shape), host.dtype.str), timeout)
        values = self._shared.exchange((seq, "data"), self.rank, host, timeout)
        return T.tensor(np.stack(values), backend=tensor.backend_id)

    def broadcast(self, tensor, root=0):
        if not 0 <= root < self.world_size:
            raise ValueError(f"root {root} outside world of {self.world_size}")
        timeout = self._shared.timeout
        seq = self._next_seq()
        self._meta_check(seq, "broadcast", (root,), timeout)
        host = tensor.to_host_buffer() if self.rank == root else None
        values = self._shared.exchange((seq, "data"), self.rank, host, timeout)
        backend = None if tensor is None else tensor.backend_id
        return T.tensor(values[root], backend=backend)


class Rendezvous:
    """Hands out dense unique ranks up to world_size; one shared group."""

    def __init__(self, world_size, timeout=DEFAULT_TIMEOUT):
        world_size = int(world_size)
        if world_size < 1:
            raise ValueError(f"world_size must be positive, got {world_size}")
        self.world_size = world_size
        self._shared = _SharedState(world_size, float(timeout))
        self._lock = threading.Lock()
        self._next_rank = 0

    def join(self):
        with self._lock:
            if self._next_rank >= self.world_size:
                raise RuntimeError(f"group of {self.world_size} is already full")
            rank = self._next_rank
            self._next_rank += 1
        return rank, Communicator(rank, self._shared)


_GROUPS = {}
_GROUPS_LOCK = threading.Lock()


def named_rendezvous(tag, world_size, timeout=DEFAULT_TIMEOUT):
    """Shared rendezvous registry so independent callers can meet by name."""
    with _GROUPS_LOCK:
        rv = _GROUPS.get(tag)
        if rv is None:
            rv = _GROUPS[tag] = Rendezvous(world_size, timeout)
        elif rv.world_size != world_size:
            raise ValueError(
                f"group {tag!r} already exists with world_size {rv.world_size}"
            )
        return rv


def data_parallel_sync(comm, params):
    """Average gradients across ranks in place: grad <- all_reduce(sum) / world."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradient(f"parameter {i} has no gradient to synchronize")
        reduced = comm.all_reduce(p.grad, "sum")
        p.grad = reduced / comm.world_size


def run_ranks(world_size, fn, timeout=DEFAULT_TIMEOUT):
    """Run fn(communicator) on world_size threads; returns results by rank."""
    rv = Rendezvous(world_size, timeout)
    results = [None] * world_size
    failures = []

    def main():
        rank, comm = rv.join()
        try:
            results[rank] = fn(comm)
        except BaseException as exc:  # surfaced to the caller below
            failures.append((rank, exc))

    threads = [threading.Thread(target=main, name=f"rank{i}") for i in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        failures.sort(key=lambda pair: pair[0])
        raise failures[0][1]
    return results
