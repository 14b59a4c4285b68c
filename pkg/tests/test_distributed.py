"""In-process collectives against a single-threaded fold."""

import threading
import time

import numpy as np
import pytest

import oracles
import minml
from minml import distributed as dist
from minml.errors import CollectiveShapeError, CollectiveTimeout, MissingGradient
from minml.autograd import Variable


@pytest.mark.parametrize("world", [1, 2, 4, 7])
@pytest.mark.parametrize("op", ["sum", "max"])
def test_all_reduce_matches_sequential_fold(world, op):
    shards = [np.random.default_rng(100 + r).normal(size=(33,)) for r in range(world)]

    def fn(comm):
        t = minml.tensor(shards[comm.rank], dtype="f64")
        return comm.all_reduce(t, op=op).numpy()

    results = dist.run_ranks(world, fn)
    want = oracles.allreduce_seq(shards, op)
    for r in range(world):
        np.testing.assert_allclose(results[r], want, rtol=1e-12)
        np.testing.assert_array_equal(results[r], results[0])


def test_all_reduce_rejects_unknown_op():
    def fn(comm):
        with pytest.raises(ValueError):
            comm.all_reduce(minml.ones((2,)), op="mean")
        return True

    assert all(dist.run_ranks(2, fn))


def test_all_reduce_multidimensional():
    shards = [np.full((2, 3), float(r + 1)) for r in range(3)]

    def fn(comm):
        return comm.all_reduce(minml.tensor(shards[comm.rank], dtype="f64")).numpy()

    results = dist.run_ranks(3, fn)
    np.testing.assert_array_equal(results[0], np.full((2, 3), 6.0))


def test_all_gather_stacks_by_rank():
    def fn(comm):
        t = minml.tensor([float(comm.rank)], dtype="f64")
        return comm.all_gather(t).numpy().tolist()

    results = dist.run_ranks(4, fn)
    assert results[0] == [[0.0], [1.0], [2.0], [3.0]]
    assert results[3] == results[0]


def test_broadcast_from_nonzero_root():
    def fn(comm):
        if comm.rank == 2:
            t = minml.tensor([5.0, 6.0])
        else:
            t = minml.tensor([0.0, 0.0])
        return comm.broadcast(t, root=2).numpy().tolist()

    for got in dist.run_ranks(4, fn):
        assert got == [5.0, 6.0]


def test_broadcast_accepts_none_off_root():
    def fn(comm):
        t = minml.tensor([1.5]) if comm.rank == 0 else None
        return comm.broadcast(t).numpy().tolist()

    assert dist.run_ranks(3, fn) == [[1.5]] * 3


def test_barrier_synchronizes():
    order = []
    lock = threading.Lock()

    def fn(comm):
        if comm.rank == 0:
            time.sleep(0.05)
        with lock:
            order.append(("before", comm.rank))
        comm.barrier()
        with lock:
            order.append(("after", comm.rank))

    dist.run_ranks(3, fn)
    befores = [i for i, (tag, _) in enumerate(order) if tag == "before"]
    afters = [i for i, (tag, _) in enumerate(order) if tag == "after"]
    assert max(befores) < min(afters)


def test_shape_mismatch_raises_everywhere():
    def fn(comm):
        n = 4 if comm.rank == 1 else 3
        with pytest.raises(CollectiveShapeError):
            comm.all_reduce(minml.ones((n,)))
        return True

    assert all(dist.run_ranks(2, fn))


def test_straggler_times_out():
    def fn(comm):
        if comm.rank == 1:
            time.sleep(0.6)
            return None
        return comm.all_reduce(minml.ones((2,)))

    with pytest.raises(CollectiveTimeout):
        dist.run_ranks(2, fn, timeout=0.2)


def test_run_ranks_reports_lowest_failing_rank():
    def fn(comm):
        raise RuntimeError(f"boom {comm.rank}")

    with pytest.raises(RuntimeError, match="boom 0"):
        dist.run_ranks(3, fn)


def test_rendezvous_assigns_unique_ranks():
    def fn(comm):
        return comm.rank

    assert sorted(dist.run_ranks(5, fn)) == [0, 1, 2, 3, 4]


def test_data_parallel_sync_averages_grads():
    world = 4
    grads = [np.random.default_rng(200 + r).normal(size=(6,)) for r in range(world)]

    def fn(comm):
        p = Variable(minml.zeros((6,), dtype="f64"), requires_grad=True)
        p.grad = minml.tensor(grads[comm.rank], dtype="f64")
        dist.data_parallel_sync(comm, [p])
        return p.grad.numpy()

    results = dist.run_ranks(world, fn)
    want = oracles.allreduce_seq(grads, "mean")
    for r in range(world):
        np.testing.assert_allclose(results[r], want, rtol=1e-12)


def test_data_parallel_sync_requires_grads():
    def fn(comm):
        p = Variable(minml.zeros((2,)), requires_grad=True)
        with pytest.raises(MissingGradient):
            dist.data_parallel_sync(comm, [p])
        return True

    assert all(dist.run_ranks(2, fn))
