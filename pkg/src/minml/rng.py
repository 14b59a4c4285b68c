"""Counter-based random numbers shared by every backend.

value(seed, i) is a pure function of the seed and a 64-bit counter, so any
slice of the stream can be generated independently and out of order. A
backend only has to remember how many counters it has handed out; a lazy
backend can capture (seed, offset) when an op is recorded and reproduce the
exact same values at materialization time.

The mixer is the splitmix64 finalizer over state seed + (i+1)*GOLDEN.
"""

import threading

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z):
    # splitmix64 finalizer, vectorized over uint64; unsigned wraparound intended
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def raw(seed, offset, count):
    """count raw 64-bit words at counters offset .. offset+count-1."""
    idx = np.arange(count, dtype=np.uint64) + np.uint64(offset & _MASK)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK) + (idx + np.uint64(1)) * np.uint64(_GOLDEN)
    return _mix(state)


def uniform(seed, offset, count):
    """count doubles in [0, 1), one counter each."""
    return (raw(seed, offset, count) >> np.uint64(11)) * (2.0**-53)


def normal(seed, offset, count):
    """count standard normals via Box-Muller; consumes 2*ceil(count/2) counters."""
    pairs = (count + 1) // 2
    u1 = uniform(seed, offset, pairs)
    u2 = uniform(seed, offset + pairs, pairs)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1] keeps the log finite
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


def normal_counters(count):
    """How many counters a normal fill of this size consumes."""
    return 2 * ((count + 1) // 2)


class RngState:
    """Per-backend counter bookkeeping. reserve() is serialized."""

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK
        self._next = 0
        self._lock = threading.Lock()

    def reseed(self, seed):
        with self._lock:
            self.seed = int(seed) & _MASK
            self._next = 0

    def reserve(self, count):
        """Claim count counters; returns the offset of the first."""
        with self._lock:
            offset = self._next
            self._next += int(count)
            return offset

    def state(self):
        with self._lock:
            return {"seed": self.seed, "next": self._next}

    def restore(self, state):
        with self._lock:
            self.seed = int(state["seed"]) & _MASK
            self._next = int(state["next"])
