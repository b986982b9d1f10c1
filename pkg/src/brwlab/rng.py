"""Counter-seeded random number streams.

Every Monte Carlo operation takes an explicit 64-bit seed and derives one
independent stream per replicate index, so runs are reproducible and
replicates can be distributed freely.  Streams are xoshiro256++ generators
whose state is filled from a splitmix64 scramble of (seed, index); this is
the seeding recipe recommended by the xoshiro authors.  All primitives are
numba-compatible so the same draws are made inside jitted kernels and from
Python.
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@nb.njit(nb.uint64(nb.uint64), cache=True, inline="always")
def _splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def stream_state(seed, index):
    """Fresh xoshiro256++ state for replicate `index` of run `seed`."""
    base = np.uint64(seed) + (np.uint64(index) + np.uint64(1)) * _GOLDEN
    s = np.empty(4, dtype=np.uint64)
    for i in range(4):
        base = base + _GOLDEN
        s[i] = _splitmix64(base)
    return s


@nb.njit(nb.uint64(nb.uint64[:]), cache=True, inline="always")
def next_u64(s):
    x = s[0] + s[3]
    result = ((x << np.uint64(23)) | (x >> np.uint64(41))) + s[0]
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = (s[3] << np.uint64(45)) | (s[3] >> np.uint64(19))
    return result


@nb.njit(nb.float64(nb.uint64[:]), cache=True, inline="always")
def next_double(s):
    # 53-bit mantissa, uniform on [0, 1)
    return (next_u64(s) >> np.uint64(11)) * 1.1102230246251565e-16


@nb.njit(nb.float64(nb.uint64[:], nb.float64), cache=True, inline="always")
def next_exponential(s, rate):
    # (0, 1] argument keeps log() finite
    u = (np.float64(next_u64(s) >> np.uint64(11)) + 1.0) * 1.1102230246251565e-16
    return -np.log(u) / rate


@nb.njit(nb.int64(nb.uint64[:], nb.float64[:]), cache=True, inline="always")
def next_index(s, cumulative):
    """Sample an index from a cumulative probability table (last entry ~1)."""
    u = next_double(s)
    n = cumulative.shape[0]
    if n <= 16:
        for i in range(n):
            if u < cumulative[i]:
                return i
        return n - 1
    lo, hi = 0, n - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if u < cumulative[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def derive_seed(seed, tag):
    """Stable child seed for a named pipeline stage."""
    h = np.uint64(0)
    for ch in tag.encode("utf-8"):
        h = _splitmix64(h ^ np.uint64(ch))
    return int(_splitmix64(np.uint64(seed) ^ h))


class RngStream:
    """Mutable stream handle usable from Python; kernels take `.state`."""

    __slots__ = ("state", "seed", "index")

    def __init__(self, seed, index=0):
        self.seed = int(seed)
        self.index = int(index)
        self.state = stream_state(np.uint64(seed), np.uint64(index))

    def u64(self):
        return int(next_u64(self.state))

    def uniform(self):
        return float(next_double(self.state))

    def exponential(self, rate=1.0):
        return float(next_exponential(self.state, rate))

    def spawn(self, index):
        return RngStream(self.seed, index)
