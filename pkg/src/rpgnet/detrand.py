"""Portable deterministic randomness built on SplitMix64.

Every seeded transform that ends up in a ring-pack (index plans, sign
reflections, ring initialization) draws from this module, so the streams
are pinned by golden tests and must never change.

SplitMix64 is counter based: the k-th output (0-based) of a stream started
at ``state`` is ``mix(state + (k + 1) * GAMMA)``.  The scalar functions
follow the published algorithm step by step; :func:`stream` evaluates the
same outputs vectorized with wrapping ``uint64`` arithmetic.
"""

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_TWO_PI = 2.0 * math.pi


def _mix(z):
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def next_u64(state):
    """Advance a SplitMix64 state once.

    Returns ``(value, next_state)``; both are Python ints in ``[0, 2**64)``.
    """
    state = (state + GAMMA) & MASK64
    return _mix(state), state


def bounded(state, n):
    """Draw ``next_u64 mod n`` with exactly one stream advance."""
    if n < 1:
        raise ValueError(f"bounded() needs n >= 1, got {n}")
    value, state = next_u64(state)
    return value % n, state


def stream(seed, count):
    """First ``count`` outputs of the stream seeded with ``seed`` as uint64."""
    if count < 0:
        raise ValueError("count must be non-negative")
    with np.errstate(over="ignore"):
        k = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + k * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))


def shuffle(seq, seed):
    """Return a Fisher-Yates permutation of ``seq``.

    Walks from the last index down to 1 and swaps index ``i`` with
    ``j = bounded(s, i + 1)``.  The input is not modified.
    """
    arr = np.asarray(seq)
    n = len(arr)
    if n < 2:
        return arr.copy()
    draws = stream(seed, n - 1)
    moduli = np.arange(n, 1, -1, dtype=np.uint64)
    js = (draws % moduli).tolist()
    items = arr.tolist()
    for i, j in zip(range(n - 1, 0, -1), js):
        items[i], items[j] = items[j], items[i]
    return np.array(items, dtype=arr.dtype)


def signs(seed, length):
    """Vector of +-1; element k is -1 iff bit 63 of the k-th draw is set."""
    top = stream(seed, length) >> np.uint64(63)
    return 1.0 - 2.0 * top.astype(np.float64)


def uniform01(seed, count):
    """Uniforms in (0, 1] from the top 53 bits of each draw."""
    top = stream(seed, count) >> np.uint64(11)
    return (top.astype(np.float64) + 1.0) * 2.0**-53


def normal(seed, count):
    """Standard normal samples by Box-Muller over consecutive draw pairs.

    Pair ``p`` consumes draws ``2p`` (radius) and ``2p + 1`` (angle) and
    yields the cosine sample then the sine sample.
    """
    pairs = (count + 1) // 2
    u = uniform01(seed, 2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log(u[:, 0]))
    angle = _TWO_PI * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = radius * np.cos(angle)
    z[:, 1] = radius * np.sin(angle)
    return z.reshape(-1)[:count]


def derive_seed(master, offset):
    """Named sub-seed ``master + offset`` wrapped to 64 bits."""
    return (master + offset) & MASK64
