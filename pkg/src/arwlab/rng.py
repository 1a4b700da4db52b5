"""Counter-based pseudorandomness for instruction fields and walk kernels.

Every random decision in the core machinery is a pure function of a 64-bit
seed and integer counters, obtained by chaining the SplitMix64 finalizer.
This keeps instruction stacks fully deterministic and order-independent:
the value at (seed, site, slot) never depends on when it is first examined,
which is what makes cross-strategy and cross-volume couplings exact.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S32 = np.uint64(32)
_MASK32 = np.uint64(0xFFFFFFFF)
_INV32 = 1.0 / 4294967296.0

SEED_MASK = 0xFFFFFFFFFFFFFFFF


def u64(value):
    """Coerce a Python int (any sign/size) to np.uint64 by wrapping mod 2^64.

    Values coming back out of the jitted helpers are plain Python ints and
    may exceed int64 range; route them through here before passing them in
    again.
    """
    return np.uint64(int(value) & SEED_MASK)


@njit(cache=True)
def mix64(z):
    """SplitMix64 finalizer: a bijective scramble of a 64-bit word."""
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True)
def chain(state, word):
    """Absorb one 64-bit word into a running hash state."""
    return mix64(state + GOLDEN + word)


@njit(cache=True)
def site_key(coords):
    """Hash a lattice coordinate vector (int64 array) to a 64-bit key."""
    k = mix64(GOLDEN + np.uint64(coords.shape[0]))
    for i in range(coords.shape[0]):
        k = chain(k, np.uint64(coords[i]))
    return k


@njit(cache=True)
def derive_seed(master, index):
    """Child seed for stream `index` of a master seed; pure and collision-resistant."""
    return chain(chain(np.uint64(0), master), np.uint64(index))


@njit(cache=True)
def stream_next(state):
    """Advance a SplitMix64 stream; returns (new state, output word)."""
    state = state + GOLDEN
    return state, mix64(state)


@njit(cache=True)
def stream_u01(state):
    """Advance a stream and emit a float64 uniform on [0, 1)."""
    state = state + GOLDEN
    z = mix64(state)
    return state, np.float64(z >> _S32) * _INV32


@njit(cache=True)
def instruction_code(seed, skey, j, sleep_prob, cum_weights, jumps_only):
    """Decode the instruction at stack slot j of the site with key skey.

    Returns -1 for a sleep instruction, otherwise the index of the jump
    offset in the model's canonical neighbor order.  The sleep test and the
    direction draw use disjoint halves of one hashed word, so the direction
    law conditioned on jumping is exactly the jump distribution.
    """
    z = chain(chain(seed, skey), np.uint64(j))
    if not jumps_only:
        u_sleep = np.float64(z >> _S32) * _INV32
        if u_sleep < sleep_prob:
            return -1
    u_dir = np.float64(z & _MASK32) * _INV32
    k = 0
    last = cum_weights.shape[0] - 1
    while k < last and u_dir >= cum_weights[k]:
        k += 1
    return k
