"""Counter-based normal variates (Philox4x32-10).

A variate is a pure function of ``(seed, path, step, lane)``. Every path owns
an independent stream, and results do not depend on batching or ordering.
"""

from __future__ import annotations

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


@numba.njit(cache=True, inline="always")
def _philox_block(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@numba.njit(cache=True)
def philox4x32(counters, key):
    """Philox4x32-10 of each row of ``counters`` (uint32, shape (n, 4)) under a 2-word key."""
    n = counters.shape[0]
    out = np.empty((n, 4), dtype=np.uint32)
    k0 = np.uint64(key[0])
    k1 = np.uint64(key[1])
    for i in range(n):
        r0, r1, r2, r3 = _philox_block(np.uint64(counters[i, 0]), np.uint64(counters[i, 1]),
                                       np.uint64(counters[i, 2]), np.uint64(counters[i, 3]), k0, k1)
        out[i, 0] = r0
        out[i, 1] = r1
        out[i, 2] = r2
        out[i, 3] = r3
    return out


@numba.njit(cache=True, inline="always")
def normal_at(pid, step, lane, k0, k1):
    """N(0, 1) variate for counter (path, step, lane) under key (k0, k1)."""
    p = np.uint64(pid)
    s = np.uint64(step)
    c3 = (np.uint64(lane) << np.uint64(16)) ^ (s >> _S32)
    r0, r1, r2, r3 = _philox_block(p & _MASK, p >> _S32, s & _MASK, c3, k0, k1)
    # 53-bit uniforms; the first is mapped to (0, 1] for the logarithm.
    u1 = 1.0 - ((r0 >> np.uint64(5)) * 67108864.0 + (r1 >> np.uint64(6))) / 9007199254740992.0
    u2 = ((r2 >> np.uint64(5)) * 67108864.0 + (r3 >> np.uint64(6))) / 9007199254740992.0
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@numba.njit(cache=True, nogil=True)
def _normals(paths, step, lane, k0, k1):
    n = paths.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = normal_at(paths[i], step, lane, k0, k1)
    return out


def split_seed(seed: int) -> tuple[np.uint64, np.uint64]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def standard_normals(seed: int, paths, step: int, lane: int = 0) -> np.ndarray:
    """One N(0, 1) variate per path for the given (step, lane) counter."""
    if not 0 <= lane < 1 << 16:
        raise ValueError("lane must fit in 16 bits")
    k0, k1 = split_seed(seed)
    return _normals(np.ascontiguousarray(paths, dtype=np.int64), int(step), int(lane), k0, k1)
