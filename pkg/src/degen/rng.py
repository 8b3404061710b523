"""Counter-based random numbers (Philox4x32-10), vectorised over paths.

Every draw is a pure function of ``(seed, stream, path, step, block)``, so a
path's noise does not depend on how paths are batched or scheduled.  Normal
variates use the inverse CDF of a 53-bit uniform.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

PURPOSE_NORMAL = 0
PURPOSE_UNIFORM = 1


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    ``counter`` is a sequence of four arrays (or ints) of 32-bit words and
    ``key`` a pair of 32-bit ints.  Returns four uint64 arrays holding 32-bit
    outputs.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return c0, c1, c2, c3


def _uniform53(hi, lo):
    # 27 + 26 bits, centred in its cell so the result is in the open interval (0, 1)
    a = (hi >> np.uint64(5)).astype(np.float64)
    b = (lo >> np.uint64(6)).astype(np.float64)
    return (a * 67108864.0 + b + 0.5) / 9007199254740992.0


class CounterRNG:
    """Keyed, splittable source of per-path random variates.

    The 64-bit ``seed`` is the Philox key.  ``stream`` separates independent
    families (one per grid point).  Counter words are
    ``(step * blocks + block, path, stream, purpose)``.
    """

    def __init__(self, seed: int, stream: int = 0):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self.stream = int(stream)
        self._key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)

    def split(self, stream: int) -> "CounterRNG":
        return CounterRNG(self.seed, stream)

    def _blocks(self, paths, step: int, block: int, blocks_per_step: int, purpose: int):
        paths = np.asarray(paths, dtype=np.uint64)
        ctr0 = np.uint64((step * blocks_per_step + block) & 0xFFFFFFFF)
        return philox4x32(
            (np.full(paths.shape, ctr0), paths, np.uint64(self.stream), np.uint64(purpose)),
            self._key,
        )

    def uniforms(self, paths, step: int, count: int, purpose: int = PURPOSE_UNIFORM) -> np.ndarray:
        """Uniforms in (0, 1), shape ``(len(paths), count)``."""
        paths = np.asarray(paths)
        nblocks = (count + 1) // 2
        out = np.empty((paths.shape[0], 2 * nblocks))
        for j in range(nblocks):
            w0, w1, w2, w3 = self._blocks(paths, step, j, nblocks, purpose)
            out[:, 2 * j] = _uniform53(w0, w1)
            out[:, 2 * j + 1] = _uniform53(w2, w3)
        return out[:, :count]

    def normals(self, paths, step: int, count: int) -> np.ndarray:
        """Standard normals, shape ``(len(paths), count)``."""
        return ndtri(self.uniforms(paths, step, count, purpose=PURPOSE_NORMAL))


def derive_seed(seed: int, index: int) -> int:
    """Mix ``(seed, index)`` into a fresh 64-bit seed."""
    w = philox4x32((index & 0xFFFFFFFF, index >> 32, 0xFFFFFFFF, 0xFFFFFFFF),
                   (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF))
    return (int(w[0]) << 32) | int(w[1])
