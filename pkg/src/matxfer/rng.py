"""Counter-based random streams for reproducible optimization runs.

Every stochastic choice in the pipeline draws from a Philox4x64-10 generator
keyed by ``(seed, stream_id * 2^48 + block)``.  Streams keep independent
concerns independent:

* stream 0 - projection directions (block = iteration index)
* stream 1 - subsampling draws (block = iteration index)
* stream 2 - initialization (weights, latents, demo assets)

Derived quantities are fully specified so runs reproduce across platforms:
uniforms take the top 53 bits of a raw draw, normals use the Box-Muller
transform, bounded integers reduce a raw draw modulo the bound, and
subsampling uses a Fisher-Yates prefix over the raw draw sequence.
"""

from __future__ import annotations

import math

import numpy as np

STREAM_DIRECTIONS = 0
STREAM_SUBSAMPLE = 1
STREAM_INIT = 2

_U53 = 1.0 / (1 << 53)


class Stream:
    """A deterministic draw sequence for one (seed, stream, block) triple."""

    def __init__(self, seed: int, stream_id: int, block: int = 0):
        if not 0 <= block < (1 << 48):
            raise ValueError(f"block {block} out of range")
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (stream_id << 48) | block],
                       dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self.seed = seed
        self.stream_id = stream_id
        self.block = block

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        return self._bitgen.random_raw(n)

    def uniforms(self, n: int) -> np.ndarray:
        """Uniforms in [0, 1) from the top 53 bits of each raw word."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))  # 1-u in (0,1] avoids log(0)
        a = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(a)
        z[1::2] = r * np.sin(a)
        return z[:n]

    def below(self, bound: int) -> int:
        """One integer in [0, bound) by modulo reduction."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.raw(1)[0] % np.uint64(bound))

    def subsample(self, n_total: int, k: int) -> np.ndarray:
        """Fisher-Yates prefix: ``k`` indices in [0, n_total) without replacement."""
        idx = self.subsample_multi(n_total, k, 1)
        return idx[0]

    def subsample_multi(self, n_total: int, k: int, count: int) -> np.ndarray:
        """``count`` independent Fisher-Yates prefixes, shape (count, k).

        Step ``i`` consumes row ``i`` of a (k, count) raw-draw matrix, so the
        draw order is documented and independent of vectorization.
        """
        if k > n_total:
            raise ValueError(f"cannot draw {k} of {n_total} without replacement")
        draws = self.raw(k * count).reshape(k, count)
        idx = np.tile(np.arange(n_total), (count, 1))
        rows = np.arange(count)
        for i in range(k):
            j = i + (draws[i] % np.uint64(n_total - i)).astype(np.int64)
            tmp = idx[rows, j].copy()
            idx[rows, j] = idx[:, i]
            idx[:, i] = tmp
        return idx[:, :k]


def directions_stream(seed: int, iteration: int) -> Stream:
    return Stream(seed, STREAM_DIRECTIONS, iteration)


def subsample_stream(seed: int, iteration: int) -> Stream:
    return Stream(seed, STREAM_SUBSAMPLE, iteration)


def init_stream(seed: int, block: int = 0) -> Stream:
    return Stream(seed, STREAM_INIT, block)
