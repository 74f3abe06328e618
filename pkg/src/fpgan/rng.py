"""Deterministic random streams.

The bit source is PCG64 (XSL-RR output, 128-bit state plus 128-bit
increment) as shipped by numpy, whose raw 64-bit output is specified and
platform independent. Normal variates come from Box-Muller over that raw
stream so no library sampler (ziggurat) is involved.
"""
from __future__ import annotations

import zlib

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


class Rng:
    """Seeded 64-bit stream with named, independent child streams."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self._bits = np.random.PCG64(ss)

    def child(self, name: str | int) -> "Rng":
        """Fork a stream keyed by ``name``; siblings never share output."""
        key = name if isinstance(name, int) else zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, self._path + (int(key),))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64, copy=False)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each draw."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        # 1 - u lies in (0, 1], keeping log finite
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = _TWO_PI * u[m:]
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by :meth:`uniform`."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
