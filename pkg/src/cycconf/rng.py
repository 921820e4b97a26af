"""Counter-based random streams with a fully specified derivation.

Every stream is Philox4x64-10 (Salmon et al., SC'11) with a 128-bit key
``key = (stream_id << 64) | seed`` and the counter starting at zero; the raw
output is the sequence of 64-bit words, four per counter increment, exactly
as produced by ``numpy.random.Philox``. Derived values:

* ``uniform``:  ``(w >> 11) * 2**-53``, one word each, in ``[0, 1)``
* ``integers(lo, hi)``: ``lo + floor(uniform * (hi - lo))``
* ``normal``: Box-Muller on two consecutive uniforms ``u1, u2``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``

Seeds for named sub-streams (``derive_seed``) are the first 8 bytes,
little-endian, of ``sha256("<seed>/<part>/<part>...")``.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U53 = 2.0 ** -53


def derive_seed(seed: int, *parts) -> int:
    text = "/".join([str(int(seed))] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class Stream:
    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2 ** 64 and 0 <= stream_id < 2 ** 64):
            raise ValueError("seed and stream_id must fit in 64 bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._bits = np.random.Philox(key=(self.stream_id << 64) | self.seed)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, n: int | None = None, low=0.0, high=1.0):
        k = 1 if n is None else n
        u = (self.raw(k) >> np.uint64(11)).astype(np.float64) * _U53
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in ``[low, high)``."""
        u = self.uniform(1 if n is None else n)
        v = low + np.floor(u * (high - low)).astype(np.int64)
        return int(v[0]) if n is None else v

    def normal(self, n: int | None = None, sigma=1.0):
        k = 1 if n is None else n
        u = self.uniform(2 * k).reshape(k, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        z = sigma * z
        return float(z[0]) if n is None else z

    def choice(self, n: int) -> int:
        return self.integers(0, n)
