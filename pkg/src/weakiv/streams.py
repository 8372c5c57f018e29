"""Deterministic, splittable random streams.

Every random quantity in this package is drawn from a :class:`Stream`, a thin
wrapper over a counter-based Philox generator keyed by a tuple of integers.
Two properties matter and are load-bearing for reproducibility:

* **Key-addressed.**  A stream is fully identified by its key tuple.  Streams
  for iteration ``i``, replicate ``j``, inner draw block ``l`` are derived by
  extending the tuple (``stream.child(i, j)``), never by drawing from a parent
  generator, so any sub-stream can be regenerated in isolation.
* **Fixed consumption.**  Each variate consumes exactly one 64-bit word of the
  keystream: value ``i`` of a vector sits at counter offset ``i``.  Results are
  therefore identical whether an array is drawn in one vectorized call or in
  slices, and independent of worker count and scheduling order.

Uniforms are mapped into the open interval (0, 1) so the inverse-CDF normal
transform can never produce an infinity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_U64 = (1 << 64) - 1
# (w >> 11) keeps the top 53 bits; +0.5 centers in the bin -> strictly in (0,1)
_INV53 = 2.0**-53


def _as_entropy(values: tuple[int, ...]) -> list[int]:
    out = []
    for v in values:
        iv = int(v)
        out.append(iv & _U64 if iv < 0 else iv)
    return out


@dataclass(frozen=True)
class Stream:
    """A reproducible random stream addressed by an integer key tuple."""

    key: tuple[int, ...]

    def child(self, *tags: int) -> "Stream":
        """Derive the sub-stream addressed by ``key + tags``."""
        return Stream(self.key + tuple(int(t) for t in tags))

    def _raw(self, n: int) -> np.ndarray:
        seq = np.random.SeedSequence(entropy=_as_entropy(self.key))
        gen = np.random.Philox(key=seq.generate_state(2, np.uint64))
        return gen.random_raw(n)

    def uniforms(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws in the open interval (0, 1), one word per value."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        words = self._raw(n)
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
        return u.reshape(shape)

    def normals(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws via the inverse CDF of the uniforms."""
        return ndtri(self.uniforms(shape))


def root_stream(seed: int) -> Stream:
    """Stream at the root of the derivation tree for a 64-bit master seed."""
    return Stream((int(seed),))
