"""Named, independent random streams.

Each stream is a Philox (counter-based) generator keyed by the run seed, a
purpose string and an integer index.  Drawing from the ``"eval"`` stream can
therefore never shift the noise seen by ``"train"``, and per-sample streams
make results independent of how work is chunked.
"""

import zlib

import numpy as np


def _purpose_key(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed, purpose, index=0):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, purpose, index)``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and stream index must be non-negative")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_key(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


class Streams:
    """Convenience wrapper binding a run seed."""

    def __init__(self, seed):
        self.seed = int(seed)

    def __call__(self, purpose, index=0):
        return stream(self.seed, purpose, index)
