"""Named random streams derived from a single 64-bit seed.

Every consumer of randomness asks for a stream by name; streams with
different names are statistically independent and each one is reproducible
on its own, regardless of how many draws other streams have made.
"""

import zlib

import numpy as np

_STREAMS = ("support", "signs", "noise", "init", "split", "batching", "weights")


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    Return a Generator for the stream ``name`` of ``seed``.

    ``extra`` integers further split the stream (e.g. a target series index
    or a grid point number) so that per-unit draws do not depend on
    execution order.
    """
    if name not in _STREAMS:
        raise ValueError(f"Unknown random stream '{name}'. Available: {list(_STREAMS)}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _stream_key(name), *map(int, extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
