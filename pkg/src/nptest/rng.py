"""Counter-based random streams keyed by simulation coordinates.

Every stream is a Philox generator seeded from a ``SeedSequence`` whose entropy
is the tuple of coordinates (base seed, sample size, signal level, replicate,
stream tag, ...). Streams therefore do not depend on execution order or on the
number of worker threads.

Normal deviates are produced by the inverse CDF of 53-bit uniforms so that the
same key gives the same numbers on every platform.
"""

from __future__ import annotations

import struct
import zlib
from typing import Union

import numpy as np
from scipy.special import ndtri

Key = Union[int, float, str]

_MASK64 = (1 << 64) - 1


def _encode(part: Key) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        v = int(part)
        if v < 0:
            # keep negative integers distinct from their two's complement image
            return (1 << 64) | (v & _MASK64)
        return v
    if isinstance(part, (float, np.floating)):
        # exact bit pattern, tagged so that 2.0 and 2 do not collide
        return (2 << 64) | struct.unpack("<Q", struct.pack("<d", float(part) + 0.0))[0]
    if isinstance(part, str):
        return (3 << 64) | zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported key component {part!r}")


def stream(*key: Key) -> np.random.Generator:
    """Independent generator for the given coordinates."""
    ss = np.random.SeedSequence([_encode(k) for k in key])
    return np.random.Generator(np.random.Philox(ss))


def uniforms(gen: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1) from the raw 64-bit output."""
    shape = (size,) if np.ndim(size) == 0 else tuple(size)
    raw = gen.bit_generator.random_raw(int(np.prod(shape)))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return u.reshape(shape)


def normals(gen: np.random.Generator, size) -> np.ndarray:
    """Standard normal deviates by inversion."""
    return ndtri(uniforms(gen, size))

