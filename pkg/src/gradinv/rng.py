"""Deterministic random streams.

Every random draw in the library goes through a Philox4x64 counter-based
bit generator keyed by ``(seed, purpose)``, with normal variates produced
by the Box-Muller transform on its uniform output.  This keeps results
bit-reproducible across runs and platforms and lets independent parts of
a computation (victim weights, probe vectors, noise, ...) use
non-overlapping streams derived from one user-facing seed.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox

# Purpose tags; each names one consumer of randomness so streams never collide.
PURPOSE_WEIGHTS = 1        # victim first-layer / designed z rows
PURPOSE_NOISE = 2          # additive gradient noise
PURPOSE_POWER_INIT = 3     # subspace iteration start block
PURPOSE_PROJECTIONS = 4    # random slice directions for tensor decomposition
PURPOSE_PROBE = 5          # contraction probe vectors
PURPOSE_DATA = 6           # synthetic batch generation
PURPOSE_ORACLE = 7         # Monte-Carlo oracle sampling

_CHUNK = 1 << 22  # doubles per generation chunk; bounds peak temporaries


def _bit_generator(seed: int, purpose: int) -> Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(purpose)], dtype=np.uint64)
    return Generator(Philox(key=key))


def uniforms(seed: int, purpose: int, n: int) -> np.ndarray:
    """n i.i.d. U[0,1) doubles from the (seed, purpose) stream."""
    return _bit_generator(seed, purpose).random(n)


def gaussians(seed: int, purpose: int, shape) -> np.ndarray:
    """Standard normal array of the given shape via Box-Muller.

    The stream is consumed in fixed-size chunks so the draw sequence for a
    given (seed, purpose) does not depend on the requested shape split:
    asking for 10 then 10 values yields a different sequence than asking
    for 20, but any single call is fully determined by (seed, purpose, n).
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    gen = _bit_generator(seed, purpose)
    out = np.empty(n)
    filled = 0
    while filled < n:
        k = min(_CHUNK, n - filled)
        half = (k + 1) // 2
        u1 = 1.0 - gen.random(half)  # in (0, 1]: log is finite
        u2 = gen.random(half)
        np.log(u1, out=u1)
        u1 *= -2.0
        np.sqrt(u1, out=u1)
        u2 *= 2.0 * np.pi
        c = np.cos(u2)
        c *= u1
        np.sin(u2, out=u2)
        u2 *= u1
        pair = np.concatenate([c, u2])[:k]
        out[filled:filled + k] = pair
        filled += k
    return out.reshape(shape)


def gaussian_stream(seed: int, purpose: int):
    """Stateful chunked gaussian source for row-blocked consumers.

    Yields via ``take(n)``; successive takes continue one Box-Muller
    stream, so the concatenation over takes equals one big draw only when
    take sizes align with the chunking.  Used where a matrix is consumed
    block-by-block and only self-consistency is required.
    """
    gen = _bit_generator(seed, purpose)

    def take(n: int) -> np.ndarray:
        half = (n + 1) // 2
        u1 = 1.0 - gen.random(half)
        u2 = gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:n]

    return take


def unit_vector(seed: int, purpose: int, dim: int, index: int = 0) -> np.ndarray:
    """Deterministic unit vector; ``index`` selects independent redraws."""
    z = gaussians(seed, purpose + 100003 * index, dim)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:  # pragma: no cover - probability zero
        z = np.zeros(dim)
        z[0] = 1.0
        return z
    return z / norm
