"""Small deterministic numeric kernels shared by the rest of the package.

Everything here works in float64. Argmax ties resolve to the lowest index,
which is what ``numpy.argmax`` already does.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import NonFiniteInput, NotADistribution


def _check_finite(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("logits contain NaN or inf")
    return z


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    z = _check_finite(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = _check_finite(logits)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def entropy(p, axis=-1):
    """Shannon entropy in nats, with 0*log(0) taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NotADistribution("probabilities must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-9):
        raise NotADistribution("probabilities must sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def argmax(z, axis=-1):
    return np.argmax(z, axis=axis)


def stream_key(*parts) -> int:
    """Stable 64-bit key for an arbitrary tuple of ints/strings."""
    h = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Seeded random stream identified by ``(seed, stream_id)``.

    Two streams built from the same pair produce bitwise-identical draws;
    distinct ``stream_id`` values give statistically independent streams
    (numpy ``SeedSequence`` entropy mixing over PCG64).
    """

    def __init__(self, seed: int = 0, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        ss = np.random.SeedSequence([self.seed, self.stream_id])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, *parts) -> "RngStream":
        """Child stream keyed by ``parts``; does not advance this stream."""
        return RngStream(self.seed, stream_key(self.stream_id, *parts))

    def uniform(self) -> float:
        return float(self.generator.random())

    def normal(self, size=None, scale=1.0):
        return self.generator.normal(0.0, scale, size=size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)


def uniform(rng: RngStream) -> float:
    """One Uniform[0, 1) draw from ``rng``."""
    return rng.uniform()
