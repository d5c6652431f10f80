"""Deterministic named random streams.

Every draw in the toolkit comes from an RngStream: a numpy Generator over the
counter-based Philox bit generator keyed by (seed, stream). Sub-streams are
derived by hashing (seed, label, indices), so parallel workers given the same
labels reproduce the same numbers regardless of scheduling.
"""

from __future__ import annotations

import hashlib
from typing import Optional, Tuple, Union

import numpy as np

_MASK64 = (1 << 64) - 1
_UNIFORM_BITS = 52


def derive_stream(seed: int, label: str, *indices: int) -> int:
    """Stable 64-bit stream id for (seed, label, indices)."""
    text = "|".join([str(int(seed) & _MASK64), label, *(str(int(i)) for i in indices)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def seed_commitment(seed: int) -> str:
    """Hex digest published in release receipts instead of the seed itself."""
    return hashlib.sha256(f"robustdp-seed|{int(seed) & _MASK64}".encode("utf-8")).hexdigest()


class RngStream:
    """One sequential stream of draws. Not safe to share between threads."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._generator: Optional[np.random.Generator] = None

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            key = (self.seed << 64) | self.stream
            self._generator = np.random.Generator(np.random.Philox(key=key))
        return self._generator

    def child(self, label: str, *indices: int) -> "RngStream":
        return RngStream(self.seed, derive_stream(self.seed, f"{self.stream}/{label}", *indices))

    def uniform_open(self, size: Union[None, int, Tuple[int, ...]] = None):
        """Uniforms in (0, 1) that are never exactly 0, 1/2 or 1."""
        k = self.generator.integers(0, 1 << _UNIFORM_BITS, size=size, dtype=np.int64)
        return (k + 0.5) / float(1 << _UNIFORM_BITS)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def gamma(self, shape: float, rate: float) -> float:
        return float(self.generator.gamma(shape, 1.0 / rate))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def root_stream(seed: int) -> RngStream:
    return RngStream(seed, derive_stream(seed, "root"))
