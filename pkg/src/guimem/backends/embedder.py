"""Embedder contract plus the deterministic content-hash implementation.

The runtime only requires unit vectors of a declared dimension; it attaches
no meaning to directions. The hash embedder derives the vector from a
SHA-256 of the content, which buys exact determinism for offline runs and
tests. Swap in a real encoder by matching the two-method surface.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np

from ..core import Embedding


class Embedder(Protocol):
    dim: int

    def embed_text(self, text: str) -> Embedding: ...

    def embed_image(self, pixels: np.ndarray) -> Embedding: ...


class HashEmbedder:
    """Unit vectors seeded by content hash: identical content, identical
    vector; distinct content, unrelated vector. No semantic structure."""

    def __init__(self, dim: int = 64):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def _vector(self, salt: str, payload: bytes) -> Embedding:
        digest = hashlib.sha256(salt.encode("utf-8") + b"\x00" + payload).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        values = rng.standard_normal(self.dim)
        return Embedding.unit(values)

    def embed_text(self, text: str) -> Embedding:
        return self._vector("text", text.encode("utf-8"))

    def embed_image(self, pixels: np.ndarray) -> Embedding:
        arr = np.ascontiguousarray(pixels, dtype=np.uint8)
        shape = f"{arr.shape[0]}x{arr.shape[1]}".encode("ascii")
        return self._vector("image", shape + b"\x00" + arr.tobytes())
