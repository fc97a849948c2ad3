"""Embedding provider contract, the deterministic test embedder, and cosine.

The engine stores one embedding per pattern, computed over
``description + "\n" + context``, and uses it both for retrieval and for
merge-candidate filtering.
"""

from __future__ import annotations

import hashlib
import math
import re
from typing import Protocol, Sequence, runtime_checkable

from .core import EngineConfig, PatternBankError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmptyTextError(PatternBankError):
    pass


class DimensionMismatchError(PatternBankError):
    pass


class ZeroVectorError(PatternBankError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics; shared by embedder, BM25, matcher."""
    return _TOKEN_RE.findall(text.lower())


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Behavioral contract: fixed dimension, unit norm, deterministic."""

    dimension: int

    def embed(self, text: str) -> tuple[float, ...]: ...


class HashFeatureEmbedder:
    """Signed token-hashing embedder: deterministic, order-insensitive, cheap.

    Each token is hashed (keyed by ``salt``) into one of ``dimension`` buckets
    with sign taken from the hash parity; the bucket sums are L2-normalized.
    Texts sharing tokens get proportionally aligned vectors, disjoint texts
    land near orthogonal. If every token cancels (opposite-sign bucket
    collision), the whole text is hashed as a single fallback feature so the
    output is always unit-norm.
    """

    def __init__(self, dimension: int = 64, salt: int = 0):
        if dimension < 1:
            raise PatternBankError("embedder dimension must be >= 1")
        self.dimension = dimension
        self.salt = salt

    def _bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b(f"{self.salt}:{token}".encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "big")
        return (h >> 1) % self.dimension, 1.0 if h & 1 else -1.0

    def embed(self, text: str) -> tuple[float, ...]:
        tokens = tokenize(text)
        if not tokens:
            raise EmptyTextError("cannot embed text with no tokens")
        vec = [0.0] * self.dimension
        for token in tokens:
            idx, sign = self._bucket(token)
            vec[idx] += sign
        norm = math.sqrt(sum(x * x for x in vec))
        if norm == 0.0:
            idx, sign = self._bucket(f"<all:{text.lower()}>")
            vec[idx] = sign
            norm = 1.0
        return tuple(x / norm for x in vec)


def default_embedder(config: EngineConfig) -> HashFeatureEmbedder:
    """The embedder a repository uses unless a provider is attached."""
    return HashFeatureEmbedder(dimension=config.embedding_dim, salt=config.seed)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity in [-1, 1]; exact 1.0/-1.0 at the identity/antipode."""
    if len(a) != len(b):
        raise DimensionMismatchError(f"vector dimensions differ: {len(a)} != {len(b)}")
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine undefined for zero vectors")
    value = dot / math.sqrt(na * nb)
    return max(-1.0, min(1.0, value))
