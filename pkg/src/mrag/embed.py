"""Text embeddings and the similarity measure shared by both agents.

Two backends produce fixed-dimension, L2-normalized vectors: a
deterministic feature-hashing embedder (the default; hermetic and fast)
and a generic HTTP endpoint. Texts that tokenize to nothing map to the
zero vector instead of raising, and cosine against a zero vector is 0.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import requests

from .text import tokenize

logger = logging.getLogger(__name__)

PAIR_SEPARATOR = "\n\n"


class DimensionMismatch(ValueError):
    pass


class HttpBackendError(RuntimeError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"embedding endpoint returned {status}: {detail}")


@dataclass(frozen=True)
class EmbedderConfig:
    backend: str = "hash"  # hash | http
    dimension: int = 256
    seed: int = 42
    endpoint: str = ""
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self):
        if self.backend not in ("hash", "http"):
            raise ValueError(f"unknown embedder backend {self.backend!r}")
        if self.dimension < 8:
            raise ValueError("embedding dimension must be >= 8")


def concat_pair(x: str, y: str) -> str:
    """Join a source/target pair with the fixed separator token."""
    return x + PAIR_SEPARATOR + y


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; 0 when either vector is all zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class HashingEmbedder:
    """Seeded signed feature hashing over unigrams and bigrams.

    Tokens are lowercased and split on whitespace/punctuation; each
    unigram and bigram is hashed with a keyed blake2b into one of
    ``dimension`` buckets, a second hash bit picks the +1/-1 sign, and
    the result is L2-normalized. Pure and thread-safe.
    """

    def __init__(self, config: EmbedderConfig):
        self.config = config
        self._key = int(config.seed).to_bytes(8, "little", signed=False)

    @property
    def dimension(self) -> int:
        return self.config.dimension

    def _feature_hash(self, feature: str) -> int:
        digest = hashlib.blake2b(feature.encode("utf-8"), key=self._key, digest_size=8)
        return int.from_bytes(digest.digest(), "little")

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        vec = np.zeros(self.config.dimension, dtype=np.float64)
        if not tokens:
            logger.debug("zero-token text; returning zero vector")
            return vec
        features = ["u:" + t for t in tokens]
        features += ["b:" + tokens[i] + " " + tokens[i + 1] for i in range(len(tokens) - 1)]
        d = self.config.dimension
        for feature in features:
            h = self._feature_hash(feature)
            bucket = h % d
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # Sign cancellation across all buckets; treat like zero tokens.
            return vec
        return vec / norm


class HttpEmbedder:
    """Remote embedding endpoint: POST {"input": text} -> {"embedding": [...]}.

    Each call is isolated; concurrent in-flight requests are fine. The
    returned vector is re-normalized defensively.
    """

    def __init__(self, config: EmbedderConfig, session: requests.Session | None = None):
        if not config.endpoint:
            raise ValueError("http embedder requires an endpoint")
        self.config = config
        self._session = session or requests.Session()

    @property
    def dimension(self) -> int:
        return self.config.dimension

    def embed(self, text: str) -> np.ndarray:
        if not tokenize(text):
            return np.zeros(self.config.dimension, dtype=np.float64)
        last_error: Exception | None = None
        for _ in range(self.config.retries + 1):
            try:
                resp = self._session.post(
                    self.config.endpoint,
                    json={"input": text},
                    timeout=self.config.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code != 200:
                last_error = HttpBackendError(resp.status_code, resp.text[:200])
                continue
            vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
            if vec.shape != (self.config.dimension,):
                raise DimensionMismatch(
                    f"endpoint returned {vec.shape}, expected ({self.config.dimension},)"
                )
            norm = float(np.linalg.norm(vec))
            return vec / norm if norm > 0 else vec
        if isinstance(last_error, HttpBackendError):
            raise last_error
        raise HttpBackendError(0, f"request failed: {last_error}")


Embedder = HashingEmbedder | HttpEmbedder


def make_embedder(config: EmbedderConfig) -> Embedder:
    if config.backend == "hash":
        return HashingEmbedder(config)
    return HttpEmbedder(config)


def embed_pair(embedder: Embedder, x: str, y: str) -> np.ndarray:
    return embedder.embed(concat_pair(x, y))
