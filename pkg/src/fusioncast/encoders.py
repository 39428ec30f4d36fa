"""Text encoding backends.

Two capabilities are needed: token-level encoding (for text/series alignment)
and whole-text summary embedding (for knowledge-base retrieval). The default
backend is a seeded hash fallback so the entire toolkit runs offline and
deterministically; an HTTP backend plugs in real embedding services behind the
same interface.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, TransportError


@dataclass
class TokenEmbeddings:
    matrix: np.ndarray  # [n_tokens, d_text]

    @property
    def token_count(self) -> int:
        return self.matrix.shape[0]


@dataclass
class SummaryEmbedding:
    vector: np.ndarray  # [d_emb]
    norm: float

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "SummaryEmbedding":
        v = np.asarray(vector, dtype=np.float32)
        return cls(vector=v, norm=float(np.linalg.norm(v)))


def hash_fallback(text: str, d: int) -> np.ndarray:
    """Unit-norm vector seeded by a stable content hash; pure in (text, d)."""
    if d < 1:
        raise ArgumentError("embedding dimension must be at least 1")
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    norm = np.linalg.norm(v)
    if norm == 0.0:  # unreachable for standard_normal, kept for safety
        v[0] = 1.0
        norm = 1.0
    return (v / norm).astype(np.float32)


class HashEncoderBackend:
    """Offline default: whitespace tokenization, one hash vector per token."""

    token_encode = True
    embed = True

    def __init__(self, d_text: int = 32, d_emb: int = 768):
        self.name = f"hash-{d_text}-{d_emb}"
        self.d_text = d_text
        self.d_emb = d_emb

    def encode_tokens(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            tokens = [""]
        return np.stack([hash_fallback(tok, self.d_text) for tok in tokens])

    def embed_text(self, text: str) -> np.ndarray:
        return hash_fallback(text, self.d_emb)


class HttpEncoderBackend:
    """Remote embedding/encoding service speaking {model, input} -> {vectors}.

    Endpoint and credentials come from EMBED_API_URL / EMBED_API_KEY unless
    given explicitly.
    """

    token_encode = True
    embed = True

    def __init__(self, model: str, d_text: int, d_emb: int, url=None, api_key=None, timeout=30):
        self.name = f"http-{model}"
        self.model = model
        self.d_text = d_text
        self.d_emb = d_emb
        self.url = url or os.environ.get("EMBED_API_URL")
        self.api_key = api_key or os.environ.get("EMBED_API_KEY")
        self.timeout = timeout
        if not self.url:
            raise ArgumentError("http encoder backend needs EMBED_API_URL or an explicit url")

    def _post(self, payload, attempts=3):
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for attempt in range(1, attempts + 1):
            try:
                resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
                if resp.status_code == 200:
                    return resp.json()
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
            except requests.RequestException as exc:
                last = str(exc)
        raise TransportError(f"embedding request failed: {last}", attempts=attempts)

    def encode_tokens(self, text: str) -> np.ndarray:
        data = self._post({"model": self.model, "input": text, "mode": "tokens"})
        return np.asarray(data["vectors"], dtype=np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        data = self._post({"model": self.model, "input": text, "mode": "summary"})
        return np.asarray(data["vectors"], dtype=np.float32).reshape(-1)


def encode_text(backend, text: str) -> TokenEmbeddings:
    """Token-level embeddings [n_tokens, d_text]; deterministic per backend."""
    if not getattr(backend, "token_encode", False):
        raise ArgumentError(f"backend {backend.name} does not support token encoding")
    if not text:
        raise ArgumentError("cannot encode empty text")
    matrix = backend.encode_tokens(text)
    if matrix.ndim != 2 or matrix.shape[1] != backend.d_text:
        raise ArgumentError(
            f"backend {backend.name} emitted shape {matrix.shape}, declared d_text={backend.d_text}"
        )
    return TokenEmbeddings(matrix=matrix)


def embed_summary(backend, text: str) -> SummaryEmbedding:
    """Single d_emb vector for a whole text, stored unit-normalized so cosine
    similarity reduces to a dot product."""
    if not getattr(backend, "embed", False):
        raise ArgumentError(f"backend {backend.name} does not support summary embedding")
    if not text:
        raise ArgumentError("cannot embed empty text")
    vector = np.asarray(backend.embed_text(text), dtype=np.float32)
    if vector.shape != (backend.d_emb,):
        raise ArgumentError(
            f"backend {backend.name} emitted shape {vector.shape}, declared d_emb={backend.d_emb}"
        )
    norm = float(np.linalg.norm(vector))
    if norm > 0:
        vector = vector / norm
    return SummaryEmbedding.from_vector(vector)


def make_backend(kind: str, d_text: int = 32, d_emb: int = 768, model: str = ""):
    if kind == "hash":
        return HashEncoderBackend(d_text=d_text, d_emb=d_emb)
    if kind == "http":
        return HttpEncoderBackend(model=model or "default", d_text=d_text, d_emb=d_emb)
    raise ArgumentError(f"unknown encoder backend '{kind}' (expected hash or http)")
