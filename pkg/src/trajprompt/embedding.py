"""Prompt embedding backends and the on-disk vector store."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    pass


class TransportError(EmbeddingError):
    def __init__(self, message: str, request_id: str | None = None):
        super().__init__(f"{message} (request id: {request_id or 'n/a'})")
        self.request_id = request_id


class ConsistencyError(EmbeddingError):
    """Vectors disagree with the store's dimension or are unusable (zero/non-finite)."""


class StoreFormatError(ValueError):
    pass


class StoreCorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source_prompt_id: str = ""
    role: str = "key"

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size == 0:
            raise ConsistencyError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise ConsistencyError(f"non-finite value in embedding {self.source_prompt_id!r}")
        if not np.any(v):
            raise ConsistencyError(f"all-zero embedding {self.source_prompt_id!r}")
        if self.role not in ("key", "query"):
            raise ValueError(f"role must be 'key' or 'query', got {self.role!r}")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class EmbeddingBackend(Protocol):
    name: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dim)`` array, rows in input order."""
        ...


def check_vectors(matrix: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Validate a batch of embeddings; raises ConsistencyError on any bad row."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ConsistencyError(f"expected a 2-d array of embeddings, got shape {matrix.shape}")
    if dim is not None and matrix.shape[0] and matrix.shape[1] != dim:
        raise ConsistencyError(f"embedding dim {matrix.shape[1]} does not match store dim {dim}")
    if not np.all(np.isfinite(matrix)):
        raise ConsistencyError("non-finite values in embeddings")
    zero = ~np.any(matrix, axis=1)
    if zero.any():
        raise ConsistencyError(f"all-zero embedding at row(s) {np.flatnonzero(zero).tolist()[:10]}")
    return matrix


class HashingEmbedder:
    """Seeded feature hashing of character trigrams, L2-normalised.

    Deterministic across runs and platforms (hashes come from blake2b, not
    Python's salted ``hash``). Not semantically meaningful beyond surface overlap.
    """

    def __init__(self, dim: int = 256, seed: int = 0, n: int = 3):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.n = n
        self.name = f"hashing-{n}gram-d{dim}-s{seed}"
        self._key = seed.to_bytes(8, "little", signed=True)
        self._cache: dict[str, tuple[int, float]] = {}

    def _slot(self, gram: str) -> tuple[int, float]:
        hit = self._cache.get(gram)
        if hit is None:
            h = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest(), "little")
            hit = (h % self.dim, 1.0 if (h >> 63) & 1 else -1.0)
            self._cache[gram] = hit
        return hit

    def embed_one(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed an empty string")
        n = self.n
        grams = [text[i : i + n] for i in range(len(text) - n + 1)] or [text]
        v = np.zeros(self.dim, dtype=np.float64)
        for g in grams:
            idx, sign = self._slot(g)
            v[idx] += sign
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ConsistencyError(f"hashed features cancelled to zero for text of length {len(text)}")
        return v / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed_one(t) for t in texts])


@dataclass
class EndpointConfig:
    url: str
    model: str = ""
    api_key: str | None = None
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 0.5  # seconds, doubled per retry
    batch_size: int = 64
    concurrency: int = 1

    @classmethod
    def from_env(cls, prefix: str = "TRAJPROMPT", **overrides) -> EndpointConfig:
        """Fill url/model/api_key from ``{prefix}_URL`` etc. unless overridden."""
        values = {
            "url": os.environ.get(f"{prefix}_URL", ""),
            "model": os.environ.get(f"{prefix}_MODEL", ""),
            "api_key": os.environ.get(f"{prefix}_API_KEY"),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


def post_with_retry(client: httpx.Client, cfg: EndpointConfig, payload: dict) -> dict:
    """POST JSON with exponential backoff on transient failures.

    Retries transport errors and ``RETRYABLE_STATUS`` responses up to ``cfg.max_attempts``
    attempts in total. Raises TransportError when the last attempt fails.
    """
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    delay = cfg.backoff
    last: str = ""
    request_id = None
    for attempt in range(1, cfg.max_attempts + 1):
        try:
            resp = client.post(cfg.url, json=payload, headers=headers, timeout=cfg.timeout)
        except httpx.TransportError as exc:
            last = f"{type(exc).__name__}: {exc}"
        else:
            request_id = resp.headers.get("x-request-id", request_id)
            if resp.is_success:
                if attempt > 1:
                    log.info("request to %s succeeded after %d retries", cfg.url, attempt - 1)
                return resp.json()
            last = f"HTTP {resp.status_code}"
            if resp.status_code not in RETRYABLE_STATUS:
                break
        if attempt < cfg.max_attempts:
            log.warning("attempt %d/%d to %s failed (%s); retrying in %.2fs", attempt, cfg.max_attempts, cfg.url, last, delay)
            time.sleep(delay)
            delay *= 2
    raise TransportError(f"request to {cfg.url} failed: {last}", request_id)


class RemoteEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint.

    Whatever single vector the endpoint returns per input is used as-is.
    """

    def __init__(self, cfg: EndpointConfig, dim: int | None = None, client: httpx.Client | None = None):
        self.cfg = cfg
        self.dim = dim
        self.name = f"remote:{cfg.model or cfg.url}"
        self._client = client or httpx.Client()

    def _embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        body = post_with_retry(self._client, self.cfg, {"input": list(texts), "model": self.cfg.model})
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise EmbeddingError(f"endpoint returned {len(data) if isinstance(data, list) else 'no'} rows for {len(texts)} inputs")
        if all("index" in row for row in data):
            data = sorted(data, key=lambda row: row["index"])
        return np.asarray([row["embedding"] for row in data], dtype=np.float64)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if any(not t for t in texts):
            raise ValueError("cannot embed an empty string")
        bs = max(1, self.cfg.batch_size)
        batches = [texts[i : i + bs] for i in range(0, len(texts), bs)]
        if self.cfg.concurrency > 1 and len(batches) > 1:
            with ThreadPoolExecutor(self.cfg.concurrency) as pool:
                parts = list(pool.map(self._embed_batch, batches))
        else:
            parts = [self._embed_batch(b) for b in batches]
        if not parts:
            return np.zeros((0, self.dim or 0))
        out = np.vstack(parts)
        if self.dim is None:
            self.dim = out.shape[1]
        return check_vectors(out, self.dim)


# --------------------------------------------------------------------------
# vector store
# --------------------------------------------------------------------------

# Layout (little-endian):
#   magic  b"TPVS" | version u16 | dim u32 | count u64
#   count*dim float32, row-major
#   id index: count * (u32 byte length, utf-8 id)
STORE_MAGIC = b"TPVS"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")


@dataclass
class VectorStore:
    ids: list[str]
    vectors: np.ndarray  # (count, dim) float32

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ConsistencyError(f"{len(self.ids)} ids for vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ConsistencyError("duplicate ids in vector store")
        self._index = {k: i for i, k in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> np.ndarray:
        return self.vectors[self._index[key]]

    def row(self, key: str) -> int:
        return self._index[key]

    @classmethod
    def build(cls, ids: Sequence[str], vectors: np.ndarray, dim: int | None = None) -> VectorStore:
        vectors = np.asarray(vectors)
        if vectors.size == 0:
            vectors = np.zeros((0, dim or 0))
        return cls(list(ids), check_vectors(vectors, dim))


def store_vectors(store: VectorStore, path: str | os.PathLike) -> None:
    ids = [k.encode("utf-8") for k in store.ids]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(ids)))
        fh.write(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())
        for b in ids:
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)


def load_vectors(path: str | os.PathLike) -> VectorStore:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        if blob[:4] != STORE_MAGIC[: len(blob[:4])]:
            raise StoreFormatError("not a vector store file (bad magic)")
        raise StoreCorruptionError("vector store truncated inside header")
    magic, version, dim, count = _HEADER.unpack_from(blob)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"not a vector store file (magic {magic!r})")
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported vector store version {version}")
    pos = _HEADER.size
    nbytes = count * dim * 4
    if len(blob) < pos + nbytes:
        raise StoreCorruptionError("vector store truncated inside vector block")
    vectors = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim).astype(np.float32)
    pos += nbytes
    ids = []
    for _ in range(count):
        if len(blob) < pos + 4:
            raise StoreCorruptionError("vector store truncated inside id index")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if len(blob) < pos + n:
            raise StoreCorruptionError("vector store truncated inside id index")
        ids.append(blob[pos : pos + n].decode("utf-8"))
        pos += n
    if pos != len(blob):
        raise StoreCorruptionError(f"{len(blob) - pos} trailing bytes after id index")
    return VectorStore(ids, vectors)
