"""Batch-encode a description metadata file into a DRKAEMB1 vector file.

The metadata file is JSON Lines with objects
``{"id": int, "text": str, "entities": [str]}``; ids must be the contiguous
range 0..n-1 in file order (the same rule the consuming engine enforces).
One vector is written per line, in id order.

DRKAEMB1 layout: 8-byte ASCII magic ``DRKAEMB1``, u32 LE row count, u32 LE
dimension, then row-major little-endian float32. The consuming engine's own
writer produces byte-identical files for the same matrix.

Model names are passed to sentence-transformers, except the offline scheme
``hash:<dim>`` which deterministically embeds each text as the mean of
hashed per-token unit vectors (useful for tests and plumbing checks).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"DRKAEMB1"
_HEADER = struct.Struct("<8sII")


class BridgeError(Exception):
    pass


@dataclass
class EncodeJob:
    meta_path: str
    out_path: str
    model_name: str
    batch_size: int = 32
    normalize: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise BridgeError("batch size must be >= 1")


def read_meta_texts(meta_path: str) -> list[str]:
    """Texts in id order; enforces the contiguous-id rule."""
    entries: list[tuple[int, str]] = []
    with open(meta_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append((int(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise BridgeError(f"{meta_path}: line {lineno}: bad metadata ({exc})")
    ids = [i for i, _ in entries]
    if ids != list(range(len(entries))):
        raise BridgeError(f"{meta_path}: description ids must be contiguous 0..{len(entries) - 1}")
    return [text for _, text in entries]


def write_vectors(out_path: str, matrix: np.ndarray) -> None:
    """Atomic DRKAEMB1 write (temp file + rename)."""
    mat = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    rows, dim = mat.shape
    payload = _HEADER.pack(MAGIC, rows, dim) + mat.astype("<f4", copy=False).tobytes(order="C")
    directory = os.path.dirname(os.path.abspath(out_path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".emb-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class HashEncoder:
    """Deterministic offline stand-in encoder (scheme ``hash:<dim>``)."""

    def __init__(self, dim: int):
        if dim < 1:
            raise BridgeError(f"hash encoder dimension must be >= 1, got {dim}")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            vec = rng.standard_normal(self.dim)
            self._cache[token] = vec / np.linalg.norm(vec)
        return self._cache[token]

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = text.split()
            if tokens:
                out[i] = np.mean([self._token_vector(t) for t in tokens], axis=0)
        return out


class SentenceTransformerEncoder:
    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise BridgeError(
                f"cannot load encoder {model_name!r}: sentence-transformers is not installed ({exc})"
            )
        try:
            self.model = SentenceTransformer(model_name)
        except Exception as exc:
            raise BridgeError(f"cannot load encoder {model_name!r}: {exc}")

    def encode(self, texts: list[str]) -> np.ndarray:
        return np.asarray(
            self.model.encode(texts, convert_to_numpy=True, show_progress_bar=False)
        )


def resolve_encoder(model_name: str):
    if model_name.startswith("hash:"):
        try:
            dim = int(model_name.split(":", 1)[1])
        except ValueError:
            raise BridgeError(f"bad hash encoder spec {model_name!r}, expected hash:<dim>")
        return HashEncoder(dim)
    return SentenceTransformerEncoder(model_name)


def encode_corpus(job: EncodeJob) -> tuple[int, int]:
    """Encode the metadata file and write the vector file; returns (rows, dim)."""
    job.validate()
    texts = read_meta_texts(job.meta_path)
    encoder = resolve_encoder(job.model_name)

    chunks = []
    for lo in range(0, len(texts), job.batch_size):
        chunks.append(encoder.encode(texts[lo : lo + job.batch_size]))
    if chunks:
        matrix = np.vstack(chunks).astype(np.float64)
    else:
        raise BridgeError(f"{job.meta_path}: no descriptions to encode")

    if job.normalize:
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = np.divide(matrix, norms, out=matrix, where=norms > 0)
    write_vectors(job.out_path, matrix)
    return matrix.shape[0], matrix.shape[1]
