"""Text-description corpus: metadata, dense vectors, and the DRKAEMB1 format.

A corpus pairs a JSON Lines metadata file (``{"id": int, "text": str,
"entities": [str]}`` per line) with a binary matrix of raw encoder vectors.

DRKAEMB1 layout (bit-exact contract):
  bytes 0-7   ASCII magic ``DRKAEMB1``
  bytes 8-11  row count, unsigned 32-bit little-endian
  bytes 12-15 vector dimension m, unsigned 32-bit little-endian
  then        row-major IEEE-754 float32, little-endian
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import DataError
from .graph import KnowledgeGraph

log = logging.getLogger(__name__)

MAGIC = b"DRKAEMB1"
_HEADER = struct.Struct("<8sII")


@dataclass
class Description:
    doc_id: int
    text: str
    mentions: frozenset[int]


class MentionIndex:
    """Lookup tables from entities and entity pairs to mentioning documents."""

    def __init__(self, records: list[Description]):
        ent: dict[int, list[int]] = {}
        pair: dict[tuple[int, int], list[int]] = {}
        for rec in records:
            for e in rec.mentions:
                ent.setdefault(e, []).append(rec.doc_id)
            for a, b in combinations_with_replacement(sorted(rec.mentions), 2):
                pair.setdefault((a, b), []).append(rec.doc_id)
        self.entity_docs = {e: np.array(sorted(ids), dtype=np.int64) for e, ids in ent.items()}
        self.pair_docs = {p: np.array(sorted(ids), dtype=np.int64) for p, ids in pair.items()}
        self.mentioned_entities = np.array(sorted(ent), dtype=np.int64)

    def has_pair(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.pair_docs

    def docs_for_entity(self, e: int) -> np.ndarray:
        return self.entity_docs.get(e, np.empty(0, dtype=np.int64))

    def gold_docs(self, head: int, tail: int) -> np.ndarray:
        """Distant-supervision gold documents for a triple.

        Pair co-mentions win; otherwise documents mentioning either entity;
        otherwise an empty array (the caller skips the retrieval term).
        """
        key = (min(head, tail), max(head, tail))
        if key in self.pair_docs:
            return self.pair_docs[key]
        either = np.union1d(self.docs_for_entity(head), self.docs_for_entity(tail))
        return either.astype(np.int64)


@dataclass
class DescriptionCorpus:
    records: list[Description]
    vectors: np.ndarray  # (n_docs, m) float32, raw encoder space
    encoder_tag: str = ""
    dropped_mentions: int = 0
    _index: MentionIndex | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def text_dim(self) -> int:
        return int(self.vectors.shape[1])

    def mention_index(self) -> MentionIndex:
        if self._index is None:
            self._index = MentionIndex(self.records)
        return self._index


def write_vectors(path: str, matrix: np.ndarray) -> None:
    """Write a 2-D float matrix in DRKAEMB1 layout (cast to float32)."""
    mat = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if mat.ndim != 2:
        raise ValueError("vector matrix must be 2-D")
    rows, dim = mat.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, dim))
        fh.write(mat.astype("<f4", copy=False).tobytes(order="C"))


def read_vectors(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"{path}: truncated DRKAEMB1 header")
        magic, rows, dim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if dim == 0:
            raise DataError(f"{path}: dimension field is 0")
        payload = fh.read()
    expected = rows * dim * 4
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for {rows}x{dim}"
        )
    mat = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    return np.ascontiguousarray(mat.astype(np.float32, copy=False))


def load_corpus(meta_path: str, vectors_path: str, kg: KnowledgeGraph) -> DescriptionCorpus:
    """Load description metadata plus vectors, mapping entity strings to graph ids.

    Unknown entity strings are dropped with a counted warning. Ids must be the
    contiguous range 0..n-1 in file order so they index the vector matrix
    directly.
    """
    vectors = read_vectors(vectors_path)
    if not np.isfinite(vectors).all():
        raise DataError(f"{vectors_path}: non-finite vector entries")
    ent_ids = {name: i for i, name in enumerate(kg.entity_names)}

    records: list[Description] = []
    dropped = 0
    with open(meta_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{meta_path}: line {lineno}: invalid JSON ({exc})") from None
            try:
                doc_id = int(obj["id"])
                text = str(obj["text"])
                entities = list(obj["entities"])
            except (KeyError, TypeError) as exc:
                raise DataError(f"{meta_path}: line {lineno}: missing field ({exc})") from None
            mentions = set()
            for name in entities:
                if name in ent_ids:
                    mentions.add(ent_ids[name])
                else:
                    dropped += 1
            records.append(Description(doc_id, text, frozenset(mentions)))

    if len(records) != vectors.shape[0]:
        raise DataError(
            f"row-count mismatch {len(records)}≠{vectors.shape[0]} "
            f"between {meta_path} and {vectors_path}"
        )
    ids = [rec.doc_id for rec in records]
    if ids != list(range(len(records))):
        raise DataError(f"{meta_path}: description ids must be contiguous 0..{len(records) - 1}")
    if dropped:
        log.warning("%s: dropped %d mention(s) of unknown entities", meta_path, dropped)
    return DescriptionCorpus(
        records=records,
        vectors=vectors,
        encoder_tag=hashlib.sha256(open(vectors_path, "rb").read()).hexdigest()[:12],
        dropped_mentions=dropped,
    )


def write_corpus(
    corpus: DescriptionCorpus, kg: KnowledgeGraph, meta_path: str, vectors_path: str
) -> None:
    with open(meta_path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.doc_id,
                        "text": rec.text,
                        "entities": [kg.entity_names[e] for e in sorted(rec.mentions)],
                    }
                )
                + "\n"
            )
    write_vectors(vectors_path, corpus.vectors)


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    token_seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(token_seed)
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def synth_embed(texts: list[str], dim: int, seed: int) -> np.ndarray:
    """Deterministic bag-of-words stand-in for a pretrained sentence encoder.

    Tokens split on whitespace are hashed (with the seed) to pseudo-random
    unit vectors; a text embeds as the L2-normalized mean of its token
    vectors. Empty texts map to the zero vector.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    out = np.zeros((len(texts), dim), dtype=np.float64)
    cache: dict[str, np.ndarray] = {}
    for i, text in enumerate(texts):
        tokens = text.split()
        if not tokens:
            continue
        acc = np.zeros(dim)
        for tok in tokens:
            if tok not in cache:
                cache[tok] = _token_vector(tok, dim, seed)
            acc += cache[tok]
        acc /= len(tokens)
        norm = np.linalg.norm(acc)
        if norm > 0:
            acc /= norm
        out[i] = acc
    return out


def coverage_stats(corpus: DescriptionCorpus, kg: KnowledgeGraph) -> dict:
    """Mention coverage statistics in the shape of the dataset-table narrative."""
    index = corpus.mention_index()
    n_entities = kg.n_entities
    covered = len(index.entity_docs)
    per_entity = [len(v) for v in index.entity_docs.values()]
    per_pair = [len(v) for (a, b), v in index.pair_docs.items() if a != b]
    return {
        "descriptions": len(corpus),
        "entities_covered": covered,
        "entity_coverage": covered / n_entities if n_entities else 0.0,
        "avg_descriptions_per_entity": float(np.mean(per_entity)) if per_entity else 0.0,
        "avg_descriptions_per_pair": float(np.mean(per_pair)) if per_pair else 0.0,
    }
