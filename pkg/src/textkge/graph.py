"""Knowledge graph loading, indexing, negative sampling and mention strata.

Graphs are read from tab-separated ``head<TAB>relation<TAB>tail`` files, one
per split. Integer ids are assigned by first appearance scanning train, then
valid, then test, which keeps index assignment reproducible for a given set
of input files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

CORRUPT_HEAD = "head"
CORRUPT_TAIL = "tail"
CORRUPT_RELATION = "relation"
CORRUPT_ALL = "head+relation+tail"

#: Corruption families, in the order used for uniform family selection.
FAMILIES = (CORRUPT_HEAD, CORRUPT_TAIL, CORRUPT_RELATION, CORRUPT_ALL)

_MAX_ATTEMPTS = 1000


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Immutable container for vocabularies, splits and the filter set."""

    entity_names: list[str]
    relation_names: list[str]
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    all_true: frozenset[Triple] = field(repr=False)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def split(self, name: str) -> list[Triple]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def summary(self) -> dict:
        return {
            "entities": self.n_entities,
            "relations": self.n_relations,
            "train_triples": len(self.train),
            "valid_triples": len(self.valid),
            "test_triples": len(self.test),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


@dataclass(frozen=True)
class NegativeSample:
    triple: Triple
    corruption: str  # one of FAMILIES


def _parse_split(path: str) -> list[tuple[str, str, str]]:
    with open(path, encoding="utf-8") as fh:
        content = fh.read()
    rows = []
    for lineno, line in enumerate(content.splitlines(), start=1):
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(
                f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}"
            )
        rows.append((fields[0], fields[1], fields[2]))
    return rows


def load_graph(train_path: str, valid_path: str, test_path: str) -> KnowledgeGraph:
    """Load the three splits and build entity/relation vocabularies.

    Duplicate triples within one split are dropped with a warning. A triple
    appearing in two different splits violates the disjointness invariant and
    raises :class:`DataError`.
    """
    raw = {
        "train": _parse_split(train_path),
        "valid": _parse_split(valid_path),
        "test": _parse_split(test_path),
    }
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}

    def ent(name: str) -> int:
        if name not in ent_ids:
            ent_ids[name] = len(ent_ids)
        return ent_ids[name]

    def rel(name: str) -> int:
        if name not in rel_ids:
            rel_ids[name] = len(rel_ids)
        return rel_ids[name]

    splits: dict[str, list[Triple]] = {}
    seen_elsewhere: dict[Triple, str] = {}
    for split_name in ("train", "valid", "test"):
        triples: list[Triple] = []
        seen: set[Triple] = set()
        dups = 0
        for h, r, t in raw[split_name]:
            triple = Triple(ent(h), rel(r), ent(t))
            if triple in seen:
                dups += 1
                continue
            if triple in seen_elsewhere:
                raise DataError(
                    f"triple {(h, r, t)} appears in both "
                    f"{seen_elsewhere[triple]!r} and {split_name!r} splits"
                )
            seen.add(triple)
            triples.append(triple)
        if dups:
            log.warning("%s split: dropped %d duplicate triple(s)", split_name, dups)
        splits[split_name] = triples
        for tr in triples:
            seen_elsewhere[tr] = split_name

    entity_names = [None] * len(ent_ids)
    for name, idx in ent_ids.items():
        entity_names[idx] = name
    relation_names = [None] * len(rel_ids)
    for name, idx in rel_ids.items():
        relation_names[idx] = name

    all_true = frozenset(splits["train"]) | frozenset(splits["valid"]) | frozenset(splits["test"])
    return KnowledgeGraph(
        entity_names=list(entity_names),
        relation_names=list(relation_names),
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        all_true=frozenset(all_true),
    )


def save_graph(kg: KnowledgeGraph, train_path: str, valid_path: str, test_path: str) -> None:
    """Write the splits back to TSV; reloading reproduces the same indices."""
    for path, triples in ((train_path, kg.train), (valid_path, kg.valid), (test_path, kg.test)):
        with open(path, "w", encoding="utf-8") as fh:
            for h, r, t in triples:
                fh.write(f"{kg.entity_names[h]}\t{kg.relation_names[r]}\t{kg.entity_names[t]}\n")


def _family_feasible(family: str, n_pool: int, n_relations: int) -> bool:
    if family == CORRUPT_HEAD or family == CORRUPT_TAIL:
        return n_pool >= 2
    if family == CORRUPT_RELATION:
        return n_relations >= 2
    return n_pool >= 2 and n_relations >= 2


def _draw(
    family: str,
    positive: Triple,
    pool: np.ndarray,
    n_relations: int,
    rng: np.random.Generator,
) -> Optional[Triple]:
    h, r, t = positive
    if family == CORRUPT_HEAD:
        e = int(pool[rng.integers(len(pool))])
        return Triple(e, r, t) if e != h else None
    if family == CORRUPT_TAIL:
        e = int(pool[rng.integers(len(pool))])
        return Triple(h, r, e) if e != t else None
    if family == CORRUPT_RELATION:
        rr = int(rng.integers(n_relations))
        return Triple(h, rr, t) if rr != r else None
    hh = int(pool[rng.integers(len(pool))])
    rr = int(rng.integers(n_relations))
    tt = int(pool[rng.integers(len(pool))])
    if hh != h and rr != r and tt != t:
        return Triple(hh, rr, tt)
    return None


def sample_negatives(
    kg: KnowledgeGraph,
    positive: Triple,
    n: int,
    rng: np.random.Generator,
    family: Optional[str] = None,
    entity_pool: Optional[Sequence[int]] = None,
) -> list[NegativeSample]:
    """Draw ``n`` filtered negatives for one positive triple.

    Each sample picks a corruption family uniformly (unless ``family`` forces
    one), then resamples until the corrupted triple differs from the positive
    in exactly the corrupted positions and is not a known true triple. A
    family that fails 1000 attempts falls back to the next family; if every
    family fails the graph is saturated.

    ``entity_pool`` optionally restricts replacement entities (used by the
    corpus-mentions corruption variant of triplet classification).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kg.n_entities < 2:
        raise DataError("negative sampling needs at least 2 entities")
    if family is not None and family not in FAMILIES:
        raise ValueError(f"unknown corruption family {family!r}")

    pool = (
        np.arange(kg.n_entities, dtype=np.int64)
        if entity_pool is None
        else np.asarray(sorted(entity_pool), dtype=np.int64)
    )
    if len(pool) == 0:
        raise DataError("entity pool for negative sampling is empty")

    out: list[NegativeSample] = []
    for _ in range(n):
        fam = family if family is not None else FAMILIES[int(rng.integers(4))]
        start = FAMILIES.index(fam)
        sample = None
        for offset in range(len(FAMILIES)):
            cand_family = FAMILIES[(start + offset) % len(FAMILIES)]
            if not _family_feasible(cand_family, len(pool), kg.n_relations):
                continue
            for _attempt in range(_MAX_ATTEMPTS):
                cand = _draw(cand_family, positive, pool, kg.n_relations, rng)
                if cand is not None and cand not in kg.all_true:
                    sample = NegativeSample(cand, cand_family)
                    break
            if sample is not None:
                break
        if sample is None:
            raise DataError("graph saturated: no corruption family can produce a negative")
        out.append(sample)
    return out


def stratify(kg: KnowledgeGraph, corpus, split: Iterable[Triple]) -> tuple[list[Triple], list[Triple]]:
    """Partition a split by entity-pair co-occurrence in description mentions.

    A triple lands in ``with_mentions`` iff some single description mentions
    both its head and its tail.
    """
    index = corpus.mention_index()
    with_mentions: list[Triple] = []
    without_mentions: list[Triple] = []
    for triple in split:
        if index.has_pair(triple.head, triple.tail):
            with_mentions.append(triple)
        else:
            without_mentions.append(triple)
    return with_mentions, without_mentions
