"""Retriever-free fusion: fixed, mention-sampled description sets.

Instead of retrieving, each triple gets a fixed document set: N uniformly
sampled descriptions mentioning its head plus N mentioning its tail
(default N=2, effective k=4). Attention and pooling then run over that set
unchanged. The per-triple sample is a pure function of (base seed, h, r, t)
via a SeedSequence, so it is identical across epochs, between training and
evaluation, and independent of iteration order.

Triples whose head or tail has no mentioning description are skipped (the
counter records how many); at evaluation time such candidates simply get
no text contribution.
"""

from __future__ import annotations

import logging

import numpy as np

from .corpus import DescriptionCorpus
from .retriever import FuseCache, Projection, fuse_selected, fuse_vjp, project_corpus

log = logging.getLogger(__name__)


class FixedSetFuser:
    def __init__(self, corpus: DescriptionCorpus, descs_per_entity: int, seed: int):
        if descs_per_entity < 1:
            raise ValueError("descs_per_entity must be >= 1")
        self.corpus = corpus
        self.descs_per_entity = descs_per_entity
        self.seed = seed
        self.index = corpus.mention_index()
        self.skipped = 0
        self._P: np.ndarray | None = None
        self._doc_cache: dict[tuple[int, int, int], np.ndarray | None] = {}

    @property
    def projected(self) -> np.ndarray | None:
        return self._P

    def prepare(self, proj: Projection) -> None:
        self._P = project_corpus(proj, self.corpus)

    def doc_ids_for(self, head: int, relation: int, tail: int) -> np.ndarray | None:
        """Fixed doc set for a triple, or None when an entity has no mentions."""
        key = (head, relation, tail)
        if key in self._doc_cache:
            return self._doc_cache[key]
        head_pool = self.index.docs_for_entity(head)
        tail_pool = self.index.docs_for_entity(tail)
        if head_pool.size == 0 or tail_pool.size == 0:
            self._doc_cache[key] = None
            return None
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, head, relation, tail]))
        n = self.descs_per_entity
        head_sel = rng.choice(head_pool, size=min(n, head_pool.size), replace=False)
        tail_sel = rng.choice(tail_pool, size=min(n, tail_pool.size), replace=False)
        ids = []
        for d in list(head_sel) + list(tail_sel):
            if d not in ids:
                ids.append(int(d))
        out = np.array(ids, dtype=np.int64)
        self._doc_cache[key] = out
        return out

    def fuse_triples(self, Q: np.ndarray, triples: np.ndarray, proj: Projection):
        """Per-row fixed-set fusion; masked rows have no usable documents."""
        n = len(Q)
        dim = Q.shape[2]
        fused = np.zeros((n, dim))
        caches: list[FuseCache | None] = [None] * n
        mask = np.zeros(n, dtype=bool)
        for i in range(n):
            h, r, t = (int(x) for x in triples[i])
            ids = self.doc_ids_for(h, r, t)
            if ids is None:
                self.skipped += 1
                continue
            fused[i], caches[i] = fuse_selected(
                Q[i], proj, self.corpus, ids, projected=self._P
            )
            mask[i] = True
        return fused, caches, mask

    def vjp(self, caches, G: np.ndarray, mask: np.ndarray):
        dim = G.shape[1]
        gQ = np.zeros((len(G), 3, dim))
        gW = np.zeros((dim, self.corpus.vectors.shape[1]))
        gb = np.zeros(dim)
        for i, cache in enumerate(caches):
            if cache is None or not mask[i]:
                continue
            gq, gw, gbias = fuse_vjp(cache, G[i : i + 1])
            gQ[i] = gq[0]
            gW += gw
            gb += gbias
        return gQ, gW, gb
