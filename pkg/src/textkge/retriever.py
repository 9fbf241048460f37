"""Dense description retrieval and attention-weighted fusion.

A triple's 3 x l query is matched against projected description vectors;
the per-document ranking key is the L2 norm of the 3-vector of inner
products. The top k documents (exact, ties broken by smaller index) are
softmax-weighted and pooled into a single fused l-vector.

Gradient flow: attention is differentiated exactly; the hard top-k
selection is held fixed, so only selected documents receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import DescriptionCorpus
from .graph import Triple

__all__ = [
    "Projection",
    "RetrievalResult",
    "project",
    "similarity",
    "doc_scores",
    "attention",
    "top_k",
    "fuse",
    "project_corpus",
    "RetrievalFuser",
]


@dataclass
class Projection:
    """Trainable map from raw encoder space (m) into KG space (l)."""

    weight: np.ndarray  # (l, m)
    bias: np.ndarray  # (l,)

    @property
    def kg_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def text_dim(self) -> int:
        return self.weight.shape[1]


def init_projection(kg_dim: int, text_dim: int, rng: np.random.Generator) -> Projection:
    bound = 6.0 / np.sqrt(kg_dim)
    weight = rng.uniform(-bound, bound, size=(kg_dim, text_dim))
    return Projection(weight=weight, bias=np.zeros(kg_dim))


@dataclass
class RetrievalResult:
    doc_ids: np.ndarray  # (k,) int64, descending attention
    attention: np.ndarray  # (k,) weights summing to 1
    fused: np.ndarray  # (l,)

    def to_json(self) -> str:
        return json.dumps(
            {
                "doc_ids": self.doc_ids.tolist(),
                "attention": self.attention.tolist(),
                "fused": self.fused.tolist(),
            }
        )


def project(proj: Projection, d: np.ndarray) -> np.ndarray:
    """W_c d + b_c for a single raw description vector."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (proj.text_dim,):
        raise ValueError(f"description vector shape {d.shape} does not match m={proj.text_dim}")
    return proj.weight @ d + proj.bias


def similarity(q: np.ndarray, d_proj: np.ndarray) -> np.ndarray:
    """Inner products of each triple-element row with a projected description."""
    q = np.asarray(q, dtype=np.float64)
    d_proj = np.asarray(d_proj, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != d_proj.shape[0]:
        raise ValueError(f"query shape {q.shape} incompatible with vector of size {d_proj.shape}")
    return q @ d_proj


def project_corpus(proj: Projection, corpus: DescriptionCorpus) -> np.ndarray:
    """Project every corpus vector: (|C|, l) float64."""
    return corpus.vectors.astype(np.float64) @ proj.weight.T + proj.bias


def doc_scores(
    q: np.ndarray,
    proj: Projection,
    corpus: DescriptionCorpus,
    projected: np.ndarray | None = None,
) -> np.ndarray:
    """Per-document ranking keys: L2 norm of similarity(q, projected doc)."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    P = project_corpus(proj, corpus) if projected is None else projected
    V = np.asarray(q, dtype=np.float64) @ P.T  # (3, |C|)
    return np.sqrt((V * V).sum(axis=0))


def attention(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("attention needs at least one score")
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken by smaller index."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[-1]:
        raise ValueError(f"k={k} out of range for {scores.shape[-1]} scores")
    return np.argsort(-scores, kind="stable")[:k]


def _top_k_rows(S: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= S.shape[1]:
        raise ValueError(f"k={k} out of range for {S.shape[1]} scores")
    return np.argsort(-S, axis=1, kind="stable")[:, :k]


@dataclass
class FuseCache:
    """Intermediates of a (batched) fusion forward pass, kept for the VJP."""

    Q: np.ndarray  # (B, 3, l)
    ids: np.ndarray  # (B, k)
    A: np.ndarray  # (B, k)
    S_sel: np.ndarray  # (B, k)
    V_sel: np.ndarray  # (B, 3, k)
    P_sel: np.ndarray  # (B, k, l)
    D_sel: np.ndarray  # (B, k, m) raw vectors, float64


def fuse_batch(
    Q: np.ndarray,
    proj: Projection,
    corpus: DescriptionCorpus,
    k: int,
    projected: np.ndarray | None = None,
) -> tuple[np.ndarray, FuseCache]:
    """Score, select top-k, renormalize attention, pool. Q is (B, 3, l)."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    P = project_corpus(proj, corpus) if projected is None else projected
    Q = np.asarray(Q, dtype=np.float64)
    V = Q @ P.T  # (B, 3, |C|)
    S = np.sqrt((V * V).sum(axis=1))  # (B, |C|)
    ids = _top_k_rows(S, k)
    V_sel = np.take_along_axis(V, ids[:, None, :], axis=2)
    S_sel = np.take_along_axis(S, ids, axis=1)
    A = _softmax_rows(S_sel)
    P_sel = P[ids]
    fused = np.einsum("bk,bkl->bl", A, P_sel)
    cache = FuseCache(
        Q=Q,
        ids=ids,
        A=A,
        S_sel=S_sel,
        V_sel=V_sel,
        P_sel=P_sel,
        D_sel=corpus.vectors[ids].astype(np.float64),
    )
    return fused, cache


def fuse_selected(
    q: np.ndarray,
    proj: Projection,
    corpus: DescriptionCorpus,
    ids: np.ndarray,
    projected: np.ndarray | None = None,
) -> tuple[np.ndarray, FuseCache]:
    """Fusion over a fixed document set (no retrieval); ids are reordered by
    descending score with the same tie rule as top_k."""
    P = project_corpus(proj, corpus) if projected is None else projected
    q = np.asarray(q, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    P_sub = P[ids]  # (kk, l)
    V = q @ P_sub.T  # (3, kk)
    S = np.sqrt((V * V).sum(axis=0))
    order = np.argsort(-S, kind="stable")
    ids = ids[order]
    V_sel = V[:, order][None]
    S_sel = S[order][None]
    A = _softmax_rows(S_sel)
    P_sel = P_sub[order][None]
    fused = np.einsum("bk,bkl->bl", A, P_sel)
    cache = FuseCache(
        Q=q[None],
        ids=ids[None],
        A=A,
        S_sel=S_sel,
        V_sel=V_sel,
        P_sel=P_sel,
        D_sel=corpus.vectors[ids][None].astype(np.float64),
    )
    return fused[0], cache


def fuse_vjp(cache: FuseCache, G: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop G (B, l) through fusion: returns gradients for the queries
    (B, 3, l), the projection weight (l, m) and bias (l,)."""
    gA = np.einsum("bl,bkl->bk", G, cache.P_sel)
    gP_sel = cache.A[..., None] * G[:, None, :]
    inner = (cache.A * gA).sum(axis=1, keepdims=True)
    gS = cache.A * (gA - inner)
    # d||v||/dv = v / ||v||; zero-norm rows get a zero subgradient
    scale = np.divide(gS, cache.S_sel, out=np.zeros_like(gS), where=cache.S_sel > 0)
    gV = scale[:, None, :] * cache.V_sel  # (B, 3, k)
    gQ = np.einsum("btk,bkl->btl", gV, cache.P_sel)
    gP_sel += np.einsum("btk,btl->bkl", gV, cache.Q)
    gW = np.einsum("bkl,bkm->lm", gP_sel, cache.D_sel)
    gb = gP_sel.sum(axis=(0, 1))
    return gQ, gW, gb


def fuse(
    q: np.ndarray,
    proj: Projection,
    corpus: DescriptionCorpus,
    k: int,
    projected: np.ndarray | None = None,
) -> RetrievalResult:
    """Full retrieval + fusion for a single triple query."""
    fused, cache = fuse_batch(np.asarray(q)[None], proj, corpus, k, projected=projected)
    return RetrievalResult(doc_ids=cache.ids[0], attention=cache.A[0], fused=fused[0])


class RetrievalFuser:
    """Batch fusion engine with a cached projected corpus.

    ``prepare`` must be called after every projection update; training calls
    it once per step, evaluation once per pass.
    """

    def __init__(self, corpus: DescriptionCorpus, k: int):
        if not 1 <= k <= len(corpus):
            raise ValueError(f"k={k} out of range for corpus of size {len(corpus)}")
        self.corpus = corpus
        self.k = k
        self._P: np.ndarray | None = None

    @property
    def projected(self) -> np.ndarray | None:
        return self._P

    def prepare(self, proj: Projection) -> None:
        self._P = project_corpus(proj, self.corpus)

    def fuse_triples(
        self, Q: np.ndarray, triples, proj: Projection
    ) -> tuple[np.ndarray, FuseCache, np.ndarray]:
        """Fuse a rectangular batch; the mask is all-true for retrieval mode."""
        fused, cache = fuse_batch(Q, proj, self.corpus, self.k, projected=self._P)
        return fused, cache, np.ones(len(Q), dtype=bool)

    def vjp(self, cache: FuseCache, G: np.ndarray, mask: np.ndarray):
        return fuse_vjp(cache, G)
