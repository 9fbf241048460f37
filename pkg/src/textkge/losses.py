"""Training objectives: margin alignment loss and retrieval cross-entropy.

The alignment loss is a margin ranking hinge over L1 dissimilarities
between a triple's fused text vector and its composed KG anchor:

    L = sum_neg max(gamma + d(pos) - d(neg), 0),   d(x) = ||fused - anchor||_1

The retrieval loss is the negative log of the softmax mass assigned to
gold documents, with the softmax taken over gold plus sampled candidate
documents (the full corpus when the candidate budget is 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DescriptionCorpus
from .retriever import Projection, project_corpus


@dataclass
class AlignLossResult:
    loss: float
    g_pos_fused: np.ndarray  # (l,)
    g_pos_anchor: np.ndarray  # (l,)
    g_neg_fused: np.ndarray  # (n_neg, l)
    g_neg_anchors: np.ndarray  # (n_neg, l)
    active: np.ndarray  # (n_neg,) bool, hinge activity per negative


def align_loss(
    pos_fused: np.ndarray,
    pos_anchor: np.ndarray,
    neg_fused: np.ndarray,
    neg_anchors: np.ndarray,
    gamma: float,
) -> AlignLossResult:
    """Hinge loss and gradients w.r.t. all four vector inputs.

    Inactive hinges (including exactly at the boundary) contribute zero
    gradient; L1 kinks use the sign(0) = 0 subgradient.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    pos_fused = np.asarray(pos_fused, dtype=np.float64)
    pos_anchor = np.asarray(pos_anchor, dtype=np.float64)
    neg_fused = np.atleast_2d(np.asarray(neg_fused, dtype=np.float64))
    neg_anchors = np.atleast_2d(np.asarray(neg_anchors, dtype=np.float64))

    diff_pos = pos_fused - pos_anchor
    d_pos = np.abs(diff_pos).sum()
    diff_neg = neg_fused - neg_anchors
    d_neg = np.abs(diff_neg).sum(axis=1)

    margins = gamma + d_pos - d_neg
    active = margins > 0
    loss = float(margins[active].sum())

    sign_pos = np.sign(diff_pos)
    n_active = int(active.sum())
    g_pos_fused = n_active * sign_pos
    sign_neg = np.sign(diff_neg)
    g_neg_fused = -(active[:, None] * sign_neg)
    return AlignLossResult(
        loss=loss,
        g_pos_fused=g_pos_fused,
        g_pos_anchor=-g_pos_fused,
        g_neg_fused=g_neg_fused,
        g_neg_anchors=-g_neg_fused,
        active=active,
    )


@dataclass
class RetrievalLossResult:
    loss: float
    g_q: np.ndarray  # (3, l)
    g_weight: np.ndarray  # (l, m)
    g_bias: np.ndarray  # (l,)
    candidate_ids: np.ndarray  # (n_cand,) sorted


def retrieval_loss(
    q: np.ndarray,
    proj: Projection,
    corpus: DescriptionCorpus,
    gold_docs,
    candidates: int,
    rng: np.random.Generator,
    projected: np.ndarray | None = None,
) -> RetrievalLossResult:
    """Softmax cross-entropy pushing gold documents above the candidates.

    ``candidates`` counts uniformly sampled denominator documents; 0 means
    the exact full corpus, and any budget above |C| is clamped to |C|.
    Multi-gold triples sum their softmax mass before the log.
    """
    n_docs = len(corpus)
    if n_docs == 0:
        raise ValueError("corpus is empty")
    gold = np.unique(np.asarray(list(gold_docs), dtype=np.int64))
    if gold.size == 0:
        raise ValueError("gold document set is empty")

    if candidates <= 0 or candidates >= n_docs:
        cand_ids = np.arange(n_docs, dtype=np.int64)
    else:
        sampled = rng.choice(n_docs, size=candidates, replace=False)
        cand_ids = np.union1d(gold, sampled).astype(np.int64)

    P = project_corpus(proj, corpus) if projected is None else projected
    q = np.asarray(q, dtype=np.float64)
    P_sub = P[cand_ids]  # (n_cand, l)
    V = q @ P_sub.T  # (3, n_cand)
    S = np.sqrt((V * V).sum(axis=0))
    A = np.exp(S - S.max())
    A /= A.sum()

    gold_pos = np.searchsorted(cand_ids, gold)
    gold_mass = A[gold_pos].sum()
    loss = float(-np.log(gold_mass))

    gS = A.copy()
    gS[gold_pos] -= A[gold_pos] / gold_mass
    scale = np.divide(gS, S, out=np.zeros_like(gS), where=S > 0)
    gV = scale[None, :] * V  # (3, n_cand)
    g_q = gV @ P_sub
    gP_sub = np.einsum("tk,tl->kl", gV, q)  # (n_cand, l)
    D_sub = corpus.vectors[cand_ids].astype(np.float64)
    g_weight = gP_sub.T @ D_sub
    g_bias = gP_sub.sum(axis=0)
    return RetrievalLossResult(
        loss=loss, g_q=g_q, g_weight=g_weight, g_bias=g_bias, candidate_ids=cand_ids
    )
