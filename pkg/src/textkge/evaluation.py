"""Link prediction, relation prediction and triplet classification.

Candidates are scored with the KG model score plus a weighted text
alignment score -||fused - anchor||_1 (weight configurable, default 1.0),
with the candidate substituted into the retrieval query. Ranks use
midrank tie handling: rank = 1 + #strictly-better + #ties/2, so permuting
candidates never changes a metric and constant scorers cannot cheat
Hits@N. Filtered mode removes other known-true triples from the pool.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import models
from .corpus import DescriptionCorpus
from .errors import DataError
from .graph import CORRUPT_ALL, CORRUPT_HEAD, CORRUPT_TAIL, KnowledgeGraph, Triple
from .graph import sample_negatives, stratify
from .retriever import Projection, RetrievalFuser

log = logging.getLogger(__name__)

TASK_LP = "LP"
TASK_RP = "RP"
TASK_TP = "TP"

STRATUM_OVERALL = "overall"
STRATUM_WITH = "with_mentions"
STRATUM_WITHOUT = "without_mentions"

TP_COLUMNS = ("valid", "head", "tail", "all")
_TP_FAMILY = {"head": CORRUPT_HEAD, "tail": CORRUPT_TAIL, "all": CORRUPT_ALL}


@dataclass
class ScoredCandidate:
    candidate: int
    score: float


@dataclass
class EvalReport:
    task: str
    stratum: str
    filtered: bool
    n_queries: int
    metrics: dict

    def validate(self) -> None:
        m = self.metrics
        if "MRR" in m and not 0 < m["MRR"] <= 1:
            raise ValueError(f"MRR out of range: {m['MRR']}")
        if "MR" in m and m["MR"] < 1:
            raise ValueError(f"MR out of range: {m['MR']}")
        for key, val in m.items():
            if key.startswith("Hits@") and not 0 <= val <= 1:
                raise ValueError(f"{key} out of range: {val}")
        if "accuracy" in m and not 0 <= m["accuracy"] <= 1:
            raise ValueError(f"accuracy out of range: {m['accuracy']}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "stratum": self.stratum,
            "filtered": self.filtered,
            "n_queries": self.n_queries,
            "metrics": self.metrics,
        }


def rank_of(candidates: list[ScoredCandidate], target) -> float:
    """Midrank of the target candidate: 1 + #strictly-better + #ties/2."""
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    ids = [c.candidate for c in candidates]
    try:
        pos = ids.index(target)
    except ValueError:
        raise ValueError(f"target {target!r} not among candidates") from None
    if not np.isfinite(scores).all():
        raise ValueError("candidate scores must be finite")
    return _midrank(scores, pos)


def _midrank(scores: np.ndarray, target_pos: int) -> float:
    s = scores[target_pos]
    better = int((scores > s).sum())
    ties = int((scores == s).sum()) - 1
    return 1.0 + better + ties / 2.0


def metrics(ranks, cutoffs=(1, 10)) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("metrics need at least one rank")
    if (ranks < 1).any():
        raise ValueError("ranks must be >= 1")
    out = {"MRR": float((1.0 / ranks).mean()), "MR": float(ranks.mean())}
    for n in cutoffs:
        out[f"Hits@{n}"] = float((ranks <= n).mean())
    return out


def candidate_scores(
    state: models.EmbeddingState,
    proj: Projection,
    triples: np.ndarray,
    fuser=None,
    text_weight: float = 1.0,
) -> np.ndarray:
    """Combined KG + text scores for an (N, 3) candidate triple array."""
    kg_scores = models.score_batch(state, triples[:, 0], triples[:, 1], triples[:, 2])
    if fuser is None or text_weight == 0.0:
        return kg_scores
    Q = models.queries_batch(state, triples)
    fused, _cache, mask = fuser.fuse_triples(Q, triples, proj)
    anchors = models.anchor_batch(state, triples[:, 0], triples[:, 1])
    text = -np.abs(fused - anchors).sum(axis=1)
    return kg_scores + text_weight * np.where(mask, text, 0.0)


def _default_fuser(corpus: DescriptionCorpus, cfg) -> RetrievalFuser | None:
    if corpus is None or len(corpus) == 0:
        return None
    return RetrievalFuser(corpus, min(cfg.k, len(corpus)))


class _PinnedFuser:
    """Fuses every candidate query over one fixed document set (the
    cached-top-k approximation: selection computed once from the true
    triple's query, attention still per candidate)."""

    def __init__(self, base, ids: np.ndarray):
        self.base = base
        self.ids = ids

    def prepare(self, proj) -> None:
        self.base.prepare(proj)

    def fuse_triples(self, Q: np.ndarray, triples, proj):
        from .retriever import fuse_selected

        fused = np.zeros((len(Q), Q.shape[2]))
        for i in range(len(Q)):
            fused[i], _ = fuse_selected(
                Q[i], proj, self.base.corpus, self.ids, projected=self.base.projected
            )
        return fused, None, np.ones(len(Q), dtype=bool)


def _lp_query_rank(
    kg, state, proj, triple: Triple, position: int, fuser, text_weight: float, filtered: bool,
    approx_cached_topk: bool = False,
) -> float:
    """Rank of the true entity among all entities substituted at ``position``
    (0 = head, 2 = tail)."""
    n = kg.n_entities
    cands = np.empty((n, 3), dtype=np.int64)
    cands[:, 0] = triple.head
    cands[:, 1] = triple.relation
    cands[:, 2] = triple.tail
    cands[:, position] = np.arange(n)
    if approx_cached_topk and fuser is not None and hasattr(fuser, "k"):
        from .retriever import doc_scores, top_k

        true_q = models.triple_query(state, triple)
        ids = top_k(doc_scores(true_q, proj, fuser.corpus, projected=fuser.projected), fuser.k)
        fuser = _PinnedFuser(fuser, ids)
    scores = candidate_scores(state, proj, cands, fuser=fuser, text_weight=text_weight)

    target = triple[position]
    if filtered:
        keep = np.ones(n, dtype=bool)
        for e in range(n):
            if e == target:
                continue
            cand = Triple(*(int(x) for x in cands[e]))
            if cand in kg.all_true:
                keep[e] = False
        scores = scores[keep]
        target_pos = int(keep[:target].sum())
    else:
        target_pos = target
    return _midrank(scores, target_pos)


def lp_ranks(
    kg: KnowledgeGraph,
    state: models.EmbeddingState,
    proj: Projection,
    corpus: DescriptionCorpus,
    cfg,
    filtered: bool = True,
    split: str = "test",
    fuser=None,
    approx_cached_topk: bool = False,
) -> tuple[list[Triple], np.ndarray, np.ndarray]:
    """Per-triple (head-replacement, tail-replacement) ranks for a split."""
    triples = kg.split(split)
    if not triples:
        raise DataError(f"{split} split is empty")
    if fuser is None:
        fuser = _default_fuser(corpus, cfg)
    if fuser is not None:
        fuser.prepare(proj)
    tw = getattr(cfg, "text_weight", 1.0)
    head_ranks = np.empty(len(triples))
    tail_ranks = np.empty(len(triples))
    for i, t in enumerate(triples):
        head_ranks[i] = _lp_query_rank(
            kg, state, proj, t, 0, fuser, tw, filtered, approx_cached_topk
        )
        tail_ranks[i] = _lp_query_rank(
            kg, state, proj, t, 2, fuser, tw, filtered, approx_cached_topk
        )
    return triples, head_ranks, tail_ranks


def _strata_reports(
    task: str,
    kg: KnowledgeGraph,
    corpus: DescriptionCorpus,
    triples: list[Triple],
    ranks_per_triple: list[np.ndarray],
    filtered: bool,
    strata: tuple,
    cutoffs=(1, 10),
) -> list[EvalReport]:
    with_set = set()
    if corpus is not None and len(corpus):
        with_mentions, _ = stratify(kg, corpus, triples)
        with_set = set(with_mentions)
    reports = []
    for stratum in strata:
        if stratum == STRATUM_OVERALL:
            chosen = [True] * len(triples)
        elif stratum == STRATUM_WITH:
            chosen = [t in with_set for t in triples]
        else:
            chosen = [t not in with_set for t in triples]
        pool = np.concatenate(
            [r[np.array(chosen, dtype=bool)] for r in ranks_per_triple]
        ) if any(chosen) else np.empty(0)
        if pool.size == 0:
            continue
        report = EvalReport(
            task=task,
            stratum=stratum,
            filtered=filtered,
            n_queries=int(pool.size),
            metrics=metrics(pool, cutoffs=cutoffs),
        )
        report.validate()
        reports.append(report)
    return reports


def link_prediction(
    kg: KnowledgeGraph,
    state: models.EmbeddingState,
    proj: Projection,
    corpus: DescriptionCorpus,
    cfg,
    filtered: bool = True,
    split: str = "test",
    fuser=None,
    approx_cached_topk: bool = False,
) -> list[EvalReport]:
    """Head- and tail-replacement ranking over all entities; metrics are
    computed on the concatenated rank pool of both directions, reported for
    overall / with-mentions / without-mentions strata."""
    triples, head_ranks, tail_ranks = lp_ranks(
        kg, state, proj, corpus, cfg, filtered=filtered, split=split, fuser=fuser,
        approx_cached_topk=approx_cached_topk,
    )
    return _strata_reports(
        TASK_LP,
        kg,
        corpus,
        triples,
        [head_ranks, tail_ranks],
        filtered,
        (STRATUM_OVERALL, STRATUM_WITH, STRATUM_WITHOUT),
    )


def validation_mrr(kg, state, proj, corpus, cfg, fuser=None) -> float:
    """Filtered overall LP MRR on the validation split (trainer hook)."""
    _, head_ranks, tail_ranks = lp_ranks(
        kg, state, proj, corpus, cfg, filtered=True, split="valid", fuser=fuser
    )
    pool = np.concatenate([head_ranks, tail_ranks])
    return float((1.0 / pool).mean())


def relation_prediction(
    kg: KnowledgeGraph,
    state: models.EmbeddingState,
    proj: Projection,
    corpus: DescriptionCorpus,
    cfg,
    filtered: bool = True,
    split: str = "test",
    fuser=None,
) -> list[EvalReport]:
    """Rank the true relation against all relations; overall and
    without-mentions strata."""
    triples = kg.split(split)
    if not triples:
        raise DataError(f"{split} split is empty")
    if fuser is None:
        fuser = _default_fuser(corpus, cfg)
    if fuser is not None:
        fuser.prepare(proj)
    tw = getattr(cfg, "text_weight", 1.0)
    n_rel = kg.n_relations
    ranks = np.empty(len(triples))
    for i, t in enumerate(triples):
        cands = np.empty((n_rel, 3), dtype=np.int64)
        cands[:, 0] = t.head
        cands[:, 1] = np.arange(n_rel)
        cands[:, 2] = t.tail
        scores = candidate_scores(state, proj, cands, fuser=fuser, text_weight=tw)
        if filtered:
            keep = np.ones(n_rel, dtype=bool)
            for r in range(n_rel):
                if r != t.relation and Triple(t.head, r, t.tail) in kg.all_true:
                    keep[r] = False
            ranks[i] = _midrank(scores[keep], int(keep[: t.relation].sum()))
        else:
            ranks[i] = _midrank(scores, t.relation)
    return _strata_reports(
        TASK_RP, kg, corpus, triples, [ranks], filtered, (STRATUM_OVERALL, STRATUM_WITHOUT)
    )


@dataclass
class TPResult:
    corrupt_source: str
    accuracy: dict  # column -> accuracy
    n_examples: dict  # column -> count
    thresholds: dict  # relation id -> threshold
    global_threshold: float

    def to_dict(self) -> dict:
        return {
            "task": TASK_TP,
            "corrupt_source": self.corrupt_source,
            "accuracy": self.accuracy,
            "n_examples": self.n_examples,
            "fitted_relations": len(self.thresholds),
        }


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Smallest threshold maximizing accuracy of (score >= t) == label."""
    cands = np.concatenate([np.unique(scores), [np.inf]])
    best_t, best_acc = np.inf, -1.0
    for t in cands:
        acc = float(((scores >= t) == labels).mean())
        if acc > best_acc:
            best_acc, best_t = acc, float(t)
    return best_t


def triplet_classification(
    kg: KnowledgeGraph,
    state: models.EmbeddingState,
    proj: Projection,
    corpus: DescriptionCorpus,
    cfg,
    corrupt_source: str = "kg",
    rng: np.random.Generator | None = None,
    fuser=None,
) -> TPResult:
    """Valid/invalid classification with per-relation thresholds.

    Thresholds are fitted on the validation split against one corruption per
    positive (family uniform over head/tail/all); a triple is classified by
    the threshold of the relation it contains, falling back to the global
    threshold for relations unseen during fitting. Accuracy columns: "valid"
    is positives-only, the corruption columns are balanced positive+negative
    sets. ``corrupt_source="corpus-mentions"`` restricts replacement entities
    to entities mentioned in at least one description.
    """
    if not kg.valid:
        raise DataError("triplet classification needs a validation split for thresholds")
    if not kg.test:
        raise DataError("test split is empty")
    if rng is None:
        rng = np.random.default_rng(0)
    if fuser is None:
        fuser = _default_fuser(corpus, cfg)
    if fuser is not None:
        fuser.prepare(proj)
    tw = getattr(cfg, "text_weight", 1.0)

    pool = None
    if corrupt_source == "corpus-mentions":
        mentioned = corpus.mention_index().mentioned_entities
        if mentioned.size < 2:
            raise DataError("corpus-mentions corruption needs >= 2 mentioned entities")
        pool = mentioned
    elif corrupt_source != "kg":
        raise ValueError(f"unknown corrupt_source {corrupt_source!r}")

    def score_triples(triples: list[Triple]) -> np.ndarray:
        arr = np.array([tuple(t) for t in triples], dtype=np.int64)
        return candidate_scores(state, proj, arr, fuser=fuser, text_weight=tw)

    # --- fit thresholds on validation ------------------------------------
    # entity corruptions only: they preserve the relation, so every
    # per-relation group stays balanced (positives pair with negatives of
    # the same relation); all-corrupt triples are a test-time column that
    # falls back to the global threshold for unseen relations
    fit_families = (CORRUPT_HEAD, CORRUPT_TAIL)
    fit_triples: list[Triple] = []
    fit_labels: list[bool] = []
    for t in kg.valid:
        fam = fit_families[int(rng.integers(2))]
        neg = sample_negatives(kg, t, 1, rng, family=fam, entity_pool=pool)[0]
        fit_triples.extend([t, neg.triple])
        fit_labels.extend([True, False])
    fit_scores = score_triples(fit_triples)
    fit_labels_arr = np.array(fit_labels)
    fit_relations = np.array([t.relation for t in fit_triples])

    thresholds: dict[int, float] = {}
    for rel in sorted(set(fit_relations.tolist())):
        sel = fit_relations == rel
        thresholds[rel] = _best_threshold(fit_scores[sel], fit_labels_arr[sel])
    global_threshold = _best_threshold(fit_scores, fit_labels_arr)

    def classify(triples: list[Triple], scores: np.ndarray) -> np.ndarray:
        th = np.array([thresholds.get(t.relation, global_threshold) for t in triples])
        return scores >= th

    # --- test columns ----------------------------------------------------
    pos_scores = score_triples(kg.test)
    pos_valid = classify(kg.test, pos_scores)
    accuracy = {"valid": float(pos_valid.mean())}
    n_examples = {"valid": len(kg.test)}
    for column in ("head", "tail", "all"):
        negs = [
            sample_negatives(kg, t, 1, rng, family=_TP_FAMILY[column], entity_pool=pool)[0].triple
            for t in kg.test
        ]
        neg_scores = score_triples(negs)
        neg_invalid = ~classify(negs, neg_scores)
        correct = int(pos_valid.sum()) + int(neg_invalid.sum())
        accuracy[column] = correct / (2 * len(kg.test))
        n_examples[column] = 2 * len(kg.test)
    return TPResult(
        corrupt_source=corrupt_source,
        accuracy=accuracy,
        n_examples=n_examples,
        thresholds=thresholds,
        global_threshold=global_threshold,
    )


def reports_to_json(reports: list[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def reports_from_json(text: str) -> list[EvalReport]:
    out = []
    for obj in json.loads(text):
        report = EvalReport(
            task=obj["task"],
            stratum=obj["stratum"],
            filtered=obj["filtered"],
            n_queries=obj["n_queries"],
            metrics=obj["metrics"],
        )
        report.validate()
        out.append(report)
    return out


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def lp_markdown(reports: list[EvalReport]) -> str:
    """Markdown table: rows = filtered/raw, column groups = strata."""
    strata = (STRATUM_OVERALL, STRATUM_WITH, STRATUM_WITHOUT)
    lines = [
        "| setting | " + " | ".join(f"{s} MRR | {s} Hits@10" for s in strata) + " |",
        "|---" * (1 + 2 * len(strata)) + "|",
    ]
    for flag in (True, False):
        row = ["filtered" if flag else "raw"]
        by_stratum = {r.stratum: r for r in reports if r.filtered == flag}
        for s in strata:
            r = by_stratum.get(s)
            row.append(_fmt(r.metrics["MRR"]) if r else "-")
            row.append(_fmt(r.metrics["Hits@10"]) if r else "-")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def rp_markdown(reports: list[EvalReport]) -> str:
    strata = (STRATUM_OVERALL, STRATUM_WITHOUT)
    lines = [
        "| setting | " + " | ".join(f"{s} MR | {s} Hits@1" for s in strata) + " |",
        "|---" * (1 + 2 * len(strata)) + "|",
    ]
    for flag in (True, False):
        row = ["filtered" if flag else "raw"]
        by_stratum = {r.stratum: r for r in reports if r.filtered == flag}
        for s in strata:
            r = by_stratum.get(s)
            row.append(_fmt(r.metrics["MR"]) if r else "-")
            row.append(_fmt(r.metrics["Hits@1"]) if r else "-")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def tp_markdown(results: list[TPResult]) -> str:
    lines = [
        "| corruption source | valid | head-corrupt | tail-corrupt | all-corrupt |",
        "|---|---|---|---|---|",
    ]
    for res in results:
        lines.append(
            "| "
            + " | ".join(
                [res.corrupt_source]
                + [_fmt(res.accuracy[c]) for c in TP_COLUMNS]
            )
            + " |"
        )
    return "\n".join(lines) + "\n"
