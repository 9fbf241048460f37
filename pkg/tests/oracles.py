"""Independent brute-force oracles used to cross-check the engine.

These deliberately avoid the library's own ranking/aggregation code paths:
ranks come from explicit sorting, metrics from direct definition arithmetic,
thresholds from exhaustive sweeps, and gradients from central finite
differences.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Componentwise central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * (1.0 + abs(orig))
        flat[i] = orig + step
        f_plus = f(x)
        flat[i] = orig - step
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(numeric))
    err = np.abs(analytic - numeric) / denom
    assert err.max() <= rtol, f"gradient mismatch: max rel err {err.max():.3e}"


def sort_rank(scores, target_pos: int) -> float:
    """Midrank via sort positions: average 1-based position of the tie group."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    positions = [p + 1 for p, i in enumerate(order) if scores[i] == scores[target_pos]]
    return sum(positions) / len(positions)


def sort_top_k(scores, k: int) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def direct_metrics(ranks, cutoffs=(1, 10)) -> dict:
    ranks = list(ranks)
    out = {
        "MRR": sum(1.0 / r for r in ranks) / len(ranks),
        "MR": sum(ranks) / len(ranks),
    }
    for n in cutoffs:
        out[f"Hits@{n}"] = sum(1 for r in ranks if r <= n) / len(ranks)
    return out


def softmax_direct(scores) -> np.ndarray:
    """Softmax via direct definition (no max subtraction; small inputs only)."""
    e = np.array([np.exp(s) for s in scores], dtype=np.float64)
    return e / e.sum()


def lp_oracle(kg, score_fn, split_triples, filtered: bool):
    """Brute-force link prediction: per query, score every entity with the
    provided scorer, drop known-true competitors when filtered, midrank."""
    from textkge.graph import Triple

    head_ranks, tail_ranks = [], []
    n = kg.n_entities
    for t in split_triples:
        for position, target in ((0, t.head), (2, t.tail)):
            cands, scores = [], []
            for e in range(n):
                parts = [t.head, t.relation, t.tail]
                parts[position] = e
                cand = Triple(*parts)
                if filtered and e != target and cand in kg.all_true:
                    continue
                cands.append(e)
                scores.append(score_fn(cand))
            rank = sort_rank(scores, cands.index(target))
            (head_ranks if position == 0 else tail_ranks).append(rank)
    return head_ranks, tail_ranks


def rp_oracle(kg, score_fn, split_triples, filtered: bool):
    from textkge.graph import Triple

    ranks = []
    for t in split_triples:
        cands, scores = [], []
        for r in range(kg.n_relations):
            cand = Triple(t.head, r, t.tail)
            if filtered and r != t.relation and cand in kg.all_true:
                continue
            cands.append(r)
            scores.append(score_fn(cand))
        ranks.append(sort_rank(scores, cands.index(t.relation)))
    return ranks


def best_threshold_oracle(scores, labels) -> float:
    """Exhaustive sweep over distinct scores plus +inf; smallest maximizer."""
    candidates = sorted(set(float(s) for s in scores)) + [float("inf")]
    best_t, best_acc = float("inf"), -1.0
    for t in candidates:
        acc = sum(1 for s, l in zip(scores, labels) if (s >= t) == l) / len(scores)
        if acc > best_acc:
            best_acc, best_t = acc, t
    return best_t


def tp_oracle(pos_scores, neg_scores_by_column, relations_pos, relations_neg_by_column,
              thresholds, global_threshold):
    """Recompute TP column accuracies from raw scores and fitted thresholds."""

    def is_valid(score, rel):
        return score >= thresholds.get(rel, global_threshold)

    acc = {}
    n = len(pos_scores)
    pos_correct = sum(1 for s, r in zip(pos_scores, relations_pos) if is_valid(s, r))
    acc["valid"] = pos_correct / n
    for column, neg_scores in neg_scores_by_column.items():
        neg_correct = sum(
            1
            for s, r in zip(neg_scores, relations_neg_by_column[column])
            if not is_valid(s, r)
        )
        acc[column] = (pos_correct + neg_correct) / (2 * n)
    return acc
