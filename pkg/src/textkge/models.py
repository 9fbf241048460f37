"""Knowledge-graph embedding models: TransE, DistMult, ComplEx, RotatE.

All scores are oriented higher-is-better (distance models are negated).
Complex-valued models store rows as [l/2 real parts, l/2 imaginary parts].
RotatE relation rows hold rotation phases in radians in the first l/2
columns; the back half is inert padding kept so every model shares the
|R| x l table contract (zero gradient, never updated).

Analytic gradients use the componentwise L1 subgradient convention
sign(0) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import Triple

TRANSE = "transe"
DISTMULT = "distmult"
COMPLEX = "complex"
ROTATE = "rotate"
MODEL_KINDS = (TRANSE, DISTMULT, COMPLEX, ROTATE)
_COMPLEX_KINDS = (COMPLEX, ROTATE)


@dataclass
class EmbeddingState:
    model_kind: str
    entity_table: np.ndarray  # (n_entities, dim) float64
    relation_table: np.ndarray  # (n_relations, dim) float64
    dim: int

    @property
    def n_entities(self) -> int:
        return self.entity_table.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_table.shape[0]


def init_embeddings(
    kind: str, num_entities: int, num_relations: int, dim: int, rng: np.random.Generator
) -> EmbeddingState:
    """Uniform init in [-6/sqrt(l), +6/sqrt(l)]; TransE entity rows unit-norm;
    RotatE relation entries are phases uniform in [-pi, pi)."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
    if dim < 2:
        raise ConfigError("dim must be >= 2")
    if kind in _COMPLEX_KINDS and dim % 2 != 0:
        raise ConfigError(f"{kind} requires an even dimension, got {dim}")

    bound = 6.0 / np.sqrt(dim)
    entity = rng.uniform(-bound, bound, size=(num_entities, dim))
    if kind == ROTATE:
        relation = rng.uniform(-np.pi, np.pi, size=(num_relations, dim))
    else:
        relation = rng.uniform(-bound, bound, size=(num_relations, dim))
    if kind == TRANSE:
        entity /= np.linalg.norm(entity, axis=1, keepdims=True)
    return EmbeddingState(kind, entity, relation, dim)


def normalize_entity_rows(state: EmbeddingState, rows: np.ndarray | None = None) -> None:
    """L2-normalize entity rows in place (TransE convention); ``rows=None``
    normalizes the whole table. Rows already at unit norm are left
    bit-identical, which keeps a zero-length update a true no-op."""
    table = state.entity_table
    sub = table if rows is None else table[rows]
    norms = np.linalg.norm(sub, axis=1, keepdims=True)
    divide = (norms > 0) & (np.abs(norms - 1.0) > 1e-12)
    out = np.divide(sub, norms, out=sub.copy(), where=divide)
    if rows is None:
        table[:] = out
    else:
        table[rows] = out


def _split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = x.shape[-1] // 2
    return x[..., :half], x[..., half:]


def _rotation(rel_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phases = rel_rows[..., : rel_rows.shape[-1] // 2]
    return np.cos(phases), np.sin(phases)


def score_batch(
    state: EmbeddingState, heads: np.ndarray, relations: np.ndarray, tails: np.ndarray
) -> np.ndarray:
    """Vectorized triple scores for parallel index arrays."""
    e_h = state.entity_table[heads]
    e_t = state.entity_table[tails]
    rel = state.relation_table[relations]
    kind = state.model_kind
    if kind == TRANSE:
        return -np.abs(e_h + rel - e_t).sum(axis=-1)
    if kind == DISTMULT:
        return (e_h * rel * e_t).sum(axis=-1)
    if kind == COMPLEX:
        s_re, s_im = _split(e_h)
        r_re, r_im = _split(rel)
        o_re, o_im = _split(e_t)
        real = (s_re * r_re - s_im * r_im) * o_re + (s_re * r_im + s_im * r_re) * o_im
        return real.sum(axis=-1)
    # RotatE: unit rotation of the head, L1 over the real layout
    s_re, s_im = _split(e_h)
    o_re, o_im = _split(e_t)
    cos, sin = _rotation(rel)
    d_re = s_re * cos - s_im * sin - o_re
    d_im = s_re * sin + s_im * cos - o_im
    return -(np.abs(d_re).sum(axis=-1) + np.abs(d_im).sum(axis=-1))


def score(state: EmbeddingState, t: Triple) -> float:
    return float(
        score_batch(
            state,
            np.array([t.head]),
            np.array([t.relation]),
            np.array([t.tail]),
        )[0]
    )


def score_grad(state: EmbeddingState, t: Triple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradient of ``score`` w.r.t. the head, relation and tail rows."""
    e_h = state.entity_table[t.head]
    e_t = state.entity_table[t.tail]
    rel = state.relation_table[t.relation]
    kind = state.model_kind
    if kind == TRANSE:
        sgn = np.sign(e_h + rel - e_t)
        return -sgn, -sgn, sgn
    if kind == DISTMULT:
        return rel * e_t, e_h * e_t, e_h * rel
    if kind == COMPLEX:
        s_re, s_im = _split(e_h)
        r_re, r_im = _split(rel)
        o_re, o_im = _split(e_t)
        g_head = np.concatenate([r_re * o_re + r_im * o_im, -r_im * o_re + r_re * o_im])
        g_rel = np.concatenate([s_re * o_re + s_im * o_im, -s_im * o_re + s_re * o_im])
        g_tail = np.concatenate([s_re * r_re - s_im * r_im, s_re * r_im + s_im * r_re])
        return g_head, g_rel, g_tail
    s_re, s_im = _split(e_h)
    o_re, o_im = _split(e_t)
    cos, sin = _rotation(rel)
    a_re = s_re * cos - s_im * sin
    a_im = s_re * sin + s_im * cos
    sg_re = np.sign(a_re - o_re)
    sg_im = np.sign(a_im - o_im)
    g_head = -np.concatenate([sg_re * cos + sg_im * sin, -sg_re * sin + sg_im * cos])
    g_phase = -(sg_re * (-a_im) + sg_im * a_re)
    g_rel = np.concatenate([g_phase, np.zeros_like(g_phase)])
    g_tail = np.concatenate([sg_re, sg_im])
    return g_head, g_rel, g_tail


def triple_query(state: EmbeddingState, t: Triple) -> np.ndarray:
    """3 x l stack [subject; relation; object], read from current tables."""
    return np.stack(
        [
            state.entity_table[t.head],
            state.relation_table[t.relation],
            state.entity_table[t.tail],
        ]
    )


def queries_batch(state: EmbeddingState, triples: np.ndarray) -> np.ndarray:
    """(N, 3, l) query stack for an (N, 3) integer triple array."""
    return np.stack(
        [
            state.entity_table[triples[:, 0]],
            state.relation_table[triples[:, 1]],
            state.entity_table[triples[:, 2]],
        ],
        axis=1,
    )


def anchor_batch(state: EmbeddingState, heads: np.ndarray, relations: np.ndarray) -> np.ndarray:
    """Composed KG-side vectors the fused text representation aligns to.

    TransE translates, RotatE rotates, DistMult/ComplEx use their native
    (complex) elementwise products.
    """
    e_h = state.entity_table[heads]
    rel = state.relation_table[relations]
    kind = state.model_kind
    if kind == TRANSE:
        return e_h + rel
    if kind == DISTMULT:
        return e_h * rel
    if kind == COMPLEX:
        s_re, s_im = _split(e_h)
        r_re, r_im = _split(rel)
        return np.concatenate([s_re * r_re - s_im * r_im, s_re * r_im + s_im * r_re], axis=-1)
    s_re, s_im = _split(e_h)
    cos, sin = _rotation(rel)
    return np.concatenate([s_re * cos - s_im * sin, s_re * sin + s_im * cos], axis=-1)


def anchor(state: EmbeddingState, t: Triple) -> np.ndarray:
    return anchor_batch(state, np.array([t.head]), np.array([t.relation]))[0]


def anchor_vjp_batch(
    state: EmbeddingState, heads: np.ndarray, relations: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop ``grad`` (N, l) through anchor composition onto the head and
    relation rows; returns per-sample row gradients (N, l) each."""
    e_h = state.entity_table[heads]
    rel = state.relation_table[relations]
    kind = state.model_kind
    if kind == TRANSE:
        return grad.copy(), grad.copy()
    if kind == DISTMULT:
        return grad * rel, grad * e_h
    if kind == COMPLEX:
        s_re, s_im = _split(e_h)
        r_re, r_im = _split(rel)
        g_re, g_im = _split(grad)
        g_head = np.concatenate([g_re * r_re + g_im * r_im, -g_re * r_im + g_im * r_re], axis=-1)
        g_rel = np.concatenate([g_re * s_re + g_im * s_im, -g_re * s_im + g_im * s_re], axis=-1)
        return g_head, g_rel
    s_re, s_im = _split(e_h)
    cos, sin = _rotation(rel)
    a_re = s_re * cos - s_im * sin
    a_im = s_re * sin + s_im * cos
    g_re, g_im = _split(grad)
    g_head = np.concatenate([g_re * cos + g_im * sin, -g_re * sin + g_im * cos], axis=-1)
    g_phase = -g_re * a_im + g_im * a_re
    g_rel = np.concatenate([g_phase, np.zeros_like(g_phase)], axis=-1)
    return g_head, g_rel
