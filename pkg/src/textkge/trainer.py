"""Joint optimization of KG embeddings and the text projection.

Each step samples negatives per positive triple, fuses text for every
triple involved, and minimizes

    total = align + alpha * retrieval

with one optimizer update per batch. Updates are sparse: only embedding
rows touched by the batch change (and, for TransE, only touched entity
rows are re-normalized), so untouched rows stay bit-identical.

Checkpoints serialize every float64 array in DRKAEMB1-style sections
(8-byte magic, u32 rows, u32 cols, then row-major floats) followed by a
JSON trailer with config, epoch, optimizer step count and RNG state;
reloading and continuing is bit-reproducible against an uninterrupted run.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import models
from .corpus import DescriptionCorpus
from .errors import ConfigError, DataError, NumericalError
from .graph import KnowledgeGraph, Triple, sample_negatives
from .losses import align_loss, retrieval_loss
from .optim import adam_step, sgd_step
from .retriever import Projection, RetrievalFuser, init_projection

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DRKACKP1"
SECTION_MAGIC = b"DRKAM641"  # float64 matrix section, little-endian
_SECTION_HEADER = struct.Struct("<8sII")

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    model: str = models.TRANSE
    dim: int = 200
    alpha: float = 1.0
    gamma: float = 1.0
    k: int = 5
    negatives_per_triple: int = 100
    lr: float = 1e-3
    epochs: int = 70
    batch_size: int = 8
    optimizer: str = "adam"
    seed: int = 0
    retrieval_candidates: int = 256  # 0 = exact full-corpus softmax
    text_weight: float = 1.0  # KG-score/text-score combination weight at eval
    no_retriever: bool = False  # ablation: fixed mention-sampled doc sets
    descs_per_entity: int = 2  # ablation: docs sampled per entity

    def validate(self) -> None:
        if self.model not in models.MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.negatives_per_triple < 1:
            raise ConfigError("negatives_per_triple must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.retrieval_candidates < 0:
            raise ConfigError("retrieval_candidates must be >= 0")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.descs_per_entity < 1:
            raise ConfigError("descs_per_entity must be >= 1")


@dataclass
class OptimizerState:
    kind: str
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, kind: str, state: models.EmbeddingState, proj: Projection) -> "OptimizerState":
        opt = cls(kind=kind)
        if kind == "adam":
            for name, arr in _param_arrays(state, proj).items():
                opt.m[name] = np.zeros_like(arr)
                opt.v[name] = np.zeros_like(arr)
        return opt

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            kind=self.kind,
            t=self.t,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def _param_arrays(state: models.EmbeddingState, proj: Projection) -> dict:
    return {
        "entity": state.entity_table,
        "relation": state.relation_table,
        "proj_weight": proj.weight,
        "proj_bias": proj.bias,
    }


@dataclass
class Checkpoint:
    state: models.EmbeddingState
    proj: Projection
    opt: OptimizerState
    config: TrainConfig
    epoch: int
    rng_state: dict
    best_valid_mrr: float = 0.0

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            state=models.EmbeddingState(
                self.state.model_kind,
                self.state.entity_table.copy(),
                self.state.relation_table.copy(),
                self.state.dim,
            ),
            proj=Projection(self.proj.weight.copy(), self.proj.bias.copy()),
            opt=self.opt.copy(),
            config=self.config,
            epoch=self.epoch,
            rng_state=self.rng_state,
            best_valid_mrr=self.best_valid_mrr,
        )


@dataclass
class StepLosses:
    align: float
    retrieval: float
    total: float


@dataclass
class TraceRow:
    epoch: int
    align: float
    retrieval: float
    total: float
    valid_mrr: float


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    trace: list


class _SparseGrads:
    """Per-row gradient accumulator with deterministic (sorted) row order."""

    def __init__(self, dim: int):
        self.rows: dict[int, np.ndarray] = {}
        self.dim = dim

    def add(self, row: int, grad: np.ndarray) -> None:
        acc = self.rows.get(row)
        if acc is None:
            self.rows[row] = grad.astype(np.float64).copy()
        else:
            acc += grad

    def sorted_rows(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.array(sorted(self.rows), dtype=np.int64)
        mat = np.stack([self.rows[i] for i in idx]) if len(idx) else np.zeros((0, self.dim))
        return idx, mat


def joint_step(
    batch: list[Triple],
    kg: KnowledgeGraph,
    state: models.EmbeddingState,
    proj: Projection,
    corpus: DescriptionCorpus,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: OptimizerState,
    fuser=None,
) -> StepLosses:
    """One batch of the joint objective plus one optimizer update.

    Returns batch-mean losses with total = align + alpha * retrieval exactly.
    """
    if not batch:
        raise ValueError("batch is empty")
    if fuser is None:
        fuser = RetrievalFuser(corpus, cfg.k)
    n_neg = cfg.negatives_per_triple
    group = 1 + n_neg

    negatives = [sample_negatives(kg, pos, n_neg, rng) for pos in batch]
    all_triples = np.empty((len(batch) * group, 3), dtype=np.int64)
    for i, pos in enumerate(batch):
        all_triples[i * group] = pos
        for j, neg in enumerate(negatives[i]):
            all_triples[i * group + 1 + j] = neg.triple

    fuser.prepare(proj)
    Q = models.queries_batch(state, all_triples)
    fused, cache, mask = fuser.fuse_triples(Q, all_triples, proj)
    anchors = models.anchor_batch(state, all_triples[:, 0], all_triples[:, 1])

    gold_index = corpus.mention_index() if cfg.alpha > 0 else None
    B = len(batch)
    G_fused = np.zeros_like(fused)
    G_anchor = np.zeros_like(anchors)
    gW = np.zeros_like(proj.weight)
    gb = np.zeros_like(proj.bias)
    gQ_extra = np.zeros_like(Q)

    align_sum = 0.0
    ret_sum = 0.0
    for i, pos in enumerate(batch):
        base = i * group
        neg_rows = np.arange(base + 1, base + group)
        if mask[base]:
            active_negs = neg_rows[mask[neg_rows]]
            res = align_loss(
                fused[base], anchors[base], fused[active_negs], anchors[active_negs], cfg.gamma
            )
            align_sum += res.loss
            G_fused[base] += res.g_pos_fused
            G_anchor[base] += res.g_pos_anchor
            G_fused[active_negs] += res.g_neg_fused
            G_anchor[active_negs] += res.g_neg_anchors

        if cfg.alpha > 0:
            gold = gold_index.gold_docs(pos.head, pos.tail)
            if gold.size:
                rres = retrieval_loss(
                    Q[base],
                    proj,
                    corpus,
                    gold,
                    cfg.retrieval_candidates,
                    rng,
                    projected=fuser.projected,
                )
                ret_sum += rres.loss
                scale = cfg.alpha / B
                gQ_extra[base] += scale * rres.g_q
                gW += scale * rres.g_weight
                gb += scale * rres.g_bias

        if not np.isfinite(align_sum + ret_sum):
            raise NumericalError(f"non-finite loss at batch triple index {i} ({tuple(pos)})")

    align_mean = align_sum / B
    ret_mean = ret_sum / B
    total = align_mean + cfg.alpha * ret_mean

    # backprop fusion with batch-mean scaling folded into the upstream grad
    gQ_fuse, gW_fuse, gb_fuse = fuser.vjp(cache, G_fused / B, mask)
    gW += gW_fuse
    gb += gb_fuse
    gQ = gQ_fuse + gQ_extra

    g_head_rows, g_rel_rows = models.anchor_vjp_batch(
        state, all_triples[:, 0], all_triples[:, 1], G_anchor / B
    )

    ent_grads = _SparseGrads(state.dim)
    rel_grads = _SparseGrads(state.dim)
    for n in range(all_triples.shape[0]):
        h, r, t = all_triples[n]
        ent_grads.add(int(h), gQ[n, 0] + g_head_rows[n])
        rel_grads.add(int(r), gQ[n, 1] + g_rel_rows[n])
        ent_grads.add(int(t), gQ[n, 2])

    ent_rows, ent_mat = ent_grads.sorted_rows()
    rel_rows, rel_mat = rel_grads.sorted_rows()

    if opt.kind == "adam":
        opt.t += 1
        if len(ent_rows):
            adam_step(
                state.entity_table, ent_mat, opt.m["entity"], opt.v["entity"], cfg.lr, opt.t,
                rows=ent_rows,
            )
        if len(rel_rows):
            adam_step(
                state.relation_table, rel_mat, opt.m["relation"], opt.v["relation"], cfg.lr,
                opt.t, rows=rel_rows,
            )
        adam_step(proj.weight, gW, opt.m["proj_weight"], opt.v["proj_weight"], cfg.lr, opt.t)
        adam_step(proj.bias, gb, opt.m["proj_bias"], opt.v["proj_bias"], cfg.lr, opt.t)
    else:
        if len(ent_rows):
            sgd_step(state.entity_table, ent_mat, cfg.lr, rows=ent_rows)
        if len(rel_rows):
            sgd_step(state.relation_table, rel_mat, cfg.lr, rows=rel_rows)
        sgd_step(proj.weight, gW, cfg.lr)
        sgd_step(proj.bias, gb, cfg.lr)

    if state.model_kind == models.TRANSE and len(ent_rows):
        models.normalize_entity_rows(state, ent_rows)

    return StepLosses(align=align_mean, retrieval=ret_mean, total=total)


def init_run(kg: KnowledgeGraph, corpus: DescriptionCorpus, cfg: TrainConfig):
    """Fresh state, projection, optimizer and RNG in a fixed draw order."""
    rng = np.random.default_rng(cfg.seed)
    state = models.init_embeddings(cfg.model, kg.n_entities, kg.n_relations, cfg.dim, rng)
    proj = init_projection(cfg.dim, corpus.text_dim, rng)
    opt = OptimizerState.fresh(cfg.optimizer, state, proj)
    return state, proj, opt, rng


def train(
    kg: KnowledgeGraph,
    corpus: DescriptionCorpus,
    cfg: TrainConfig,
    fuser=None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Epochs of shuffled mini-batches; retains the best-validation-MRR
    checkpoint (first-best on ties) alongside the final one."""
    from .evaluation import validation_mrr  # local import to avoid a cycle

    cfg.validate()
    if resume is not None:
        ckpt = resume.copy()
        state, proj, opt = ckpt.state, ckpt.proj, ckpt.opt
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch
        best_mrr = ckpt.best_valid_mrr
    else:
        state, proj, opt, rng = init_run(kg, corpus, cfg)
        start_epoch = 0
        best_mrr = -np.inf

    if fuser is None:
        fuser = RetrievalFuser(corpus, cfg.k)

    def snapshot(epoch: int, mrr: float) -> Checkpoint:
        return Checkpoint(
            state=state, proj=proj, opt=opt, config=cfg, epoch=epoch,
            rng_state=rng.bit_generator.state, best_valid_mrr=mrr,
        ).copy()

    best_ckpt: Checkpoint | None = None
    trace: list[TraceRow] = []
    n_train = len(kg.train)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        align_acc = ret_acc = total_acc = 0.0
        n_steps = 0
        for lo in range(0, n_train, cfg.batch_size):
            batch = [kg.train[i] for i in order[lo : lo + cfg.batch_size]]
            losses = joint_step(batch, kg, state, proj, corpus, cfg, rng, opt, fuser=fuser)
            align_acc += losses.align
            ret_acc += losses.retrieval
            total_acc += losses.total
            n_steps += 1
        n_steps = max(n_steps, 1)
        if kg.valid:
            mrr = validation_mrr(kg, state, proj, corpus, cfg, fuser=fuser)
        else:
            mrr = 0.0
        trace.append(
            TraceRow(
                epoch=epoch,
                align=align_acc / n_steps,
                retrieval=ret_acc / n_steps,
                total=total_acc / n_steps,
                valid_mrr=mrr,
            )
        )
        if mrr > best_mrr:
            best_mrr = mrr
            best_ckpt = snapshot(epoch, mrr)
        log.debug("epoch %d: total=%.6f valid_mrr=%.4f", epoch, total_acc / n_steps, mrr)

    last_epoch = trace[-1].epoch if trace else start_epoch
    final_best = float(best_mrr) if np.isfinite(best_mrr) else 0.0
    last = snapshot(last_epoch, final_best)
    if best_ckpt is None:
        best_ckpt = last.copy()
    return TrainResult(best=best_ckpt, last=last, trace=trace)


def write_trace(trace: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "align", "retrieval", "total", "valid_mrr"])
        for row in trace:
            writer.writerow([row.epoch, row.align, row.retrieval, row.total, row.valid_mrr])


def read_trace(path: str) -> list[TraceRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                TraceRow(
                    epoch=int(rec["epoch"]),
                    align=float(rec["align"]),
                    retrieval=float(rec["retrieval"]),
                    total=float(rec["total"]),
                    valid_mrr=float(rec["valid_mrr"]),
                )
            )
    return out


def _pack_section(name: str, arr: np.ndarray) -> bytes:
    mat = np.ascontiguousarray(np.atleast_2d(np.asarray(arr, dtype=np.float64)))
    name_bytes = name.encode("utf-8")
    return (
        struct.pack("<H", len(name_bytes))
        + name_bytes
        + _SECTION_HEADER.pack(SECTION_MAGIC, mat.shape[0], mat.shape[1])
        + mat.astype("<f8", copy=False).tobytes(order="C")
    )


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"checkpoint {self.path}: truncated while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Atomic (write-temp-then-rename) checkpoint serialization."""
    sections = [
        ("entity_table", ckpt.state.entity_table),
        ("relation_table", ckpt.state.relation_table),
        ("proj_weight", ckpt.proj.weight),
        ("proj_bias", ckpt.proj.bias),
    ]
    if ckpt.opt.kind == "adam":
        for name in ("entity", "relation", "proj_weight", "proj_bias"):
            sections.append((f"adam_m_{name}", ckpt.opt.m[name]))
            sections.append((f"adam_v_{name}", ckpt.opt.v[name]))

    trailer = json.dumps(
        {
            "format": 1,
            "model_kind": ckpt.state.model_kind,
            "dim": ckpt.state.dim,
            "epoch": ckpt.epoch,
            "optimizer": ckpt.opt.kind,
            "adam_t": ckpt.opt.t,
            "best_valid_mrr": ckpt.best_valid_mrr,
            "config": dataclasses.asdict(ckpt.config),
            "rng_state": ckpt.rng_state,
        },
        sort_keys=True,
    ).encode("utf-8")

    payload = bytearray()
    payload += CKPT_MAGIC
    payload += struct.pack("<I", len(sections))
    for name, arr in sections:
        payload += _pack_section(name, arr)
    payload += struct.pack("<I", len(trailer))
    payload += trailer

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob, path)
    if reader.take(8, "file magic") != CKPT_MAGIC:
        raise DataError(f"checkpoint {path}: bad file magic")
    (n_sections,) = struct.unpack("<I", reader.take(4, "section count"))
    sections: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack("<H", reader.take(2, "section name length"))
        name = reader.take(name_len, "section name").decode("utf-8")
        header = reader.take(_SECTION_HEADER.size, f"section {name!r} header")
        magic, rows, cols = _SECTION_HEADER.unpack(header)
        if magic != SECTION_MAGIC:
            raise DataError(f"checkpoint {path}: section {name!r} failed to parse: bad magic")
        data = reader.take(rows * cols * 8, f"section {name!r} payload")
        sections[name] = np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy()
    (json_len,) = struct.unpack("<I", reader.take(4, "trailer length"))
    try:
        meta = json.loads(reader.take(json_len, "JSON trailer").decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path}: section 'JSON trailer' failed to parse: {exc}")

    def need(name: str) -> np.ndarray:
        if name not in sections:
            raise DataError(f"checkpoint {path}: section {name!r} missing")
        return sections[name]

    cfg = TrainConfig(**meta["config"])
    state = models.EmbeddingState(
        model_kind=meta["model_kind"],
        entity_table=need("entity_table"),
        relation_table=need("relation_table"),
        dim=int(meta["dim"]),
    )
    proj = Projection(weight=need("proj_weight"), bias=need("proj_bias")[0])
    opt = OptimizerState(kind=meta["optimizer"], t=int(meta["adam_t"]))
    if opt.kind == "adam":
        for name, shaped in (
            ("entity", state.entity_table),
            ("relation", state.relation_table),
            ("proj_weight", proj.weight),
            ("proj_bias", proj.bias),
        ):
            m = need(f"adam_m_{name}")
            v = need(f"adam_v_{name}")
            opt.m[name] = m.reshape(shaped.shape)
            opt.v[name] = v.reshape(shaped.shape)
    return Checkpoint(
        state=state,
        proj=proj,
        opt=opt,
        config=cfg,
        epoch=int(meta["epoch"]),
        rng_state=meta["rng_state"],
        best_valid_mrr=float(meta["best_valid_mrr"]),
    )
