"""Batch command-line interface: train, eval, sweep-k, ablate.

Config files are plain ``key = value`` lines (``#`` comments and blank
lines allowed). Every command writes a JSON run manifest with the resolved
config, seed and SHA-256 hashes of its inputs, enough to reproduce the run
exactly.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .ablation import FixedSetFuser
from .corpus import DescriptionCorpus, load_corpus
from .errors import ConfigError, DataError, NumericalError
from .evaluation import (
    link_prediction,
    lp_markdown,
    relation_prediction,
    reports_to_json,
    rp_markdown,
    tp_markdown,
    triplet_classification,
)
from .graph import KnowledgeGraph, load_graph
from .retriever import RetrievalFuser
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_trace,
)

log = logging.getLogger(__name__)

_PATH_KEYS = ("train_path", "valid_path", "test_path", "corpus_meta_path", "corpus_vectors_path")
_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


@dataclass
class RunConfig:
    cfg: TrainConfig
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    corpus_meta_path: str = ""
    corpus_vectors_path: str = ""


def _valid_keys() -> list[str]:
    return [f.name for f in dataclasses.fields(TrainConfig)] + list(_PATH_KEYS)


def _coerce(key: str, value: str, target_type):
    try:
        if target_type is bool:
            if value.lower() not in _BOOL_VALUES:
                raise ValueError(value)
            return _BOOL_VALUES[value.lower()]
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {target_type.__name__}")


def parse_config(path: str) -> RunConfig:
    """Parse the key = value config file into a RunConfig."""
    field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    # dataclass field types arrive as strings under `from __future__ import annotations`
    type_map = {"int": int, "float": float, "str": str, "bool": bool}
    try:
        with open(path, encoding="utf-8") as fh:
            content = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}")

    cfg_kwargs = {}
    paths = {}
    for lineno, line in enumerate(content.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key in field_types:
            t = field_types[key]
            target = type_map.get(t, t) if isinstance(t, str) else t
            cfg_kwargs[key] = _coerce(key, value, target)
        elif key in _PATH_KEYS:
            paths[key] = value
        else:
            raise ConfigError(
                f"{path}: line {lineno}: unknown config key {key!r}; "
                f"valid keys: {', '.join(sorted(_valid_keys()))}"
            )
    return RunConfig(cfg=TrainConfig(**cfg_kwargs), **paths)


def _require_paths(run: RunConfig, keys=_PATH_KEYS) -> None:
    for key in keys:
        value = getattr(run, key)
        if not value:
            raise ConfigError(f"config is missing required key {key!r}")
        if not os.path.exists(value):
            raise DataError(f"config key {key!r}: path does not exist: {value}")


def _load_inputs(run: RunConfig) -> tuple[KnowledgeGraph, DescriptionCorpus]:
    _require_paths(run)
    kg = load_graph(run.train_path, run.valid_path, run.test_path)
    corpus = load_corpus(run.corpus_meta_path, run.corpus_vectors_path, kg)
    return kg, corpus


def make_fuser(cfg: TrainConfig, corpus: DescriptionCorpus):
    if cfg.no_retriever:
        return FixedSetFuser(corpus, cfg.descs_per_entity, cfg.seed)
    return RetrievalFuser(corpus, cfg.k)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, run: RunConfig, input_paths: list[str], **extra):
    manifest = {
        "command": command,
        "config": dataclasses.asdict(run.cfg),
        "paths": {k: getattr(run, k) for k in _PATH_KEYS},
        "seed": run.cfg.seed,
        "input_hashes": {p: _sha256(p) for p in input_paths if p and os.path.exists(p)},
    }
    manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _input_paths(run: RunConfig, config_path: str) -> list[str]:
    return [config_path] + [getattr(run, k) for k in _PATH_KEYS]


def cmd_train(args) -> int:
    run = parse_config(args.config)
    if args.seed is not None:
        run.cfg = dataclasses.replace(run.cfg, seed=args.seed)
    kg, corpus = _load_inputs(run)
    fuser = make_fuser(run.cfg, corpus)
    result = train(kg, corpus, run.cfg, fuser=fuser)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(result.best, ckpt_path)
    write_trace(result.trace, os.path.join(args.out, "trace.csv"))
    summary = {
        "best_valid_mrr": result.best.best_valid_mrr,
        "best_epoch": result.best.epoch,
        "final_epoch": result.last.epoch,
        "graph": kg.summary(),
    }
    if isinstance(fuser, FixedSetFuser):
        summary["skipped_triples"] = fuser.skipped
    _write_manifest(args.out, "train", run, _input_paths(run, args.config), summary=summary)
    print(f"trained {run.cfg.model} for {result.last.epoch} epoch(s); "
          f"best valid MRR {result.best.best_valid_mrr:.4f} at epoch {result.best.epoch}")
    return 0


def _parse_tasks(spec: str) -> list[str]:
    tasks = [t.strip().lower() for t in spec.split(",") if t.strip()]
    for t in tasks:
        if t not in ("lp", "rp", "tp"):
            raise ConfigError(f"unknown task {t!r}; expected a subset of lp,rp,tp")
    if not tasks:
        raise ConfigError("no tasks selected")
    return tasks


def _run_eval(kg, corpus, ckpt: Checkpoint, tasks: list[str], out_dir: str) -> dict:
    cfg = ckpt.config
    fuser = make_fuser(cfg, corpus)
    written = {}
    if "lp" in tasks:
        reports = link_prediction(kg, ckpt.state, ckpt.proj, corpus, cfg, filtered=True, fuser=fuser)
        reports += link_prediction(kg, ckpt.state, ckpt.proj, corpus, cfg, filtered=False, fuser=fuser)
        with open(os.path.join(out_dir, "lp.json"), "w") as fh:
            fh.write(reports_to_json(reports))
        with open(os.path.join(out_dir, "lp.md"), "w") as fh:
            fh.write(lp_markdown(reports))
        overall = next(r for r in reports if r.stratum == "overall" and r.filtered)
        written["lp"] = overall.metrics
    if "rp" in tasks:
        reports = relation_prediction(kg, ckpt.state, ckpt.proj, corpus, cfg, filtered=True, fuser=fuser)
        reports += relation_prediction(kg, ckpt.state, ckpt.proj, corpus, cfg, filtered=False, fuser=fuser)
        with open(os.path.join(out_dir, "rp.json"), "w") as fh:
            fh.write(reports_to_json(reports))
        with open(os.path.join(out_dir, "rp.md"), "w") as fh:
            fh.write(rp_markdown(reports))
        overall = next(r for r in reports if r.stratum == "overall" and r.filtered)
        written["rp"] = overall.metrics
    if "tp" in tasks:
        results = []
        for source in ("kg", "corpus-mentions"):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7001]))
            try:
                results.append(
                    triplet_classification(
                        kg, ckpt.state, ckpt.proj, corpus, cfg,
                        corrupt_source=source, rng=rng, fuser=fuser,
                    )
                )
            except DataError as exc:
                log.warning("tp source %s skipped: %s", source, exc)
        with open(os.path.join(out_dir, "tp.json"), "w") as fh:
            json.dump([r.to_dict() for r in results], fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "tp.md"), "w") as fh:
            fh.write(tp_markdown(results))
        written["tp"] = {r.corrupt_source: r.accuracy for r in results}
    return written


def cmd_eval(args) -> int:
    run = parse_config(args.config)
    kg, corpus = _load_inputs(run)
    ckpt = load_checkpoint(args.checkpoint)
    tasks = _parse_tasks(args.tasks)
    os.makedirs(args.out, exist_ok=True)
    written = _run_eval(kg, corpus, ckpt, tasks, args.out)
    _write_manifest(
        args.out, "eval", run,
        _input_paths(run, args.config) + [args.checkpoint],
        tasks=tasks, results=written,
    )
    print(f"wrote {', '.join(sorted(written))} reports to {args.out}")
    return 0


def _parse_k_range(spec: str) -> tuple[int, int]:
    parts = spec.split("..")
    if len(parts) != 2:
        raise ConfigError(f"--k-range must look like LO..HI, got {spec!r}")
    try:
        lo, hi = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"--k-range must be integers, got {spec!r}")
    if lo < 1 or hi < lo:
        raise ConfigError(f"--k-range needs 1 <= LO <= HI, got {spec!r}")
    return lo, hi


def cmd_sweep_k(args) -> int:
    run = parse_config(args.config)
    if args.seed is not None:
        run.cfg = dataclasses.replace(run.cfg, seed=args.seed)
    lo, hi = _parse_k_range(args.k_range)
    kg, corpus = _load_inputs(run)
    if hi > len(corpus):
        raise ConfigError(f"--k-range upper bound {hi} exceeds corpus size {len(corpus)}")

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for k in range(lo, hi + 1):
        cfg_k = dataclasses.replace(run.cfg, k=k)
        result = train(kg, corpus, cfg_k, fuser=RetrievalFuser(corpus, k))
        best = result.best
        reports = link_prediction(
            kg, best.state, best.proj, corpus, cfg_k, filtered=True,
            fuser=RetrievalFuser(corpus, k),
        )
        overall = next(r for r in reports if r.stratum == "overall")
        rows.append((k, overall.metrics["MRR"], overall.metrics["Hits@10"]))
        log.info("k=%d: mrr=%.4f hits10=%.4f", k, rows[-1][1], rows[-1][2])

    sweep_path = os.path.join(args.out, "sweep.csv")
    with open(sweep_path, "w") as fh:
        fh.write("k,mrr,hits10\n")
        for k, mrr, hits in rows:
            fh.write(f"{k},{mrr},{hits}\n")
    _write_manifest(
        args.out, "sweep-k", run, _input_paths(run, args.config),
        k_range=[lo, hi], summary={"rows": len(rows)},
    )
    print(f"swept k={lo}..{hi}; wrote {sweep_path}")
    return 0


def cmd_ablate(args) -> int:
    if not args.no_retriever:
        raise ConfigError("ablate requires --no-retriever (the only supported ablation)")
    run = parse_config(args.config)
    if args.seed is not None:
        run.cfg = dataclasses.replace(run.cfg, seed=args.seed)
    run.cfg = dataclasses.replace(
        run.cfg, alpha=0.0, no_retriever=True, descs_per_entity=args.descs_per_entity
    )
    kg, corpus = _load_inputs(run)
    fuser = FixedSetFuser(corpus, run.cfg.descs_per_entity, run.cfg.seed)
    result = train(kg, corpus, run.cfg, fuser=fuser)

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(result.best, os.path.join(args.out, "checkpoint.bin"))
    write_trace(result.trace, os.path.join(args.out, "trace.csv"))
    written = _run_eval(kg, corpus, result.best, ["lp", "rp"], args.out)
    _write_manifest(
        args.out, "ablate", run, _input_paths(run, args.config),
        summary={
            "alpha": run.cfg.alpha,
            "descs_per_entity": run.cfg.descs_per_entity,
            "effective_k": 2 * run.cfg.descs_per_entity,
            "best_valid_mrr": result.best.best_valid_mrr,
            "best_epoch": result.best.epoch,
            "skipped_triples": fuser.skipped,
        },
        results=written,
    )
    print(f"ablation (no retriever, {run.cfg.descs_per_entity} descs/entity) done; "
          f"best valid MRR {result.best.best_valid_mrr:.4f}")
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textkge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--tasks", default="lp,rp,tp")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep-k", help="train and evaluate across a range of k")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--k-range", required=True, dest="k_range")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.set_defaults(func=cmd_sweep_k)

    p_ablate = sub.add_parser("ablate", help="train without the retriever (alignment loss only)")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--no-retriever", action="store_true", dest="no_retriever")
    p_ablate.add_argument("--descs-per-entity", type=int, default=2, dest="descs_per_entity")
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--seed", type=int, default=None)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
