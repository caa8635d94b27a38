"""Command-line entry point: ``polychain {synth,build,pretrain,train,evaluate,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import features as F
from . import io
from .errors import DatasetError, PolychainError
from .evaluation import (CVResult, FoldPlan, RunResult, ensemble_predict, evaluate_run, make_folds,
                         mc_dropout, row_label, run_fold, sensitivity_sweep)
from .engine import release_memory
from .graphs import LARGE, REPEAT_UNIT, BuildConfig, build_cup, build_repeat_unit, iter_trimers
from .models import GATV2, GINE
from .training import Predictor, TrainConfig, pretrain

log = logging.getLogger("polychain")

WORKERS_ENV = "POLYCHAIN_WORKERS"
ENCODER_FILE = "encoder.ckpt"


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer") from None


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise DatasetError(f"invalid config: {getattr(exc, 'problem', exc)}", str(path),
                           mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise DatasetError("config must be a mapping", str(path), 1)
    return data


def train_config(args, raw: dict) -> TrainConfig:
    cfg = TrainConfig.from_dict({k: v for k, v in raw.items() if k in ("encoder", "pretrain", "finetune")})
    enc = cfg.encoder
    if getattr(args, "arch", None):
        enc = replace(enc, arch=args.arch)
    if getattr(args, "features", None):
        enc = replace(enc, features=args.features)
    return replace(cfg, encoder=enc)


def build_config(args, raw: dict) -> BuildConfig:
    section = dict(raw.get("build") or {})
    for key in ("construction", "features", "seed"):
        if getattr(args, key, None) is not None:
            section[key] = getattr(args, key)
    if getattr(args, "cups", None) is not None:
        section["n_cups"] = args.cups
    if getattr(args, "dp_max", None) is not None:
        section["dp_max"] = args.dp_max
    return BuildConfig(**section)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, raw):
    from .synth import synth_generate

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_generate(args.n_polymers, args.n_corpus, args.seed)
    io.write_dataset(out / "dataset.csv", data.records)
    (out / "corpus.txt").write_text("\n".join(data.corpus) + "\n", encoding="utf-8")
    io.write_manifest(out, "synth", vars(args), inputs=[])
    return {"records": len(data.records), "corpus": len(data.corpus)}


def _build_one(record, config: BuildConfig):
    if config.construction == REPEAT_UNIT:
        return [build_repeat_unit(record, config.features)]
    return [build_cup(record, c, config) for c in range(config.n_cups)]


def cmd_build(args, raw):
    config = build_config(args, raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(io.read_dataset(args.dataset), key=lambda r: r.id)
    n_workers = workers()
    t0 = time.perf_counter()
    atoms = 0
    with io.GraphCacheWriter(out / "graphs.pchg", F.FeatureSchema(config.features)) as writer:
        chunk = max(1, args.chunk)
        for start in range(0, len(records), chunk):
            part = records[start:start + chunk]
            if n_workers > 1:
                from joblib import Parallel, delayed
                built = Parallel(n_jobs=n_workers)(delayed(_build_one)(r, config) for r in part)
            else:
                built = [_build_one(r, config) for r in part]
            for graphs in built:
                for g in graphs:
                    writer.write(g)
                    atoms += g.n_nodes
            del built
            release_memory()
        count = writer.count
    seconds = time.perf_counter() - t0
    log.info("built %d graphs (%d atoms) in %.1f s", count, atoms, seconds)
    info = {"graphs": count, "atoms": atoms, "seconds": seconds,
            "graphs_per_second": count / seconds if seconds else None}
    io.write_manifest(out, "build", vars(args), asdict(config), [args.dataset, args.config], info)
    return info


def cmd_pretrain(args, raw):
    config = train_config(args, raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = io.read_corpus(args.corpus)
    graphs, failures = [], []
    for i, g, err in iter_trimers(corpus, F.CHEMICAL):
        if err is None:
            graphs.append(g)
        else:
            failures.append({"line": i + 1, "psmiles": corpus[i], "error": err})
            log.warning("corpus line %d skipped: %s", i + 1, err)
    rate = len(failures) / max(len(corpus), 1)
    if rate > args.max_failure_rate:
        raise DatasetError(f"{len(failures)} of {len(corpus)} corpus strings failed ({rate:.1%}), "
                           f"above --max-failure-rate {args.max_failure_rate}", args.corpus, failures[0]["line"])
    metrics = io.MetricsLog(out / "metrics-pretrain.jsonl")
    result = pretrain(graphs, config.pretrain, replace(config.encoder, features=F.CHEMICAL), args.seed, metrics)
    metrics.close()
    from . import engine

    manifest = {"encoder_config": asdict(result.model.config), "best_epoch": result.best_epoch, "kind": "encoder"}
    engine.save_state(out / ENCODER_FILE, result.encoder_state, manifest)
    io.write_manifest(out, "pretrain", vars(args), config.to_dict(), [args.corpus, args.config],
                      {"corpus_size": len(corpus), "skipped": len(failures)})
    return {"graphs": len(graphs), "skipped": len(failures), "best_epoch": result.best_epoch,
            "val_loss": result.history[result.best_epoch]["val_loss"]}


def _load_encoder(path, config: TrainConfig):
    from . import engine

    state, manifest = engine.load_state(path)
    enc = manifest.get("encoder_config", {})
    for key in ("arch", "layers", "hidden"):
        if key in enc and enc[key] != getattr(config.encoder, key):
            raise ValueError(f"{path}: encoder {key}={enc[key]!r} does not match config {getattr(config.encoder, key)!r}")
    return state


def _graphs_by_id(cache: io.GraphCache, features: str | None = None):
    if features == F.CHEMICAL and cache.schema.mode != F.CHEMICAL:
        raise ValueError(f"{cache.path}: cache holds {cache.schema.mode} features, chemical requested")
    topology = features == F.TOPOLOGY_ONLY and cache.schema.mode == F.CHEMICAL
    by_id: dict[str, list] = {}
    for g in cache.lazy():
        by_id.setdefault(g.polymer_id, []).append(io.TopologyOnlyView(g) if topology else g)
    return by_id


def _read_plan(path, n_folds=5) -> FoldPlan:
    rows = io.read_rows(path)
    return FoldPlan({r["id"]: int(r["fold"]) for r in rows}, n_folds)


def _run_meta(path) -> dict:
    return json.loads(Path(path).read_text())


def cmd_train(args, raw):
    config = train_config(args, raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = {r.id: r for r in io.read_dataset(args.dataset)}
    targets = {pid: r.tg for pid, r in records.items() if r.tg is not None}
    cache = io.GraphCache(args.cache)
    features = args.features or cache.schema.mode
    config = replace(config, encoder=replace(config.encoder, features=features))
    by_id = _graphs_by_id(cache, features)
    construction = args.construction or (REPEAT_UNIT if max(len(v) for v in by_id.values()) == 1 else LARGE)
    plan = _read_plan(args.folds) if args.folds else make_folds([(pid, targets[pid]) for pid in by_id], args.seed)
    io.write_rows(out / "folds.csv", [{"id": k, "fold": v} for k, v in sorted(plan.assignments.items())])
    init = None
    if args.ssl == "on":
        if not args.encoder:
            raise ValueError("--ssl on needs --encoder <checkpoint from `pretrain`>")
        init = _load_encoder(args.encoder, config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    folds = [int(f) for f in args.only_folds.split(",")] if args.only_folds else range(plan.n_folds)
    cups = max(len(v) for v in by_id.values())
    runs = []
    for seed in seeds:
        for fold in folds:
            metrics = io.MetricsLog(out / f"metrics-fold{fold}-seed{seed}.jsonl")
            run, result = run_fold(by_id, targets, plan, fold, seed, config, init, cups)
            for rec in result.history:
                metrics({"fold": fold, "seed": seed, **rec})
            metrics.close()
            for rank, ck in enumerate(result.checkpoints):
                ck.save(out / f"fold{fold}-seed{seed}-rank{rank}.ckpt",
                        {"fold": fold, "seed": seed, "rank": rank, "construction": construction,
                         "ssl": args.ssl, "features": config.encoder.features})
            log.info("fold %d seed %d: test RMSE %.2f K", fold, seed, run.rmse)
            runs.append(run)
    meta = {"construction": construction, "arch": config.encoder.arch, "ssl": args.ssl == "on",
            "features": config.encoder.features, "seeds": seeds, "folds": list(folds), "cups": cups}
    (out / "run.json").write_text(json.dumps(meta, indent=2) + "\n")
    report = _report(out, runs, meta)
    io.write_manifest(out, "train", vars(args), config.to_dict(),
                      [args.dataset, args.cache, args.config, args.encoder, args.folds], {"summary": report})
    return report


def _report(out: Path, runs: list[RunResult], meta: dict) -> dict:
    result = CVResult(runs, row_label(meta["construction"], meta["features"]), meta["arch"], meta["ssl"],
                      meta["construction"], meta["features"])
    io.write_rows(out / "runs.csv", result.run_rows())
    io.write_rows(out / "predictions.csv", result.polymer_rows())
    summary = result.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_evaluate(args, raw):
    run_dir = Path(args.run_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _run_meta(run_dir / "run.json")
    targets = {r.id: r.tg for r in io.read_dataset(args.dataset) if r.tg is not None}
    by_id = _graphs_by_id(io.GraphCache(args.cache), meta["features"])
    plan = _read_plan(run_dir / "folds.csv")
    runs = []
    for seed in meta["seeds"]:
        for fold in meta["folds"]:
            ckpts = sorted(run_dir.glob(f"fold{fold}-seed{seed}-rank*.ckpt"))
            if not ckpts:
                raise FileNotFoundError(f"{run_dir}: no checkpoints for fold {fold} seed {seed}")
            members = [Predictor.load(p) for p in ckpts]
            test_ids = plan.test_ids(fold)
            graphs = [g for pid in test_ids for g in by_id[pid]]
            run = evaluate_run(members[0], graphs, targets, test_ids, meta["cups"], fold, seed)
            _, ens = ensemble_predict(members, graphs)
            run.extra = {"ensemble_rmse_K": float(np.sqrt(np.mean((ens - run.truth) ** 2)))}
            if args.mc_passes:
                _, mean, sigma = mc_dropout(members[0], graphs, args.mc_passes, seed=args.seed)
                run.sigma = sigma
                run.extra["mc_mean_rmse_K"] = float(np.sqrt(np.mean((mean - run.truth) ** 2)))
            runs.append(run)
    report = _report(out, runs, meta)
    io.write_manifest(out, "evaluate", vars(args), meta, [args.dataset, args.cache], {"summary": report})
    return report


def cmd_sweep(args, raw):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictor = Predictor.load(args.checkpoint)
    config = build_config(args, raw)
    config = replace(config, features=predictor.model.config.features)
    result = sensitivity_sweep(predictor, args.psmiles, args.m0, tuple(args.mn_range), tuple(args.d_range),
                               (args.grid, args.grid), config, n_jobs=workers())
    io.write_rows(out / "sweep.csv", result.rows())
    io.write_manifest(out, "sweep", vars(args), asdict(config), [args.checkpoint, args.config])
    return {"cells": int(result.tg.size), "tg_min_K": float(result.tg.min()), "tg_max_K": float(result.tg.max())}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with build/encoder/pretrain/finetune sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--log-level", default="INFO")

    construction = argparse.ArgumentParser(add_help=False)
    construction.add_argument("--cups", type=int, default=None, help="cups per polymer (default 4)")
    construction.add_argument("--construction", choices=(LARGE, REPEAT_UNIT), default=None)
    construction.add_argument("--features", choices=(F.CHEMICAL, F.TOPOLOGY_ONLY), default=None)
    construction.add_argument("--dp-max", type=int, default=None)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--arch", choices=(GINE, GATV2), default=None)
    model.add_argument("--ssl", choices=("on", "off"), default="off")

    p = argparse.ArgumentParser(prog="polychain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and PSMILES corpus")
    s.add_argument("--n-polymers", type=int, default=381)
    s.add_argument("--n-corpus", type=int, default=1000)

    s = sub.add_parser("build", parents=[common, construction], help="dataset CSV -> graph cache")
    s.add_argument("--dataset", required=True)
    s.add_argument("--chunk", type=int, default=16, help="records built per batch (bounds memory)")

    s = sub.add_parser("pretrain", parents=[common, model], help="PSMILES corpus -> encoder checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--max-failure-rate", type=float, default=0.05)

    s = sub.add_parser("train", parents=[common, construction, model], help="cross-validated fine-tuning")
    s.add_argument("--cache", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--folds", help="CSV with id,fold columns (default: stratified plan from --seed)")
    s.add_argument("--seeds", help="comma-separated training seeds (default: --seed)")
    s.add_argument("--only-folds", help="comma-separated subset of folds to run")
    s.add_argument("--encoder", help="pretrained encoder checkpoint, used with --ssl on")

    s = sub.add_parser("evaluate", parents=[common], help="checkpoints -> reports")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--mc-passes", type=int, default=0)

    s = sub.add_parser("sweep", parents=[common, construction], help="Mn x dispersity sensitivity grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--psmiles", required=True)
    s.add_argument("--m0", type=float, default=None)
    s.add_argument("--mn-range", type=float, nargs=2, default=(2000.0, 20000.0))
    s.add_argument("--d-range", type=float, nargs=2, default=(1.5, 4.0))
    s.add_argument("--grid", type=int, default=10)
    return p


COMMANDS = {"synth": cmd_synth, "build": cmd_build, "pretrain": cmd_pretrain, "train": cmd_train,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def error_record(exc: BaseException) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "line", "position", "polymer_id"):
        value = getattr(exc, attr, None)
        if value is not None:
            rec[attr] = value
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        raw = load_config(args.config)
        result = COMMANDS[args.command](args, raw)
    except (PolychainError, ValueError, KeyError, OSError) as exc:
        print(json.dumps(error_record(exc)), file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **(result or {})}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
