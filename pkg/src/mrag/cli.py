"""Batch command-line entry point.

Subcommands cover the pipeline stages: ingest (validate + split),
partition (embed + assign + build the database), train, infer, eval,
bench-partition (strategy/M sweep) and plant (synthesize the planted
learning environment). stdout carries data, stderr carries diagnostics;
runtime failures print a single JSON object on stderr. Exit codes:
0 ok, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import corpus, partition as partition_mod
from .agents import Agent
from .config import ConfigError
from .embed import EmbedderConfig, make_embedder
from .generator import (GenerationCache, Generator, HttpBackend, MockBackend,
                        set_task_instruction)
from .index import HnswParams, build_partitioned_db, load_db, save_db
from .metrics import MetricKind
from .pipeline import (TrainConfig, build_planted_environment, embedder_for_db,
                       evaluate, infer, train)
from .rl import DqnConfig, load_network, save_network


class UsageError(Exception):
    pass


def _emit_error(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        stream=sys.stderr)
    try:
        file_config = config_mod.load_config(args.config) if args.config else {}
        for task, instruction in config_mod.section(file_config, "prompt").items():
            set_task_instruction(task, instruction)
        return args.handler(args, file_config)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        _emit_error(exc)
        return 2
    except Exception as exc:  # runtime failure
        _emit_error(exc)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrag",
                                     description="multi-partition RAG engine")
    parser.add_argument("--config", default=None, help="flat key-value config file")
    parser.add_argument("--log-level", default="warning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and write splits")
    p.add_argument("--data", required=True)
    p.add_argument("--task", default="summarization", choices=corpus.TASKS)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--dev-count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("partition", help="embed the pool and build the database")
    p.add_argument("--pool", required=True)
    p.add_argument("--task", default="summarization", choices=corpus.TASKS)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default=None,
                   choices=partition_mod.STRATEGIES)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_partition)

    p = sub.add_parser("train", help="train both agents on a built database")
    p.add_argument("--db", required=True)
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--dev", dest="dev_path", required=True)
    p.add_argument("--out", required=True)
    _add_generation_flags(p)
    p.add_argument("--metric", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--max-episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="generate hypotheses for a query file")
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    _add_generation_flags(p)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", help="score a test set and write reports")
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", dest="test_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default="rouge1,rouge2,rougeL")
    _add_generation_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench-partition", help="sweep strategies and partition counts")
    p.add_argument("--pool", required=True)
    p.add_argument("--task", default="summarization", choices=corpus.TASKS)
    p.add_argument("--m", default="1,2,3,4,5")
    p.add_argument("--strategies", default="randomization,clustering,indexing")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_bench_partition)

    p = sub.add_parser("plant", help="synthesize the planted learning environment")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--planted", type=int, default=0)
    p.add_argument("--n-per-partition", type=int, default=50)
    p.add_argument("--n-dev", type=int, default=50)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(handler=cmd_plant)
    return parser


def _add_generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default="mock", choices=("mock", "http"))
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--task", default="summarization", choices=corpus.TASKS)


def _embedder_config(file_config: dict, seed_override: int | None = None) -> EmbedderConfig:
    kwargs = dict(config_mod.section(file_config, "embed"))
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return EmbedderConfig(**kwargs)


def _make_generator(args, file_config: dict) -> Generator:
    gen_cfg = dict(config_mod.section(file_config, "generator"))
    backend_name = args.backend or gen_cfg.get("backend", "mock")
    if backend_name == "mock":
        backend = MockBackend()
    else:
        endpoint = args.endpoint or gen_cfg.get("endpoint")
        model = args.model or gen_cfg.get("model", "default")
        if not endpoint:
            raise UsageError("http backend requires --endpoint")
        backend = HttpBackend(endpoint, model,
                              timeout=gen_cfg.get("timeout", 60.0),
                              retries=gen_cfg.get("retries", 1))
    cache_dir = args.cache_dir or gen_cfg.get("cache_dir")
    cache = GenerationCache(cache_dir) if cache_dir else None
    return Generator(backend, cache)


def cmd_ingest(args, file_config: dict) -> int:
    data = Path(args.data)
    if not data.exists():
        raise UsageError(f"dataset not found: {data}")
    section = config_mod.section(file_config, "corpus")
    spec = corpus.SplitSpec(
        train_fraction=args.train_fraction or section.get("train_fraction", 0.10),
        seed=args.seed if args.seed is not None else section.get("seed", 42),
        dev_count=args.dev_count if args.dev_count is not None else section.get("dev_count", 200),
    )
    ds = corpus.load_dataset(data, args.task)
    train_ds, pool_ds, dev_ds = corpus.split_dataset(ds, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save_dataset(train_ds, out / "train.jsonl")
    corpus.save_dataset(pool_ds, out / "memory_pool.jsonl")
    corpus.save_dataset(dev_ds, out / "dev.jsonl")
    manifest = {
        "task": args.task,
        "train_fraction": spec.train_fraction,
        "dev_count": spec.dev_count,
        "seed": spec.seed,
        "sizes": {"train": len(train_ds), "memory_pool": len(pool_ds), "dev": len(dev_ds)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(json.dumps(manifest["sizes"]))
    return 0


def cmd_partition(args, file_config: dict) -> int:
    pool_path = Path(args.pool)
    if not pool_path.exists():
        raise UsageError(f"memory pool not found: {pool_path}")
    pool = corpus.load_dataset(pool_path, args.task)

    section = config_mod.section(file_config, "partition")
    defaults = partition_mod.task_defaults(args.task)
    spec = partition_mod.PartitionSpec(
        strategy=args.strategy or section.get("strategy", defaults.strategy),
        m=args.m or section.get("m", defaults.m),
        seed=args.seed if args.seed is not None else section.get("seed", 42),
    )
    embedder = make_embedder(_embedder_config(file_config))
    index_section = config_mod.section(file_config, "index")
    params = HnswParams(**index_section) if index_section else HnswParams(seed=spec.seed)

    if spec.strategy == "category":
        assignment = partition_mod.partition_category(pool.pairs, spec)
    else:
        vectors = np.stack([
            embedder.embed(corpus_pair_text(pair)) for pair in pool.pairs
        ])
        assignment = partition_mod.assign_partitions(spec, vectors=vectors,
                                                     hnsw_params=params)
    assignment.validate(len(pool.pairs))
    db = build_partitioned_db(pool, assignment, embedder, params)
    save_db(db, args.out)
    print(json.dumps({"m": db.m, "sizes": assignment.partition_sizes(),
                      "build_seconds": db.build_seconds}))
    return 0


def corpus_pair_text(pair: corpus.TextPair) -> str:
    from .embed import concat_pair

    return concat_pair(pair.source, pair.target)


def _load_agent(path: Path, cfg: DqnConfig) -> Agent:
    from .rl import ReplayBuffer

    net = load_network(path)
    return Agent(net=net, buffer=ReplayBuffer(cfg.buffer_capacity), cfg=cfg)


def cmd_train(args, file_config: dict) -> int:
    db_dir = Path(args.db)
    if not db_dir.exists():
        raise UsageError(f"database directory not found: {db_dir}")
    db = load_db(db_dir)
    embedder = embedder_for_db(db)
    generator = _make_generator(args, file_config)

    train_ds = corpus.load_dataset(args.train_path, args.task)
    dev_ds = corpus.load_dataset(args.dev_path, args.task)

    t_section = dict(config_mod.section(file_config, "train"))
    metric_name = args.metric or t_section.pop("metric", "rouge1")
    rouge_mode = t_section.pop("rouge_mode", "f1")
    dqn_section = config_mod.section(file_config, "dqn")
    cfg = TrainConfig(
        m=db.m,
        k=args.k or t_section.pop("k", 3),
        metric=MetricKind(metric_name, rouge_mode),
        dqn=DqnConfig(**dqn_section),
        task=args.task,
        **t_section,
    )
    if args.max_episodes is not None:
        cfg.max_episodes = args.max_episodes
    if args.seed is not None:
        cfg.seed = args.seed

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(db, train_ds, dev_ds, embedder, generator, cfg,
                   log_path=out / "traces.jsonl", checkpoint_dir=out / "checkpoint",
                   resume=args.resume)
    save_network(result.agent_s.net, out / "agent_s.json")
    save_network(result.agent_r.net, out / "agent_r.json")
    save_db(result.db, out / "db")
    (out / "history.json").write_text(
        json.dumps({"history": result.history, "episodes": result.episodes_run}),
        encoding="utf-8")
    print(json.dumps({"episodes": result.episodes_run,
                      "dev_history": result.history}))
    return 0


def cmd_infer(args, file_config: dict) -> int:
    db = load_db(Path(args.db))
    embedder = embedder_for_db(db)
    generator = _make_generator(args, file_config)
    agent_s = _load_agent(Path(args.checkpoint) / "agent_s.json", DqnConfig())
    queries = corpus.load_queries(args.queries)
    out = Path(args.out)
    with out.open("w", encoding="utf-8") as fh:
        for idx, query in enumerate(queries):
            hyp = infer(db, agent_s, query.source, embedder, generator,
                        task=args.task, gen_seed=5 * idx)
            fh.write(json.dumps({"source": query.source, "hypothesis": hyp},
                                ensure_ascii=False) + "\n")
    print(json.dumps({"queries": len(queries), "out": str(out)}))
    return 0


def cmd_eval(args, file_config: dict) -> int:
    db = load_db(Path(args.db))
    embedder = embedder_for_db(db)
    generator = _make_generator(args, file_config)
    agent_s = _load_agent(Path(args.checkpoint) / "agent_s.json", DqnConfig())
    test_ds = corpus.load_dataset(args.test_path, args.task)
    kinds = [MetricKind(name.strip()) for name in args.metrics.split(",") if name.strip()]
    report = evaluate(db, agent_s, test_ds, kinds, embedder, generator, task=args.task)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "per_example.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "hypothesis"] + [k.kind for k in kinds])
        for row in report.per_example:
            writer.writerow([row["index"], row["hypothesis"]]
                            + [row[k.kind] for k in kinds])
    (out / "summary.json").write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


def cmd_bench_partition(args, file_config: dict) -> int:
    pool_path = Path(args.pool)
    if not pool_path.exists():
        raise UsageError(f"memory pool not found: {pool_path}")
    pool = corpus.load_dataset(pool_path, args.task)
    seed = args.seed if args.seed is not None else 42
    embedder = make_embedder(_embedder_config(file_config))
    vectors = np.stack([embedder.embed(corpus_pair_text(p)) for p in pool.pairs])
    ms = [int(x) for x in args.m.split(",") if x.strip()]
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]

    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "m", "partition_sizes", "build_ms", "metric"])
        for strategy in strategies:
            for m in ms:
                spec = partition_mod.PartitionSpec(strategy=strategy, m=m, seed=seed)
                start = time.perf_counter()
                if strategy == "category":
                    assignment = partition_mod.partition_category(pool.pairs, spec)
                else:
                    assignment = partition_mod.assign_partitions(spec, vectors=vectors)
                db = build_partitioned_db(pool, assignment, embedder,
                                          HnswParams(seed=seed))
                elapsed_ms = (time.perf_counter() - start) * 1000.0
                writer.writerow([strategy, m,
                                 "/".join(map(str, assignment.partition_sizes())),
                                 f"{elapsed_ms:.2f}", ""])
                del db
    print(json.dumps({"rows": len(ms) * len(strategies), "out": str(out)}))
    return 0


def cmd_plant(args, file_config: dict) -> int:
    db, train_set, dev_set = build_planted_environment(
        m=args.m, planted=args.planted, n_per_partition=args.n_per_partition,
        seed=args.seed, n_dev=args.n_dev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_db(db, out / "db")
    corpus.save_dataset(train_set, out / "train.jsonl")
    corpus.save_dataset(dev_set, out / "dev.jsonl")
    with (out / "queries.jsonl").open("w", encoding="utf-8") as fh:
        for pair in dev_set.pairs:
            fh.write(json.dumps({"source": pair.source}, ensure_ascii=False) + "\n")
    print(json.dumps({"m": db.m, "planted": args.planted,
                      "train": len(train_set), "dev": len(dev_set)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
