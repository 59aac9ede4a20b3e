"""Text-pair dataset loading, validation, and splitting.

Datasets are JSONL files: one object per line with keys ``source``
(string, required), ``target`` (string, required) and ``categories``
(array of strings, optional). A dataset is split into a training sample,
a memory pool used to build the partitioned database, and a development
set. Everything is read-only after load and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TASKS = ("summarization", "translation", "dialogue")


class CorpusError(Exception):
    """Base class for dataset loading/splitting failures."""


class MalformedRecord(CorpusError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class EmptyDataset(CorpusError):
    pass


class InvalidSpec(CorpusError):
    pass


@dataclass(frozen=True)
class TextPair:
    """One (source, target) record; categories are optional labels."""

    source: str
    target: str
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.source.strip():
            raise ValueError("source is empty after trimming")
        if not self.target.strip():
            raise ValueError("target is empty after trimming")


@dataclass(frozen=True)
class Query:
    """An inference-time input with no reference target."""

    source: str


@dataclass
class Dataset:
    pairs: list[TextPair]
    task: str = "summarization"

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidSpec(f"unknown task {self.task!r}; expected one of {TASKS}")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class SplitSpec:
    """Sizes for the train / memory-pool / dev split.

    The training sample has round(train_fraction * n) pairs, the dev set
    has dev_count pairs, and everything else becomes the memory pool. The
    pool must be non-empty.
    """

    train_fraction: float = 0.10
    seed: int = 42
    dev_count: int = 200

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidSpec("train_fraction must be in (0, 1)")
        if self.dev_count < 0:
            raise InvalidSpec("dev_count must be non-negative")


def _parse_record(obj, line_no: int) -> TextPair:
    if not isinstance(obj, dict):
        raise MalformedRecord(line_no, "record is not a JSON object")
    if "source" not in obj:
        raise MalformedRecord(line_no, "missing 'source' field")
    if "target" not in obj:
        raise MalformedRecord(line_no, "missing 'target' field")
    source, target = obj["source"], obj["target"]
    if not isinstance(source, str) or not isinstance(target, str):
        raise MalformedRecord(line_no, "'source' and 'target' must be strings")
    if not source.strip():
        raise MalformedRecord(line_no, "'source' is empty after trimming")
    if not target.strip():
        raise MalformedRecord(line_no, "'target' is empty after trimming")
    categories = None
    if "categories" in obj and obj["categories"] is not None:
        cats = obj["categories"]
        if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
            raise MalformedRecord(line_no, "'categories' must be an array of strings")
        categories = tuple(cats)
    return TextPair(source=source, target=target, categories=categories)


def load_dataset(path: str | Path, task: str) -> Dataset:
    """Load a JSONL dataset, preserving input order.

    Malformed lines are rejected with a MalformedRecord naming the line,
    never silently skipped. An empty file raises EmptyDataset.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    pairs: list[TextPair] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                raise MalformedRecord(line_no, "blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
            pairs.append(_parse_record(obj, line_no))
    if not pairs:
        raise EmptyDataset(f"{path} contains no records")
    return Dataset(pairs=pairs, task=task)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset back to JSONL; round-trips source/target bytes."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for pair in ds.pairs:
            obj = {"source": pair.source, "target": pair.target}
            if pair.categories is not None:
                obj["categories"] = list(pair.categories)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_queries(path: str | Path) -> list[Query]:
    """Load inference queries: JSONL objects with a required 'source' key."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    queries: list[Query] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                raise MalformedRecord(line_no, "blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict) or "source" not in obj:
                raise MalformedRecord(line_no, "missing 'source' field")
            if not isinstance(obj["source"], str) or not obj["source"].strip():
                raise MalformedRecord(line_no, "'source' must be a non-empty string")
            queries.append(Query(source=obj["source"]))
    return queries


def split_dataset(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, memory_pool, dev), deterministic given the seed.

    The three index sets are disjoint and exhaustive. Sizes:
    |train| = round(train_fraction * n), |dev| = dev_count, and the
    remainder forms the memory pool. Raises InvalidSpec when the sizes
    are infeasible (empty pool or too few pairs).
    """
    n = len(ds.pairs)
    if n < 3:
        raise InvalidSpec(f"dataset has {n} pairs; need at least 3 to split")
    train_n = int(n * spec.train_fraction + 0.5)
    if train_n < 1:
        train_n = 1
    if train_n + spec.dev_count >= n:
        raise InvalidSpec(
            f"infeasible split: train={train_n} + dev={spec.dev_count} "
            f"leaves no memory pool out of {n} pairs"
        )
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    train_idx = sorted(perm[:train_n].tolist())
    dev_idx = sorted(perm[train_n : train_n + spec.dev_count].tolist())
    pool_idx = sorted(perm[train_n + spec.dev_count :].tolist())
    make = lambda idx: Dataset(pairs=[ds.pairs[i] for i in idx], task=ds.task)
    return make(train_idx), make(pool_idx), make(dev_idx)
