"""Per-partition approximate nearest-neighbor search and the memory store.

Each partition holds id-addressed memories and two hierarchical
navigable small-world graphs: one over the concatenated source+target
embeddings (training-time state and retrieval) and one over source-only
embeddings (inference-time retrieval, where targets are unknown). An
exhaustive scan is kept alongside as the exact oracle; searches with an
effective candidate width covering the whole partition use it directly,
so ef_search at or above the partition size is exact.

Similarity is cosine over unit vectors, computed as a dot product. Ties
break by ascending memory id everywhere. Search is concurrent-read safe
once built; updates require exclusive access to the affected partition.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embed as embed_mod
from .corpus import Dataset

DEFAULT_MAX_CONNECTIONS = 16


class UnknownId(KeyError):
    pass


@dataclass(frozen=True)
class HnswParams:
    max_connections: int = DEFAULT_MAX_CONNECTIONS
    ef_construction: int = 100
    ef_search: int = 64
    level_lambda: float | None = None  # default 1 / ln(max_connections)
    seed: int = 0

    def __post_init__(self):
        if self.max_connections < 1:
            raise ValueError("max_connections must be positive")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")
        if self.ef_construction < self.max_connections:
            raise ValueError("ef_construction must be >= max_connections")

    @property
    def resolved_level_lambda(self) -> float:
        if self.level_lambda is not None:
            return self.level_lambda
        return 1.0 / math.log(self.max_connections)


class HnswGraph:
    """Layered small-world graph over externally-assigned integer ids.

    Every node lives on layers 0..level; the base layer contains all
    nodes. Per-node degree is capped at max_connections on layers >= 1
    and 2 * max_connections on the base layer. Construction is
    deterministic given the seed (randomness enters only through level
    draws). Deletion removes the node and its incident edges; the
    delete-and-reinsert pattern implements memory updates.
    """

    def __init__(self, dim: int, params: HnswParams, seed: int | None = None):
        self.dim = dim
        self.params = params
        self.rng = np.random.default_rng(params.seed if seed is None else seed)
        self._levels: dict[int, int] = {}
        self._neighbors: dict[int, list[list[int]]] = {}
        self.entry_point: int | None = None
        self.max_level: int = -1
        self._matrix = np.zeros((0, dim), dtype=np.float64)

    def __len__(self) -> int:
        return len(self._levels)

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._levels

    @property
    def node_ids(self) -> list[int]:
        return sorted(self._levels)

    def vector(self, node_id: int) -> np.ndarray:
        if node_id not in self._levels:
            raise UnknownId(node_id)
        return self._matrix[node_id]

    def level_of(self, node_id: int) -> int:
        return self._levels[node_id]

    def neighbors_at(self, node_id: int, layer: int) -> list[int]:
        lists = self._neighbors[node_id]
        return lists[layer] if layer < len(lists) else []

    # -- construction ------------------------------------------------------

    def _draw_level(self) -> int:
        u = 1.0 - self.rng.random()  # in (0, 1]
        return int(-math.log(u) * self.params.resolved_level_lambda)

    def _ensure_row(self, node_id: int, vec: np.ndarray) -> None:
        if node_id >= self._matrix.shape[0]:
            grown = np.zeros((node_id + 1, self.dim), dtype=np.float64)
            grown[: self._matrix.shape[0]] = self._matrix
            self._matrix = grown
        self._matrix[node_id] = vec

    def _sims(self, query: np.ndarray, ids: list[int]) -> np.ndarray:
        return self._matrix[ids] @ query

    def _search_layer(self, query: np.ndarray, entry_ids: list[int], ef: int,
                      layer: int) -> list[tuple[float, int]]:
        """Best-first expansion; returns (distance, id) ascending.

        Distance is -similarity; ties resolve by id so runs are
        reproducible bit-for-bit.
        """
        dists = -self._sims(query, entry_ids)
        visited = set(entry_ids)
        candidates: list[tuple[float, int]] = []
        best: list[tuple[float, int]] = []  # max-heap via negated distance
        for d, node in zip(dists, entry_ids):
            heapq.heappush(candidates, (float(d), node))
            heapq.heappush(best, (-float(d), node))
        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(best) >= ef and dist > -best[0][0]:
                break
            fresh = [n for n in self.neighbors_at(node, layer) if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for d, nbr in zip(-self._sims(query, fresh), fresh):
                d = float(d)
                if len(best) < ef:
                    heapq.heappush(candidates, (d, nbr))
                    heapq.heappush(best, (-d, nbr))
                elif d < -best[0][0]:
                    heapq.heappush(candidates, (d, nbr))
                    heapq.heappushpop(best, (-d, nbr))
        out = sorted(((-d, n) for d, n in best), key=lambda t: (t[0], t[1]))
        return out

    def _select_neighbors(self, candidates: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity-aware selection: keep candidates closer to the query
        than to anything already selected, then refill with the nearest
        pruned ones."""
        if len(candidates) <= m:
            return [n for _, n in candidates]
        ids = [n for _, n in candidates]
        query_dists = [d for d, _ in candidates]
        vecs = self._matrix[ids]
        pairwise = -(vecs @ vecs.T)  # candidate-to-candidate distances
        min_to_selected = np.full(len(ids), np.inf)
        selected: list[int] = []
        pruned: list[int] = []
        for pos in range(len(ids)):
            if len(selected) >= m:
                break
            if selected and query_dists[pos] >= min_to_selected[pos]:
                pruned.append(pos)
                continue
            selected.append(pos)
            np.minimum(min_to_selected, pairwise[:, pos], out=min_to_selected)
        for pos in pruned:
            if len(selected) >= m:
                break
            selected.append(pos)
        return [ids[pos] for pos in selected]

    def _cap(self, layer: int) -> int:
        m = self.params.max_connections
        return 2 * m if layer == 0 else m

    def insert(self, node_id: int, vec: np.ndarray) -> None:
        if node_id in self._levels:
            raise ValueError(f"node {node_id} already present")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise embed_mod.DimensionMismatch(f"vector shape {vec.shape}, expected ({self.dim},)")
        level = self._draw_level()
        self._ensure_row(node_id, vec)
        self._levels[node_id] = level
        self._neighbors[node_id] = [[] for _ in range(level + 1)]

        if self.entry_point is None:
            self.entry_point = node_id
            self.max_level = level
            return

        entry = [self.entry_point]
        for layer in range(self.max_level, level, -1):
            found = self._search_layer(vec, entry, 1, layer)
            entry = [found[0][1]]

        m = self.params.max_connections
        for layer in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(vec, entry, self.params.ef_construction, layer)
            neighbors = self._select_neighbors(found, m)
            self._neighbors[node_id][layer] = list(neighbors)
            for nbr in neighbors:
                nbr_list = self._neighbors[nbr][layer]
                nbr_list.append(node_id)
                cap = self._cap(layer)
                if len(nbr_list) > cap:
                    nbr_vec = self._matrix[nbr]
                    cands = sorted(
                        ((float(d), n) for d, n in zip(-self._sims(nbr_vec, nbr_list), nbr_list)),
                        key=lambda t: (t[0], t[1]),
                    )
                    self._neighbors[nbr][layer] = self._select_neighbors(cands, cap)
            entry = [n for _, n in found]

        if level > self.max_level:
            self.max_level = level
            self.entry_point = node_id

    def delete(self, node_id: int) -> None:
        if node_id not in self._levels:
            raise UnknownId(node_id)
        level = self._levels.pop(node_id)
        self._neighbors.pop(node_id)
        for other, lists in self._neighbors.items():
            for layer in range(min(level, len(lists) - 1) + 1):
                if node_id in lists[layer]:
                    lists[layer].remove(node_id)
        if self.entry_point == node_id:
            if not self._levels:
                self.entry_point = None
                self.max_level = -1
            else:
                top = max(self._levels.values())
                self.entry_point = min(n for n, lv in self._levels.items() if lv == top)
                self.max_level = top

    # -- search ------------------------------------------------------------

    def exact_search(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        """Exhaustive scan; exact ranking, ties by ascending id."""
        ids = self.node_ids
        if not ids:
            return []
        sims = self._sims(np.asarray(query, dtype=np.float64), ids)
        order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
        return [(ids[i], float(sims[i])) for i in order[:k]]

    def search(self, query: np.ndarray, k: int, ef: int | None = None) -> list[tuple[int, float]]:
        """Approximate top-k by cosine similarity, descending.

        Falls back to the exact scan when the candidate width covers the
        whole graph (ef or k >= node count), making those calls exact.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self._levels)
        if n == 0:
            return []
        ef = self.params.ef_search if ef is None else ef
        ef_eff = max(ef, k)
        if ef_eff >= n:
            return self.exact_search(query, k)
        query = np.asarray(query, dtype=np.float64)
        entry = [self.entry_point]
        for layer in range(self.max_level, 0, -1):
            found = self._search_layer(query, entry, 1, layer)
            entry = [found[0][1]]
        found = self._search_layer(query, entry, ef_eff, 0)
        return [(node, -dist) for dist, node in found[:k]]

    # -- integrity / io ----------------------------------------------------

    def check_invariants(self) -> None:
        """Raises AssertionError when structural invariants are violated."""
        for node, level in self._levels.items():
            lists = self._neighbors[node]
            assert len(lists) == level + 1, f"node {node}: layer lists != level+1"
            for layer, nbrs in enumerate(lists):
                assert len(nbrs) <= self._cap(layer), (
                    f"node {node} layer {layer}: degree {len(nbrs)} over cap"
                )
                assert len(set(nbrs)) == len(nbrs), f"node {node}: duplicate edges"
                for nbr in nbrs:
                    assert nbr in self._levels, f"edge to missing node {nbr}"
                    assert self._levels[nbr] >= layer, f"edge to node below layer {layer}"
        if self._levels:
            assert self.entry_point in self._levels
            assert self.max_level == max(self._levels.values())

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "entry_point": self.entry_point,
            "max_level": self.max_level,
            "levels": {str(n): lv for n, lv in self._levels.items()},
            "neighbors": {str(n): lists for n, lists in self._neighbors.items()},
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, payload: dict, params: HnswParams,
                  vectors: dict[int, np.ndarray]) -> "HnswGraph":
        graph = cls(payload["dim"], params)
        graph.entry_point = payload["entry_point"]
        graph.max_level = payload["max_level"]
        graph._levels = {int(n): lv for n, lv in payload["levels"].items()}
        graph._neighbors = {
            int(n): [list(layer) for layer in lists]
            for n, lists in payload["neighbors"].items()
        }
        graph.rng.bit_generator.state = payload["rng_state"]
        for node_id, vec in vectors.items():
            graph._ensure_row(node_id, np.asarray(vec, dtype=np.float64))
        return graph


@dataclass
class Memory:
    """One stored (source, target) pair; the target is mutable via refinement."""

    id: int
    source: str
    target: str
    embedding: np.ndarray
    source_embedding: np.ndarray


@dataclass
class Partition:
    id: int
    memories: dict[int, Memory]
    index: HnswGraph
    source_index: HnswGraph

    def __len__(self) -> int:
        return len(self.memories)


@dataclass
class PartitionedDatabase:
    partitions: list[Partition]
    params: HnswParams
    strategy: str = "manual"
    embedder_config: dict | None = None
    build_seconds: float = 0.0
    partition_build_seconds: list[float] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.partitions)


def build_partitioned_db(pool: Dataset, assignment, embedder,
                         params: HnswParams) -> PartitionedDatabase:
    """Embed the memory pool and build one indexed partition per id.

    ``assignment`` maps pool item index -> set of partition ids; an item
    assigned to several partitions appears in each with an independent
    local memory id. Each partition's graphs are built independently and
    deterministically given the seed.
    """
    m = assignment.m
    members: list[list[int]] = [[] for _ in range(m)]
    for item_idx in sorted(assignment.assignments):
        for pid in sorted(assignment.assignments[item_idx]):
            members[pid].append(item_idx)

    partitions: list[Partition] = []
    per_partition_times: list[float] = []
    total_start = time.perf_counter()
    for pid in range(m):
        start = time.perf_counter()
        concat_graph = HnswGraph(embedder.dimension, params,
                                 seed=_partition_seed(params.seed, pid, 0))
        source_graph = HnswGraph(embedder.dimension, params,
                                 seed=_partition_seed(params.seed, pid, 1))
        memories: dict[int, Memory] = {}
        for local_id, item_idx in enumerate(members[pid]):
            pair = pool.pairs[item_idx]
            emb = embedder.embed(embed_mod.concat_pair(pair.source, pair.target))
            src_emb = embedder.embed(pair.source)
            memories[local_id] = Memory(
                id=local_id, source=pair.source, target=pair.target,
                embedding=emb, source_embedding=src_emb,
            )
            concat_graph.insert(local_id, emb)
            source_graph.insert(local_id, src_emb)
        partitions.append(Partition(id=pid, memories=memories,
                                    index=concat_graph, source_index=source_graph))
        per_partition_times.append(time.perf_counter() - start)

    strategy = getattr(assignment, "strategy", "manual")
    config = getattr(embedder, "config", None)
    db = PartitionedDatabase(
        partitions=partitions,
        params=params,
        strategy=strategy,
        embedder_config=_config_dict(config),
        build_seconds=time.perf_counter() - total_start,
        partition_build_seconds=per_partition_times,
    )
    return db


def _partition_seed(base_seed: int, pid: int, stream: int) -> int:
    seq = np.random.SeedSequence([int(base_seed), int(pid), int(stream)])
    return int(seq.generate_state(1)[0])


def _config_dict(config) -> dict | None:
    if config is None:
        return None
    from dataclasses import asdict

    return asdict(config)


def knn_search(p: Partition, query: np.ndarray, k: int,
               ef_search: int | None = None, space: str = "concat") -> list[tuple[int, float]]:
    """Approximate top-k (memory id, similarity), similarity descending.

    Returns at most min(k, |partition|) results; an empty partition
    yields an empty list. ``space`` selects the concat or source graph.
    """
    graph = p.index if space == "concat" else p.source_index
    return graph.search(query, k, ef=ef_search)


def brute_force_knn(p: Partition, query: np.ndarray, k: int,
                    space: str = "concat") -> list[tuple[int, float]]:
    """Exact oracle: exhaustive scan, ties broken by ascending memory id."""
    graph = p.index if space == "concat" else p.source_index
    return graph.exact_search(query, k)


def update_memory_target(db: PartitionedDatabase, partition_id: int, memory_id: int,
                         new_target: str, embedder) -> None:
    """Replace a memory's target and re-link its concat-graph entry.

    The concat embedding is recomputed from the unchanged source and the
    new target; the node is deleted and reinserted so subsequent searches
    see the new position. The source graph is untouched.
    """
    if not 0 <= partition_id < len(db.partitions):
        raise UnknownId(partition_id)
    partition = db.partitions[partition_id]
    if memory_id not in partition.memories:
        raise UnknownId(memory_id)
    memory = partition.memories[memory_id]
    memory.target = new_target
    memory.embedding = embedder.embed(embed_mod.concat_pair(memory.source, new_target))
    partition.index.delete(memory_id)
    partition.index.insert(memory_id, memory.embedding)


def db_fingerprint(db: PartitionedDatabase) -> str:
    """Content hash of memories plus graph structure; update-sensitive."""
    digest = hashlib.sha256()
    for p in db.partitions:
        for mid in sorted(p.memories):
            mem = p.memories[mid]
            digest.update(f"{p.id}:{mid}:{mem.source}\x00{mem.target}".encode("utf-8"))
            digest.update(np.ascontiguousarray(mem.embedding).tobytes())
        for graph in (p.index, p.source_index):
            for node in graph.node_ids:
                digest.update(
                    json.dumps([node, graph.level_of(node),
                                graph._neighbors[node]]).encode("utf-8")
                )
    return digest.hexdigest()


def save_db(db: PartitionedDatabase, directory: str | Path) -> None:
    """Serialize to a directory: manifest + per-partition memories and graphs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    from dataclasses import asdict

    manifest = {
        "m": db.m,
        "strategy": db.strategy,
        "hnsw_params": asdict(db.params),
        "embedder_config": db.embedder_config,
        "build_seconds": db.build_seconds,
        "partition_build_seconds": db.partition_build_seconds,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    for p in db.partitions:
        lines = []
        for mid in sorted(p.memories):
            mem = p.memories[mid]
            lines.append(json.dumps({
                "id": mem.id,
                "source": mem.source,
                "target": mem.target,
                "embedding": mem.embedding.tolist(),
                "source_embedding": mem.source_embedding.tolist(),
            }, ensure_ascii=False))
        (directory / f"partition_{p.id:03d}.jsonl").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        (directory / f"graph_{p.id:03d}.json").write_text(
            json.dumps(p.index.to_dict()), encoding="utf-8")
        (directory / f"source_graph_{p.id:03d}.json").write_text(
            json.dumps(p.source_index.to_dict()), encoding="utf-8")


def load_db(directory: str | Path) -> PartitionedDatabase:
    """Reload a serialized database; search results match the original."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    params = HnswParams(**manifest["hnsw_params"])
    partitions: list[Partition] = []
    for pid in range(manifest["m"]):
        memories: dict[int, Memory] = {}
        mem_path = directory / f"partition_{pid:03d}.jsonl"
        for line in mem_path.read_text(encoding="utf-8").splitlines():
            obj = json.loads(line)
            memories[obj["id"]] = Memory(
                id=obj["id"],
                source=obj["source"],
                target=obj["target"],
                embedding=np.array(obj["embedding"], dtype=np.float64),
                source_embedding=np.array(obj["source_embedding"], dtype=np.float64),
            )
        concat_payload = json.loads((directory / f"graph_{pid:03d}.json").read_text("utf-8"))
        source_payload = json.loads(
            (directory / f"source_graph_{pid:03d}.json").read_text("utf-8"))
        index = HnswGraph.from_dict(
            concat_payload, params, {mid: m.embedding for mid, m in memories.items()})
        source_index = HnswGraph.from_dict(
            source_payload, params, {mid: m.source_embedding for mid, m in memories.items()})
        partitions.append(Partition(id=pid, memories=memories,
                                    index=index, source_index=source_index))
    return PartitionedDatabase(
        partitions=partitions,
        params=params,
        strategy=manifest["strategy"],
        embedder_config=manifest.get("embedder_config"),
        build_seconds=manifest.get("build_seconds", 0.0),
        partition_build_seconds=manifest.get("partition_build_seconds", []),
    )
