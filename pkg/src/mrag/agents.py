"""The two cooperating agents: partition selection and memory refinement.

The selector sees one similarity per partition (its top-1 memory against
the query representation) and picks the partition to retrieve from. The
refiner sees the similarity of the current hypothesis to each candidate
in a freshly generated pool and picks a candidate to demonstrate; a
strict metric improvement commits the candidate as the memory's new
target and earns the improvement as reward. Rewards telescope: the inner
episode's total equals the net metric gain, and that total is shared
with the selector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embed import concat_pair, cosine_sim
from .generator import (CandidatePool, GenRequest, Generator,
                        build_generation_prompt, generate_candidates)
from .index import Memory, PartitionedDatabase, knn_search, update_memory_target
from .metrics import MetricKind, delta
from .rl import (DqnConfig, QNetwork, ReplayBuffer, Transition, epsilon_by_step,
                 q_forward, select_action)

EMPTY_PARTITION_SENTINEL = -1.0

TELESCOPE_TOL = 1e-9


class SeedSequencer:
    """Monotone counter handing out generation seeds; checkpointable."""

    def __init__(self, start: int = 0):
        self.counter = int(start)

    def take(self, n: int = 1) -> int:
        base = self.counter
        self.counter += n
        return base


@dataclass
class Agent:
    net: QNetwork
    buffer: ReplayBuffer
    cfg: DqnConfig
    steps: int = 0

    def epsilon(self) -> float:
        return epsilon_by_step(self.cfg, self.steps)


def make_agent(dim: int, cfg: DqnConfig, seed: int) -> Agent:
    """An agent whose state width equals its action count (dim)."""
    return Agent(
        net=QNetwork.create(dim, dim, seed=seed),
        buffer=ReplayBuffer(cfg.buffer_capacity),
        cfg=cfg,
    )


@dataclass
class DemoPair:
    """A transient demonstration (source, candidate target) for prompting."""

    source: str
    target: str


def build_state_s(db: PartitionedDatabase, embedder, x: str,
                  y: str | None = None, ef_search: int | None = None) -> np.ndarray:
    """Per-partition top-1 similarity state, length M.

    Training mode (y given): the query is the embedded source+target
    concatenation matched against stored concat embeddings. Inference
    mode (y omitted): the bare source is matched against source-only
    embeddings. Empty partitions contribute the -1 sentinel so the state
    width stays fixed.
    """
    if y is not None:
        query = embedder.embed(concat_pair(x, y))
        space = "concat"
    else:
        query = embedder.embed(x)
        space = "source"
    state = np.full(db.m, EMPTY_PARTITION_SENTINEL, dtype=np.float64)
    for pid, partition in enumerate(db.partitions):
        hits = knn_search(partition, query, 1, ef_search=ef_search, space=space)
        if hits:
            state[pid] = hits[0][1]
    return state


def act_s(agent: Agent, state: np.ndarray, rng: np.random.Generator | None = None,
          greedy: bool = False, mask_empty: bool = False) -> int:
    """Partition choice: epsilon-greedy while training, pure greedy at inference.

    ``mask_empty`` restricts the greedy argmax to partitions that
    actually hold memories (sentinel entries are skipped).
    """
    if greedy:
        q = q_forward(agent.net, state)
        if mask_empty:
            live = state > EMPTY_PARTITION_SENTINEL
            if live.any():
                q = np.where(live, q, -np.inf)
        return int(np.argmax(q))
    if rng is None:
        raise ValueError("training-mode action selection needs an rng")
    return select_action(agent.net, state, agent.epsilon(), rng)


def build_state_r(h: str, pool: CandidatePool, embedder) -> np.ndarray:
    """Similarity of the current hypothesis to each pool candidate, in order."""
    h_vec = embedder.embed(h)
    return np.array(
        [cosine_sim(h_vec, embedder.embed(c)) for c in pool.candidates],
        dtype=np.float64,
    )


@dataclass
class EpisodeTrace:
    """Ordered record of one refinement episode.

    Invariants (checked by validate): inner rewards are non-negative and
    sum to final_delta - initial_delta; the shared outer reward equals
    that sum; the hypothesis score sequence is non-decreasing.
    """

    partition: int
    initial_delta: float
    final_delta: float
    r_inner: list[float]
    r_outer: float
    actions: list[int]
    hypotheses: list[str]
    deltas: list[float] = field(default_factory=list)

    def validate(self) -> None:
        total = sum(self.r_inner)
        if abs(total - (self.final_delta - self.initial_delta)) > TELESCOPE_TOL:
            raise AssertionError(
                f"telescoping violated: sum(r)={total!r} vs "
                f"{self.final_delta - self.initial_delta!r}")
        if abs(self.r_outer - total) > TELESCOPE_TOL:
            raise AssertionError(f"shared reward {self.r_outer!r} != inner sum {total!r}")
        if any(r < 0.0 for r in self.r_inner):
            raise AssertionError("negative inner reward")
        for earlier, later in zip(self.deltas, self.deltas[1:]):
            if later < earlier - TELESCOPE_TOL:
                raise AssertionError("hypothesis score decreased")

    def to_json(self) -> str:
        return json.dumps({
            "partition": self.partition,
            "initial_delta": self.initial_delta,
            "final_delta": self.final_delta,
            "r_inner": self.r_inner,
            "r_outer": self.r_outer,
            "actions": self.actions,
            "hypotheses": self.hypotheses,
            "deltas": self.deltas,
        }, ensure_ascii=False)


def _empty_trace(partition: int) -> EpisodeTrace:
    return EpisodeTrace(partition=partition, initial_delta=0.0, final_delta=0.0,
                        r_inner=[], r_outer=0.0, actions=[], hypotheses=[],
                        deltas=[])


def agent_r_episode(db: PartitionedDatabase, m: int, memory: Memory, x: str, y: str,
                    h0: str, *, agent_r: Agent, embedder, generator: Generator,
                    metric: MetricKind, k: int, j_max: int, task: str,
                    seeds: SeedSequencer, rng: np.random.Generator,
                    candidate_temperature: float = 0.8, train: bool = True,
                    policy: str = "dqn", max_tokens: int = 512,
                    pool_fn=None) -> EpisodeTrace:
    """The inner boosting loop over a retrieved memory.

    Each step samples a fresh K-candidate pool for the memory's source,
    picks a candidate, demonstrates it to produce a new hypothesis, and
    commits the candidate as the memory's target exactly when the metric
    strictly improves (earning the improvement as reward, else 0). The
    database mutates only through committed improvements; on error the
    episode aborts with no further mutation.

    ``policy`` is "dqn" (learned, epsilon-greedy during training) or
    "greedy" (fixed rule: argmax of the state similarities).
    """
    if pool_fn is None:
        def pool_fn(source: str) -> CandidatePool:
            return generate_candidates(generator, source, k, task, seeds.take(k),
                                       temperature=candidate_temperature,
                                       max_tokens=max_tokens)

    h = h0
    delta_h = delta(metric, h, y)
    trace = EpisodeTrace(partition=m, initial_delta=delta_h, final_delta=delta_h,
                         r_inner=[], r_outer=0.0, actions=[], hypotheses=[h],
                         deltas=[delta_h])
    pool = pool_fn(memory.source)
    for j in range(1, j_max + 1):
        state = build_state_r(h, pool, embedder)
        if policy == "greedy":
            action = int(np.argmax(state))
        else:
            action = select_action(agent_r.net, state, agent_r.epsilon() if train else 0.0, rng)
            if train:
                agent_r.steps += 1
        candidate = pool.candidates[action]
        prompt = build_generation_prompt(x, DemoPair(memory.source, candidate), task)
        h_new = generator.generate(GenRequest(prompt=prompt, temperature=0.0,
                                              seed=seeds.take(1), max_tokens=max_tokens))
        delta_new = delta(metric, h_new, y)
        if delta_new > delta_h:
            reward = delta_new - delta_h
            update_memory_target(db, m, memory.id, candidate, embedder)
            h = h_new
            delta_h = delta_new
        else:
            reward = 0.0
        new_pool = pool_fn(memory.source)
        next_state = build_state_r(h, new_pool, embedder)
        if train and policy == "dqn":
            agent_r.buffer.push(Transition(state=state, action=action, reward=reward,
                                           next_state=next_state, terminal=(j == j_max)))
        pool = new_pool
        trace.r_inner.append(reward)
        trace.actions.append(action)
        trace.hypotheses.append(h)
        trace.deltas.append(delta_h)
    trace.final_delta = delta_h
    trace.r_outer = sum(trace.r_inner)
    return trace


def agent_s_step(db: PartitionedDatabase, x: str, y: str, *, agent_s: Agent,
                 agent_r: Agent, embedder, generator: Generator, metric: MetricKind,
                 k: int, j_max: int, task: str, seeds: SeedSequencer,
                 rng: np.random.Generator, state: np.ndarray | None = None,
                 terminal: bool = False, train: bool = True, r_policy: str = "dqn",
                 candidate_temperature: float = 0.8,
                 max_tokens: int = 512) -> tuple[EpisodeTrace, Transition]:
    """One outer iteration: pick a partition, retrieve, refine, share reward.

    The refinement episode's cumulative reward becomes the selector's
    reward, and the next outer state is rebuilt after any memory updates.
    The trace invariants are asserted on every episode.
    """
    if state is None:
        state = build_state_s(db, embedder, x, y)
    action = act_s(agent_s, state, rng=rng, greedy=not train)
    if train:
        agent_s.steps += 1
    partition = db.partitions[action]

    if len(partition) == 0:
        trace = _empty_trace(action)
    else:
        query = embedder.embed(concat_pair(x, y))
        top = knn_search(partition, query, 1)
        memory = partition.memories[top[0][0]]
        prompt = build_generation_prompt(x, memory, task)
        h0 = generator.generate(GenRequest(prompt=prompt, temperature=0.0,
                                           seed=seeds.take(1), max_tokens=max_tokens))
        trace = agent_r_episode(
            db, action, memory, x, y, h0,
            agent_r=agent_r, embedder=embedder, generator=generator, metric=metric,
            k=k, j_max=j_max, task=task, seeds=seeds, rng=rng,
            candidate_temperature=candidate_temperature, train=train,
            policy=r_policy, max_tokens=max_tokens,
        )
    trace.validate()

    next_state = build_state_s(db, embedder, x, y)
    transition = Transition(state=state, action=action, reward=trace.r_outer,
                            next_state=next_state, terminal=terminal)
    if train:
        agent_s.buffer.push(transition)
    return trace, transition
