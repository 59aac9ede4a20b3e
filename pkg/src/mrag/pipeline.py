"""End-to-end orchestration: training, inference, evaluation, checkpoints.

Training samples text pairs, runs the outer selection step with its
inner refinement episode, pushes experience into both replay buffers,
applies one DQN update per agent per outer iteration, and early-stops on
a fixed dev slice. Inference uses the refined database and the trained
selector only; the refiner never runs at inference.

A planted environment is included as a desk-scale learning oracle: one
partition provably holds order-preserving, reference-overlapping
memories while the others hold query-mimicking sources with scrambled
word order and garbage targets, so whole-database retrieval is fooled
while partition selection pays off.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (Agent, SeedSequencer, act_s, agent_s_step, build_state_s,
                     make_agent)
from .corpus import Dataset, TextPair
from .embed import EmbedderConfig, make_embedder
from .generator import GenRequest, Generator, build_generation_prompt
from .index import (HnswParams, PartitionedDatabase, build_partitioned_db,
                    knn_search, load_db, save_db)
from .metrics import MetricKind, corpus_bleu, delta, distinct_n
from .partition import PartitionAssignment
from .rl import (DqnConfig, Transition, dqn_train_step, net_from_dict,
                 net_to_dict)

DEV_GEN_SEED_BASE = 10_000_000  # multiples of 5: zero-noise mock outputs


@dataclass
class TrainConfig:
    m: int = 4
    k: int = 3
    metric: MetricKind = field(default_factory=lambda: MetricKind("rouge1"))
    i_max: int = 3
    j_max: int = 4
    dqn: DqnConfig = field(default_factory=DqnConfig)
    max_episodes: int = 500
    eval_every: int = 50
    patience: int = 3
    dev_slice: int = 50
    task: str = "summarization"
    candidate_temperature: float = 0.8
    max_tokens: int = 512
    seed: int = 42
    zero_reward_streak: int = 2  # outer loop stops after this many zero-reward episodes

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise ValueError("m and k must be >= 1")


@dataclass
class TrainResult:
    agent_s: Agent
    agent_r: Agent
    db: PartitionedDatabase
    history: list[tuple[int, float]]
    episodes_run: int


def infer(db: PartitionedDatabase, agent_s: Agent, x: str, embedder,
          generator: Generator, task: str = "summarization", gen_seed: int = 0,
          max_tokens: int = 512) -> str:
    """Generate a hypothesis for a query; never mutates the database.

    Builds the inference-mode state (no reference available), lets the
    trained selector pick a partition greedily, retrieves the top-1
    memory by source similarity, and makes a single generation call.
    With M=1 this reduces to plain single-database retrieval-augmented
    generation.
    """
    hypothesis, _, _ = _infer_stages(db, agent_s, x, embedder, generator,
                                     task, gen_seed, max_tokens)
    return hypothesis


def _infer_stages(db, agent_s, x, embedder, generator, task, gen_seed,
                  max_tokens) -> tuple[str, float, float]:
    t0 = time.perf_counter()
    state = build_state_s(db, embedder, x, None)
    pid = act_s(agent_s, state, greedy=True, mask_empty=True)
    partition = db.partitions[pid]
    if len(partition) == 0:
        return "", time.perf_counter() - t0, 0.0
    hits = knn_search(partition, embedder.embed(x), 1, space="source")
    memory = partition.memories[hits[0][0]]
    retrieval_s = time.perf_counter() - t0

    t1 = time.perf_counter()
    prompt = build_generation_prompt(x, memory, task)
    hypothesis = generator.generate(GenRequest(prompt=prompt, temperature=0.0,
                                               seed=gen_seed, max_tokens=max_tokens))
    generation_s = time.perf_counter() - t1
    return hypothesis, retrieval_s, generation_s


def score_dev(db, agent_s, dev_set: Dataset, embedder, generator,
              metric: MetricKind, task: str, limit: int | None = None,
              max_tokens: int = 512) -> float:
    """Mean per-example score of greedy inference over (a slice of) the dev set.

    Generation seeds are fixed multiples of five so the mock backend
    passes retrieved targets through noise-free; dev scoring then
    measures retrieval and memory quality, not sampling luck.
    """
    pairs = dev_set.pairs if limit is None else dev_set.pairs[:limit]
    if not pairs:
        return 0.0
    total = 0.0
    for idx, pair in enumerate(pairs):
        hyp = infer(db, agent_s, pair.source, embedder, generator, task,
                    gen_seed=DEV_GEN_SEED_BASE + 5 * idx, max_tokens=max_tokens)
        total += delta(metric, hyp, pair.target)
    return total / len(pairs)


def train(db: PartitionedDatabase, train_set: Dataset, dev_set: Dataset,
          embedder, generator: Generator, cfg: TrainConfig, *,
          r_policy: str = "dqn", log_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None,
          resume: bool = False) -> TrainResult:
    """The training loop; returns trained agents and the refined database.

    Pairs are sampled uniformly; each episode runs up to i_max outer
    iterations (stopping early after consecutive zero-reward refinement
    episodes), with one DQN step per agent per outer iteration once the
    buffers are warm. Every eval_every episodes the dev slice is scored
    and training stops when it fails to improve `patience` times.
    Memories refined along the way persist in the returned database.
    """
    state = _TrainerState.fresh(db, cfg)
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume requires a checkpoint_dir")
        state = _TrainerState.load(Path(checkpoint_dir), cfg)
        db = state.db

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.episode < cfg.max_episodes and not state.stopped:
            pair = train_set.pairs[int(state.rng.integers(len(train_set.pairs)))]
            outer_state = build_state_s(db, embedder, pair.source, pair.target)
            zero_streak = 0
            for i in range(cfg.i_max):
                trace, transition = agent_s_step(
                    db, pair.source, pair.target,
                    agent_s=state.agent_s, agent_r=state.agent_r,
                    embedder=embedder, generator=generator, metric=cfg.metric,
                    k=cfg.k, j_max=cfg.j_max, task=cfg.task, seeds=state.seeds,
                    rng=state.rng, state=outer_state,
                    terminal=(i == cfg.i_max - 1), train=True, r_policy=r_policy,
                    candidate_temperature=cfg.candidate_temperature,
                    max_tokens=cfg.max_tokens,
                )
                outer_state = transition.next_state
                if log_fh:
                    log_fh.write(trace.to_json() + "\n")
                if len(state.agent_s.buffer) >= cfg.dqn.batch_size:
                    dqn_train_step(state.agent_s.net, state.agent_s.buffer, cfg.dqn, state.rng)
                if r_policy == "dqn" and len(state.agent_r.buffer) >= cfg.dqn.batch_size:
                    dqn_train_step(state.agent_r.net, state.agent_r.buffer, cfg.dqn, state.rng)
                zero_streak = zero_streak + 1 if trace.r_outer == 0.0 else 0
                if zero_streak >= cfg.zero_reward_streak:
                    break
            state.episode += 1

            if cfg.eval_every and state.episode % cfg.eval_every == 0 and len(dev_set.pairs):
                score = score_dev(db, state.agent_s, dev_set, embedder, generator,
                                  cfg.metric, cfg.task, limit=cfg.dev_slice,
                                  max_tokens=cfg.max_tokens)
                state.history.append((state.episode, score))
                if score > state.best_dev + 1e-12:
                    state.best_dev = score
                    state.bad_evals = 0
                else:
                    state.bad_evals += 1
                    if state.bad_evals >= cfg.patience:
                        state.stopped = True
                if checkpoint_dir is not None:
                    state.save(Path(checkpoint_dir))
        if checkpoint_dir is not None:
            state.save(Path(checkpoint_dir))
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(agent_s=state.agent_s, agent_r=state.agent_r, db=db,
                       history=state.history, episodes_run=state.episode)


@dataclass
class _TrainerState:
    """Everything the loop needs to continue exactly where it stopped."""

    db: PartitionedDatabase
    agent_s: Agent
    agent_r: Agent
    rng: np.random.Generator
    seeds: SeedSequencer
    episode: int = 0
    best_dev: float = float("-inf")
    bad_evals: int = 0
    stopped: bool = False
    history: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, db: PartitionedDatabase, cfg: TrainConfig) -> "_TrainerState":
        return cls(
            db=db,
            agent_s=make_agent(db.m, cfg.dqn, seed=cfg.dqn.seed),
            agent_r=make_agent(cfg.k, cfg.dqn, seed=cfg.dqn.seed + 1),
            rng=np.random.default_rng(cfg.seed),
            seeds=SeedSequencer(start=cfg.seed * 7919 + 1),
        )

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        save_db(self.db, directory / "db")
        payload = {
            "episode": self.episode,
            "best_dev": self.best_dev,
            "bad_evals": self.bad_evals,
            "stopped": self.stopped,
            "history": self.history,
            "seed_counter": self.seeds.counter,
            "rng_state": self.rng.bit_generator.state,
            "agent_s": _agent_to_dict(self.agent_s),
            "agent_r": _agent_to_dict(self.agent_r),
        }
        tmp = directory / "trainer.json.tmp"
        tmp.write_text(json.dumps(payload), encoding="utf-8")
        tmp.replace(directory / "trainer.json")

    @classmethod
    def load(cls, directory: Path, cfg: TrainConfig) -> "_TrainerState":
        payload = json.loads((directory / "trainer.json").read_text(encoding="utf-8"))
        db = load_db(directory / "db")
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["rng_state"]
        state = cls(
            db=db,
            agent_s=_agent_from_dict(payload["agent_s"], cfg.dqn),
            agent_r=_agent_from_dict(payload["agent_r"], cfg.dqn),
            rng=rng,
            seeds=SeedSequencer(start=payload["seed_counter"]),
            episode=payload["episode"],
            best_dev=payload["best_dev"],
            bad_evals=payload["bad_evals"],
            stopped=payload["stopped"],
            history=[tuple(item) for item in payload["history"]],
        )
        return state


def _agent_to_dict(agent: Agent) -> dict:
    return {
        "net": net_to_dict(agent.net),
        "steps": agent.steps,
        "buffer": [
            {
                "state": t.state.tolist(),
                "action": t.action,
                "reward": t.reward,
                "next_state": None if t.next_state is None else t.next_state.tolist(),
                "terminal": t.terminal,
            }
            for t in agent.buffer._entries
        ],
        "buffer_cursor": agent.buffer._cursor,
    }


def _agent_from_dict(payload: dict, cfg: DqnConfig) -> Agent:
    from .rl import ReplayBuffer

    agent = Agent(net=net_from_dict(payload["net"]),
                  buffer=ReplayBuffer(cfg.buffer_capacity), cfg=cfg,
                  steps=payload["steps"])
    for item in payload["buffer"]:
        agent.buffer._entries.append(Transition(
            state=np.array(item["state"], dtype=np.float64),
            action=item["action"],
            reward=item["reward"],
            next_state=None if item["next_state"] is None
            else np.array(item["next_state"], dtype=np.float64),
            terminal=item["terminal"],
        ))
    agent.buffer._cursor = payload["buffer_cursor"]
    return agent


@dataclass
class EvalReport:
    per_example: list[dict]
    aggregates: dict[str, float]
    timings: dict[str, float]
    hypotheses: list[str]

    def to_json(self) -> str:
        return json.dumps({"aggregates": self.aggregates, "timings": self.timings,
                           "n_examples": len(self.per_example)}, indent=2)


def evaluate(db: PartitionedDatabase, agent_s: Agent, test_set: Dataset,
             metric_kinds: list[MetricKind], embedder, generator: Generator,
             task: str = "summarization", gen_seed_base: int = DEV_GEN_SEED_BASE,
             max_tokens: int = 512) -> EvalReport:
    """Per-example inference and scoring with separated stage timings.

    Sentence-level metrics aggregate as the mean of per-example values;
    distinct metrics are additionally computed corpus-level over all
    hypotheses. Index build time is carried over from the database build.
    """
    per_example: list[dict] = []
    hypotheses: list[str] = []
    retrieval_s = 0.0
    generation_s = 0.0
    for idx, pair in enumerate(test_set.pairs):
        hyp, r_s, g_s = _infer_stages(db, agent_s, pair.source, embedder, generator,
                                      task, gen_seed_base + 5 * idx, max_tokens)
        retrieval_s += r_s
        generation_s += g_s
        row: dict = {"index": idx, "hypothesis": hyp}
        for kind in metric_kinds:
            row[kind.kind] = delta(kind, hyp, pair.target)
        per_example.append(row)
        hypotheses.append(hyp)

    aggregates: dict[str, float] = {}
    for kind in metric_kinds:
        if kind.kind in ("distinct1", "distinct2"):
            n = 1 if kind.kind == "distinct1" else 2
            aggregates[kind.kind] = distinct_n(hypotheses, n)
        elif per_example:
            aggregates[kind.kind] = float(np.mean([row[kind.kind] for row in per_example]))
        else:
            aggregates[kind.kind] = 0.0
        if kind.kind == "bleu":
            # Corpus-level variant: clipped counts pooled before combining.
            aggregates["bleu_corpus"] = corpus_bleu(
                hypotheses, [p.target for p in test_set.pairs])
    timings = {
        "index_build_s": db.build_seconds,
        "retrieval_s": retrieval_s,
        "generation_s": generation_s,
        "generation_calls": float(len(test_set.pairs)),
    }
    return EvalReport(per_example=per_example, aggregates=aggregates,
                      timings=timings, hypotheses=hypotheses)


# -- planted environment ----------------------------------------------------

_SYLLABLES = ["ba", "de", "ki", "lo", "mu", "na", "po", "ra", "su", "ta", "ve", "zo"]

TOPIC_LENGTH = 12
PREFIX_LENGTH = 4
SLACK_WORDS = 16


def _word(i: int) -> str:
    return (_SYLLABLES[i % 12] + _SYLLABLES[(i // 12) % 12]
            + _SYLLABLES[(i // 144) % 12])


def _interleave(tokens: list[str]) -> list[str]:
    # Perfect-shuffle scramble: no adjacent pair of the original survives.
    return tokens[0::2] + tokens[1::2]


def build_planted_environment(m: int, planted: int, n_per_partition: int,
                              seed: int, n_train: int | None = None,
                              n_dev: int = 200,
                              embedder_config: EmbedderConfig | None = None,
                              hnsw_params: HnswParams | None = None,
                              ) -> tuple[PartitionedDatabase, Dataset, Dataset]:
    """Synthesize a corpus where exactly one partition pays off.

    Queries and references share per-topic vocabularies. The planted
    partition stores order-preserving topic sentences whose targets
    token-overlap the references; every other partition stores
    distractors whose sources mimic query surface form (prefix plus
    scrambled topic words, so whole-database source retrieval prefers
    them) but whose targets are disjoint-vocabulary noise. With the mock
    generator, choosing the planted partition yields strictly higher
    scores. The construction is asserted at build time and is identical
    for identical seeds.

    The embedder configuration used for the database is recorded on the
    returned database (``embedder_config``) so callers can rebuild the
    matching embedder.
    """
    if not 0 <= planted < m:
        raise ValueError(f"planted index {planted} out of range for m={m}")
    if m == 1 and planted != 0:
        raise ValueError("with m=1 the planted partition must be 0")
    n_topics = max(2 * m, 8)
    if n_per_partition < n_topics:
        raise ValueError(f"need at least {n_topics} memories per partition")
    if n_train is None:
        n_train = n_per_partition

    rng = np.random.default_rng(seed)
    n_words = PREFIX_LENGTH + n_topics * TOPIC_LENGTH + SLACK_WORDS
    words = [_word(i) for i in range(n_words)]
    prefix = words[:PREFIX_LENGTH]
    topics = [
        words[PREFIX_LENGTH + t * TOPIC_LENGTH: PREFIX_LENGTH + (t + 1) * TOPIC_LENGTH]
        for t in range(n_topics)
    ]
    slack = words[PREFIX_LENGTH + n_topics * TOPIC_LENGTH:]
    garbage = [f"gx{i}" for i in range(240)]

    def make_reference(t: int) -> str:
        tokens = list(topics[t])
        for pos in rng.choice(TOPIC_LENGTH, size=2, replace=False):
            tokens[int(pos)] = slack[int(rng.integers(len(slack)))]
        return " ".join(tokens)

    def make_example(i: int) -> TextPair:
        t = i % n_topics
        query_tokens = prefix + [topics[t][int(j)] for j in rng.permutation(TOPIC_LENGTH)]
        return TextPair(source=" ".join(query_tokens), target=make_reference(t))

    train_pairs = [make_example(i) for i in range(n_train)]
    dev_pairs = [make_example(i) for i in range(n_dev)]

    pool_pairs: list[TextPair] = []
    assignments: dict[int, frozenset[int]] = {}
    # One dominant "prime" memory per topic: its source carries the full
    # in-order topic sentence, so it wins retrieval in both the concat
    # and source spaces and is the memory refinement acts on. The rest of
    # the partition is weak same-topic filler (partial vocabulary).
    for t in range(n_topics):
        source = " ".join(topics[t] + [slack[int(rng.integers(len(slack)))]])
        pool_pairs.append(TextPair(source=source, target=make_reference(t)))
        assignments[len(pool_pairs) - 1] = frozenset([planted])
    for j in range(n_per_partition - n_topics):
        t = j % n_topics
        weak_source = topics[t][: TOPIC_LENGTH * 2 // 3]
        weak_source = weak_source + [slack[int(g)] for g in
                                     rng.integers(len(slack), size=4)]
        weak_target = topics[t][: TOPIC_LENGTH // 2] + [
            slack[int(g)] for g in rng.integers(len(slack), size=TOPIC_LENGTH // 2)]
        pool_pairs.append(TextPair(source=" ".join(weak_source),
                                   target=" ".join(weak_target)))
        assignments[len(pool_pairs) - 1] = frozenset([planted])
    for pid in range(m):
        if pid == planted:
            continue
        for j in range(n_per_partition):
            t = j % n_topics
            source_tokens = prefix + _interleave(list(topics[t]))
            source_tokens.append(slack[int(rng.integers(len(slack)))])
            target = " ".join(garbage[int(g)] for g in rng.integers(len(garbage), size=TOPIC_LENGTH))
            pool_pairs.append(TextPair(source=" ".join(source_tokens), target=target))
            assignments[len(pool_pairs) - 1] = frozenset([pid])

    pool = Dataset(pairs=pool_pairs, task="summarization")
    assignment = PartitionAssignment(assignments=assignments, m=m, strategy="planted")
    assignment.validate(len(pool_pairs))

    embedder = make_embedder(embedder_config or EmbedderConfig(dimension=128, seed=seed))
    params = hnsw_params or HnswParams(seed=seed)
    db = build_partitioned_db(pool, assignment, embedder, params)

    # The construction must strictly separate planted from noise targets.
    rouge1 = MetricKind("rouge1")
    noise_target = next(
        (pool_pairs[i].target for i, pids in assignments.items() if planted not in pids),
        None,
    )
    for pair in train_pairs + dev_pairs:
        t = _topic_of(pair, topics)
        planted_target = pool_pairs[t].target  # memory j=t is topic t by construction
        planted_score = delta(rouge1, planted_target, pair.target)
        noise_score = delta(rouge1, noise_target, pair.target) if noise_target else 0.0
        assert planted_score > noise_score, "planted construction failed to separate"

    train_set = Dataset(pairs=train_pairs, task="summarization")
    dev_set = Dataset(pairs=dev_pairs, task="summarization")
    return db, train_set, dev_set


def _topic_of(pair: TextPair, topics: list[list[str]]) -> int:
    tokens = set(pair.source.split())
    for t, topic in enumerate(topics):
        if tokens.issuperset(topic):
            return t
    raise AssertionError("example does not match any topic")


def single_partition_view(db: PartitionedDatabase, embedder) -> PartitionedDatabase:
    """Rebuild the same memory pool as one undivided partition.

    This is the whole-database baseline: identical memories, a single
    index, no partition selection. Memories keep their (partition,
    memory) ordering so the rebuild is deterministic.
    """
    pairs = [
        TextPair(source=p.memories[mid].source, target=p.memories[mid].target)
        for p in db.partitions
        for mid in sorted(p.memories)
    ]
    pool = Dataset(pairs=pairs, task="summarization")
    assignment = PartitionAssignment(
        assignments={i: frozenset([0]) for i in range(len(pairs))},
        m=1, strategy="manual",
    )
    return build_partitioned_db(pool, assignment, embedder, db.params)


def embedder_for_db(db: PartitionedDatabase):
    """Rebuild the embedder a database was built with."""
    if db.embedder_config is None:
        raise ValueError("database carries no embedder configuration")
    return make_embedder(EmbedderConfig(**db.embedder_config))
