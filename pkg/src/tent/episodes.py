"""N-way K-shot meta-task sampling with order-independent seeded substreams."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from tent.graph import Graph

MAX_REDRAWS = 100

# role tags mixed into the seed sequence of every task
ROLE_CLASSES, ROLE_SUPPORT, ROLE_QUERY = 0, 1, 2


class EpisodeInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 5
    query_size: int = 10
    train_n_way: int = 5
    train_k_shot: int = 5

    def __post_init__(self):
        if self.n_way < 2 or self.train_n_way < 2:
            raise ValueError("n_way and train_n_way must be >= 2")
        if self.k_shot < 1 or self.train_k_shot < 1 or self.query_size < 1:
            raise ValueError("k_shot, train_k_shot and query_size must be >= 1")

    @property
    def test_shape(self) -> tuple[int, int, int]:
        return self.n_way, self.k_shot, self.query_size

    @property
    def train_shape(self) -> tuple[int, int, int]:
        return self.train_n_way, self.train_k_shot, self.query_size


@dataclass(frozen=True)
class MetaTask:
    """One episode. ``support``/``query`` hold (node id, class slot) pairs."""

    support: tuple[tuple[int, int], ...]
    query: tuple[tuple[int, int], ...]
    class_map: tuple[int, ...]

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def k_shot(self) -> int:
        return len(self.support) // len(self.class_map)

    def support_nodes(self, slot: int | None = None) -> np.ndarray:
        return np.array([v for v, s in self.support if slot is None or s == slot], dtype=np.int64)

    def query_nodes(self) -> np.ndarray:
        return np.array([v for v, _ in self.query], dtype=np.int64)

    def query_slots(self) -> np.ndarray:
        return np.array([s for _, s in self.query], dtype=np.int64)

    def to_json(self, task_index: int | None = None) -> dict:
        obj = {"class_map": list(self.class_map), "support": [list(p) for p in self.support],
               "query": [list(p) for p in self.query]}
        if task_index is not None:
            obj = {"task_index": task_index, **obj}
        return obj


class TaskRngs(NamedTuple):
    classes: np.random.Generator
    support: np.random.Generator
    query: np.random.Generator


def task_rngs(base_seed: int, index: int, stream: int = 0) -> TaskRngs:
    """Independent Philox generators for one task, keyed by (stream, seed, index, role)."""

    def make(role):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([stream, base_seed, index, role])))

    return TaskRngs(make(ROLE_CLASSES), make(ROLE_SUPPORT), make(ROLE_QUERY))


def sample_meta_task(
    g: Graph,
    split_classes: Iterable[int],
    shape: Sequence[int],
    rng: np.random.Generator | TaskRngs,
) -> MetaTask:
    """Draw N classes, K support nodes per class and Q class-balanced queries.

    Queries are assigned to slots round-robin (0, 1, ..., N-1, 0, ...). A class
    draw containing a class with fewer than ``K + ceil(Q/N)`` labeled nodes is
    rejected and redrawn.
    """
    n, k, q = shape
    if not isinstance(rng, TaskRngs):
        rng = TaskRngs(rng, rng, rng)
    classes = np.array(sorted(set(split_classes)), dtype=np.int64)
    if classes.size < n:
        raise EpisodeInfeasibleError(f"{classes.size} classes available for a {n}-way task")
    need = k + math.ceil(q / n)
    deficient: set[int] = set()
    for _ in range(MAX_REDRAWS):
        drawn = rng.classes.choice(classes, size=n, replace=False)
        pools = [g.nodes_of_class(int(c)) for c in drawn]
        short = [int(c) for c, p in zip(drawn, pools) if p.size < need]
        if not short:
            break
        deficient.update(short)
    else:
        raise EpisodeInfeasibleError(
            f"no feasible {n}-way draw after {MAX_REDRAWS} tries; classes with < {need} labeled nodes: {sorted(deficient)}"
        )

    per_slot_q = [len(range(s, q, n)) for s in range(n)]
    support_by_slot, query_by_slot = [], []
    for slot, pool in enumerate(pools):
        picked = rng.support.choice(pool, size=k, replace=False)
        rest = np.setdiff1d(pool, picked)
        support_by_slot.append(picked)
        query_by_slot.append(rng.query.choice(rest, size=per_slot_q[slot], replace=False))

    support = tuple((int(v), slot) for slot, vs in enumerate(support_by_slot) for v in vs)
    query = tuple((int(query_by_slot[i % n][i // n]), i % n) for i in range(q))
    return MetaTask(support, query, tuple(int(c) for c in drawn))


def task_at(g: Graph, classes, shape, base_seed: int, index: int, stream: int = 0) -> MetaTask:
    return sample_meta_task(g, classes, shape, task_rngs(base_seed, index, stream))


def episode_stream(
    g: Graph, classes, shape, base_seed: int, count: int, stream: int = 0
) -> Iterator[MetaTask]:
    """Lazily yield ``count`` tasks; task ``i`` depends only on (stream, base_seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    for i in range(count):
        yield task_at(g, classes, shape, base_seed, i, stream)


def stream_fingerprint(tasks: Iterable[MetaTask]) -> str:
    h = hashlib.sha256()
    for t in tasks:
        h.update(json.dumps(t.to_json(), separators=(",", ":")).encode())
    return h.hexdigest()[:16]


def dump_tasks(path, tasks: Iterable[MetaTask]) -> None:
    """Write tasks as JSON lines for debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, t in enumerate(tasks):
            fh.write(json.dumps(t.to_json(i)) + "\n")
