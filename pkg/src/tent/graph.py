"""Attributed graph storage in CSR form, file I/O and neighborhood queries."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"TENTF1"


class GraphFormatError(ValueError):
    """A graph input file does not follow its declared format."""


class GraphIntegrityError(ValueError):
    """Graph data is well-formed but inconsistent (dangling ids, empty graph)."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected attributed graph.

    Adjacency is stored as CSR row pointers (``edge_offsets``) and sorted
    column indices (``edge_targets``); every undirected edge appears once
    in each direction. ``labels`` uses ``-1`` for unlabeled nodes.
    """

    node_count: int
    edge_offsets: np.ndarray
    edge_targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        for arr in (self.edge_offsets, self.edge_targets, self.features, self.labels):
            arr.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return int(self.edge_targets.shape[0]) // 2

    def degree(self, v: int) -> int:
        return int(self.edge_offsets[v + 1] - self.edge_offsets[v])

    def edge_array(self) -> np.ndarray:
        """All directed edges as an (2m, 2) array of (source, target)."""
        src = np.repeat(np.arange(self.node_count), np.diff(self.edge_offsets))
        return np.stack([src, self.edge_targets], axis=1)

    def classes(self) -> np.ndarray:
        """Sorted distinct label values, excluding the unlabeled marker."""
        return np.unique(self.labels[self.labels >= 0])

    def nodes_of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True, eq=False)
class Subgraph:
    """A local view of a graph.

    ``nodes[i]`` is the original id of local node ``i`` (``-1`` marks a
    virtual node with no original id). Adjacency is CSR over local indices.
    ``features`` may be ``None`` when the caller supplies its own rows.
    """

    nodes: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray
    centroid_index: int
    features: np.ndarray | None = None
    virtual_edges: int = 0

    def __post_init__(self):
        if not 0 <= self.centroid_index < len(self.nodes):
            raise ValueError(f"centroid_index {self.centroid_index} outside [0, {len(self.nodes)})")

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    def edge_pairs(self) -> set[tuple[int, int]]:
        """Directed local edge pairs."""
        src = np.repeat(np.arange(self.size), np.diff(self.offsets))
        return set(zip(src.tolist(), self.targets.tolist()))


@dataclass(frozen=True)
class ClassSplit:
    base: tuple[int, ...]
    val: tuple[int, ...]
    novel: tuple[int, ...]

    def __post_init__(self):
        b, v, n = set(self.base), set(self.val), set(self.novel)
        if b & v or b & n or v & n:
            raise ValueError("class split sets must be pairwise disjoint")
        if not (b and v and n):
            raise ValueError("every class split set must be non-empty")

    def to_json(self) -> dict:
        return {"base": list(self.base), "val": list(self.val), "novel": list(self.novel)}

    @classmethod
    def from_json(cls, obj: dict) -> "ClassSplit":
        try:
            return cls(*(tuple(int(c) for c in obj[k]) for k in ("base", "val", "novel")))
        except KeyError as exc:
            raise GraphFormatError(f"split manifest missing key {exc}") from None

    def check_against(self, g: Graph, n_train: int = 1, n_test: int = 1) -> None:
        observed = set(g.classes().tolist())
        missing = (set(self.base) | set(self.val) | set(self.novel)) - observed
        if missing:
            raise GraphIntegrityError(f"split references unobserved classes {sorted(missing)}")
        if len(self.base) < n_train:
            raise ValueError(f"{len(self.base)} base classes cannot support {n_train}-way training")
        if len(self.novel) < n_test:
            raise ValueError(f"{len(self.novel)} novel classes cannot support {n_test}-way test")


def from_edges(
    node_count: int,
    edges: Iterable[Sequence[int]] | np.ndarray,
    features: np.ndarray | None = None,
    labels: Sequence[int] | np.ndarray | None = None,
) -> Graph:
    """Build a validated graph: edges symmetrized, deduplicated, self-loops dropped."""
    if node_count <= 0:
        raise GraphIntegrityError("graph has no nodes")
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= node_count):
        bad = e[(e < 0).any(axis=1) | (e >= node_count).any(axis=1)][0]
        raise GraphIntegrityError(f"edge {tuple(bad.tolist())} references a node outside [0, {node_count})")
    e = e[e[:, 0] != e[:, 1]]
    e = np.concatenate([e, e[:, ::-1]], axis=0)
    # unique on a packed key gives a (source, target)-sorted edge list
    key = np.unique(e[:, 0] * node_count + e[:, 1])
    src, dst = key // node_count, key % node_count
    offsets = np.zeros(node_count + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)
    if features is None:
        features = np.zeros((node_count, 0))
    features = np.array(features, dtype=np.float64, order="C")
    if features.shape[0] != node_count:
        raise GraphIntegrityError(f"{features.shape[0]} feature rows for {node_count} nodes")
    if labels is None:
        labels = np.full(node_count, -1)
    labels = np.array(labels, dtype=np.int64)
    if labels.shape != (node_count,):
        raise GraphIntegrityError(f"{labels.shape[0]} labels for {node_count} nodes")
    if (labels < -1).any():
        raise GraphIntegrityError("labels must be >= -1")
    return Graph(node_count, offsets, dst.astype(np.int64), features, labels)


# ---------------------------------------------------------------------------
# file formats


def read_edges(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node id in {line!r}")
            rows.append((u, v))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def write_edges(path: str | Path, g: Graph) -> None:
    e = g.edge_array()
    e = e[e[:, 0] < e[:, 1]]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# undirected edge list, one u<TAB>v per line\n")
        for u, v in e.tolist():
            fh.write(f"{u}\t{v}\n")


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = len(FEATURE_MAGIC) + 16
    if len(data) < header or data[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise GraphFormatError(f"{path}: missing {FEATURE_MAGIC!r} header")
    rows, cols = struct.unpack("<QQ", data[len(FEATURE_MAGIC) : header])
    expected = header + rows * cols * 8
    if len(data) != expected:
        raise GraphFormatError(f"{path}: header declares {rows}x{cols} floats, file has {len(data)} bytes (want {expected})")
    return np.frombuffer(data, dtype="<f8", offset=header).reshape(rows, cols).astype(np.float64)


def write_features(path: str | Path, features: np.ndarray) -> None:
    x = np.ascontiguousarray(features, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", *x.shape))
        fh.write(x.tobytes())


def read_labels(path: str | Path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: label {s!r} is not an integer") from None
    return np.asarray(out, dtype=np.int64)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in labels)


def read_split(path: str | Path) -> ClassSplit:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None
    return ClassSplit.from_json(obj)


def write_split(path: str | Path, split: ClassSplit) -> None:
    Path(path).write_text(json.dumps(split.to_json()) + "\n", encoding="utf-8")


def load_graph(edge_path, feature_path, label_path) -> Graph:
    """Load and validate a graph from the edge/feature/label file trio."""
    features = read_features(feature_path)
    labels = read_labels(label_path)
    if features.shape[0] == 0:
        raise GraphIntegrityError(f"{feature_path}: graph has no nodes")
    if labels.shape[0] != features.shape[0]:
        raise GraphIntegrityError(f"{label_path}: {labels.shape[0]} labels for {features.shape[0]} feature rows")
    return from_edges(features.shape[0], read_edges(edge_path), features, labels)


def save_graph(g: Graph, edge_path, feature_path, label_path) -> None:
    write_edges(edge_path, g)
    write_features(feature_path, g.features)
    write_labels(label_path, g.labels)


def remap_node_ids(raw_edges: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    """Map arbitrary integer ids onto dense 0-based ids (in sorted order).

    Returns the remapped edges and the ``original -> dense`` mapping so it
    can be stored next to the converted dataset.
    """
    raw_edges = np.asarray(raw_edges, dtype=np.int64).reshape(-1, 2)
    ids, inverse = np.unique(raw_edges, return_inverse=True)
    return inverse.reshape(-1, 2), {int(o): i for i, o in enumerate(ids)}


# ---------------------------------------------------------------------------
# queries


def _check_node(g: Graph, v: int) -> None:
    if not 0 <= v < g.node_count:
        raise IndexError(f"node {v} outside [0, {g.node_count})")


def neighbors(g: Graph, v: int) -> np.ndarray:
    _check_node(g, v)
    return g.edge_targets[g.edge_offsets[v] : g.edge_offsets[v + 1]]


def _neighbors_of_many(g: Graph, vs: np.ndarray) -> np.ndarray:
    return gather_rows(g.edge_offsets, g.edge_targets, vs)[0]


def k_hop_neighborhood(g: Graph, v: int, k: int) -> np.ndarray:
    """Sorted ids of all nodes within ``k`` hops of ``v`` (``v`` included)."""
    _check_node(g, v)
    if k < 0:
        raise ValueError("k must be non-negative")
    seen = np.array([v], dtype=np.int64)
    frontier = seen
    for _ in range(k):
        nxt = np.setdiff1d(_neighbors_of_many(g, frontier), seen)
        if nxt.size == 0:
            break
        seen = np.union1d(seen, nxt)
        frontier = nxt
    return seen


def gather_rows(offsets: np.ndarray, targets: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated CSR slices of ``rows`` plus, for each entry, the position in ``rows`` it came from."""
    lens = offsets[rows + 1] - offsets[rows]
    owner = np.repeat(np.arange(rows.size), lens)
    first = np.cumsum(lens) - lens
    idx = offsets[rows][owner] + np.arange(owner.size) - first[owner]
    return targets[idx], owner


def induced_csr(g: Graph, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CSR over local indices of the subgraph induced on sorted ``nodes``."""
    nb, owner = gather_rows(g.edge_offsets, g.edge_targets, nodes)
    pos = np.searchsorted(nodes, nb)
    pos[pos == nodes.size] = 0
    keep = nodes[pos] == nb
    counts = np.bincount(owner[keep], minlength=nodes.size)
    offsets = np.zeros(nodes.size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, pos[keep].astype(np.int64)


def induced_subgraph(g: Graph, nodes: Iterable[int], centroid: int, copy_features: bool = True) -> Subgraph:
    """Subgraph induced on ``nodes`` (stored in ascending id order)."""
    arr = np.unique(np.fromiter(nodes, dtype=np.int64))
    if arr.size and (arr[0] < 0 or arr[-1] >= g.node_count):
        raise IndexError(f"subgraph node ids must lie in [0, {g.node_count})")
    idx = np.searchsorted(arr, centroid)
    if idx >= arr.size or arr[idx] != centroid:
        raise ValueError(f"centroid {centroid} is not among the subgraph nodes")
    offsets, targets = induced_csr(g, arr)
    feats = g.features[arr].copy() if copy_features else None
    return Subgraph(arr, offsets, targets, int(idx), feats)


def make_class_split(g: Graph, counts: tuple[int, int, int], seed: int) -> ClassSplit:
    """Shuffle the observed classes with ``seed`` and cut them into base/val/novel."""
    classes = g.classes()
    if sum(counts) > classes.size:
        raise ValueError(f"split {counts} needs {sum(counts)} classes, graph has {classes.size}")
    if min(counts) < 1:
        raise ValueError("each split part needs at least one class")
    order = np.random.default_rng(seed).permutation(classes).tolist()
    nb, nv, _ = counts
    return ClassSplit(
        tuple(sorted(order[:nb])),
        tuple(sorted(order[nb : nb + nv])),
        tuple(sorted(order[nb + nv : sum(counts)])),
    )
