"""Two-layer GIN encoders over a flat parameter vector.

Each GIN layer computes ``z_v = (1 + eps) * h_v + sum_{u in N(v)} h_u`` and
passes ``z`` through a two-linear perceptron (linear -> ReLU -> linear). A
ReLU sits between the two GIN layers; the output layer has no nonlinearity.
Parameters live in a single flat float64 vector so that elementwise
modulation (FiLM) can act on the whole network at once.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch

from tent.graph import Graph, Subgraph

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"TENTC1"
SCHEMA_VERSION = 1


class NumericError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GinConfig:
    in_dim: int
    hidden_dim: int = 16
    out_dim: int = 16
    dropout: float = 0.2
    layers: int = 2

    def __post_init__(self):
        if self.layers != 2:
            raise ValueError("only two-layer GINs are supported")
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("GIN dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Slot(NamedTuple):
    name: str
    shape: tuple[int, ...]
    start: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.start + self.size


class ParamSchema:
    """Ordered layout of named tensors inside a flat vector."""

    def __init__(self, entries: Sequence[tuple[str, tuple[int, ...]]]):
        self.slots: list[Slot] = []
        pos = 0
        for name, shape in entries:
            self.slots.append(Slot(name, tuple(shape), pos))
            pos += math.prod(shape)
        self.size = pos
        self._by_name = {s.name: s for s in self.slots}

    def __getitem__(self, name: str) -> Slot:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.slots)

    def describe(self) -> list[dict]:
        return [{"name": s.name, "shape": list(s.shape), "start": s.start} for s in self.slots]

    def flatten(self, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
        if set(params) != set(self._by_name):
            raise ShapeError(f"parameter names {sorted(params)} do not match schema {sorted(self._by_name)}")
        parts = []
        for s in self.slots:
            t = torch.as_tensor(params[s.name], dtype=DTYPE)
            if tuple(t.shape) != s.shape:
                raise ShapeError(f"{s.name}: shape {tuple(t.shape)} != {s.shape}")
            parts.append(t.reshape(-1))
        return torch.cat(parts)

    def unflatten(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        if flat.ndim != 1 or flat.shape[0] != self.size:
            raise ShapeError(f"flat vector of shape {tuple(flat.shape)} does not match schema length {self.size}")
        return {s.name: flat[s.start : s.stop].view(s.shape) for s in self.slots}


def gin_schema(cfg: GinConfig) -> ParamSchema:
    dims = [(cfg.in_dim, cfg.hidden_dim, cfg.hidden_dim), (cfg.hidden_dim, cfg.hidden_dim, cfg.out_dim)]
    entries = []
    for layer, (a, h, b) in enumerate(dims):
        entries += [
            (f"layer{layer}.eps", (1,)),
            (f"layer{layer}.w1", (a, h)),
            (f"layer{layer}.b1", (h,)),
            (f"layer{layer}.w2", (h, b)),
            (f"layer{layer}.b2", (b,)),
        ]
    return ParamSchema(entries)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: GinConfig, seed: int | np.random.Generator) -> torch.Tensor:
    """Xavier-uniform weights, zero biases, zero GIN eps."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    schema = gin_schema(cfg)
    flat = np.zeros(schema.size)
    for s in schema:
        if len(s.shape) == 2:
            flat[s.start : s.stop] = xavier_uniform(rng, *s.shape).reshape(-1)
    return torch.tensor(flat, dtype=DTYPE)


class Adjacency(NamedTuple):
    """Directed message edges ``src -> dst`` over ``n`` local nodes."""

    src: torch.Tensor
    dst: torch.Tensor
    n: int

    @classmethod
    def from_csr(cls, offsets: np.ndarray, targets: np.ndarray) -> "Adjacency":
        n = len(offsets) - 1
        dst = np.repeat(np.arange(n), np.diff(offsets))
        return cls(torch.tensor(targets, dtype=torch.long), torch.as_tensor(dst, dtype=torch.long), n)

    @classmethod
    def of(cls, graph: Graph | Subgraph | "Adjacency") -> "Adjacency":
        if isinstance(graph, Adjacency):
            return graph
        if isinstance(graph, Graph):
            return cls.from_csr(graph.edge_offsets, graph.edge_targets)
        return cls.from_csr(graph.offsets, graph.targets)


def batch_adjacency(parts: Sequence[Graph | Subgraph | Adjacency]) -> tuple[Adjacency, np.ndarray]:
    """Disjoint union of several graphs; also returns each part's row offset."""
    adjs = [Adjacency.of(p) for p in parts]
    starts = np.cumsum([0] + [a.n for a in adjs])
    src = torch.cat([a.src + int(o) for a, o in zip(adjs, starts)])
    dst = torch.cat([a.dst + int(o) for a, o in zip(adjs, starts)])
    return Adjacency(src, dst, int(starts[-1])), starts[:-1]


def aggregate(h: torch.Tensor, adj: Adjacency, eps: torch.Tensor) -> torch.Tensor:
    out = (1.0 + eps) * h
    if adj.src.numel():
        out = out.index_add(0, adj.dst, h.index_select(0, adj.src))
    return out


def _dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None) -> torch.Tensor:
    if rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def gnn_forward(
    params: torch.Tensor,
    cfg: GinConfig,
    adjacency: Graph | Subgraph | Adjacency,
    features: torch.Tensor,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Embeddings for every node of ``adjacency``.

    Dropout (rate ``cfg.dropout``) is applied after each ReLU only when
    ``training`` is set; pass a seeded ``generator`` for reproducible masks.
    """
    schema = gin_schema(cfg)
    if params.ndim != 1 or params.shape[0] != schema.size:
        raise ShapeError(f"parameter vector length {params.shape[0]} != schema length {schema.size}")
    adj = Adjacency.of(adjacency)
    if features.ndim != 2 or features.shape[1] != cfg.in_dim:
        raise ShapeError(f"features of shape {tuple(features.shape)} do not have {cfg.in_dim} columns")
    if features.shape[0] != adj.n:
        raise ShapeError(f"{features.shape[0]} feature rows for {adj.n} nodes")
    p = schema.unflatten(params)
    rate = cfg.dropout if training else 0.0
    h = features
    for layer in range(2):
        z = aggregate(h, adj, p[f"layer{layer}.eps"])
        z = _dropout(torch.relu(z @ p[f"layer{layer}.w1"] + p[f"layer{layer}.b1"]), rate, generator)
        h = z @ p[f"layer{layer}.w2"] + p[f"layer{layer}.b2"]
        if layer == 0:
            h = _dropout(torch.relu(h), rate, generator)
        if not torch.isfinite(h).all():
            raise NumericError(f"non-finite activations after GIN layer {layer}")
    return h


def centroid_readout(emb: torch.Tensor, sg: Subgraph) -> torch.Tensor:
    if emb.shape[0] != sg.size:
        raise ShapeError(f"{emb.shape[0]} embedding rows for a {sg.size}-node subgraph")
    return emb[sg.centroid_index]


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss``; parameters off the computation path get exact zeros."""
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(names, tensors, grads)}


# ---------------------------------------------------------------------------
# checkpoint container


def write_checkpoint(path: str | Path, config: Mapping, groups: Mapping[str, torch.Tensor]) -> None:
    """``TENTC1`` | u64 json length | config json | u32 group count | groups.

    Each group is ``u16 name length | name | u64 element count | float64 data``
    (little-endian); tensors are stored flattened.
    """
    buf = io.BytesIO()
    cfg = json.dumps({"schema_version": SCHEMA_VERSION, **config}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(groups)))
    for name, t in groups.items():
        raw = name.encode()
        data = np.ascontiguousarray(t.detach().cpu().numpy().reshape(-1), dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", data.size))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    config = json.loads(data[pos : pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    groups = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode()
        pos += ln
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        groups[name] = torch.tensor(np.frombuffer(data, dtype="<f8", count=size, offset=pos).copy(), dtype=DTYPE)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return config, groups


def config_dict(cfg: GinConfig) -> dict:
    return asdict(cfg)
