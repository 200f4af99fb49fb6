"""Trainable parameter groups and the per-episode forward pass for every variant."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch

from tent import adaptation as ad
from tent import matching as mt
from tent.encoder import DTYPE, Adjacency, GinConfig, gin_schema, gnn_forward, init_params
from tent.episodes import MetaTask
from tent.graph import Graph, Subgraph

VARIANTS = ("full", "no_node", "no_class", "no_task", "protonet")

INIT_STREAM = 7


class ModelParams:
    """All trainable tensors, keyed by flat group names.

    ``phi`` and ``theta`` are flat encoder vectors; ``alpha.*`` / ``beta.*``
    are the two FiLM adapter perceptrons; ``head.*`` is the base-class
    linear classifier.
    """

    def __init__(self, phi_cfg: GinConfig, theta_cfg: GinConfig, groups: dict[str, torch.Tensor]):
        self.phi_cfg = phi_cfg
        self.theta_cfg = theta_cfg
        self.groups = groups
        if groups["phi"].shape[0] != gin_schema(phi_cfg).size or groups["theta"].shape[0] != gin_schema(theta_cfg).size:
            raise ValueError("encoder vectors do not match their configs")
        if groups["alpha.w2"].shape[1] != groups["theta"].shape[0]:
            raise ValueError("adapter output width must equal the theta length")
        if groups["head.w"].shape[0] != phi_cfg.out_dim:
            raise ValueError("head input width must equal the first-step embedding width")

    @classmethod
    def init(cls, in_dim: int, n_base: int, seed: int, hidden_dim=16, out_dim=16, dropout=0.2) -> "ModelParams":
        rng = np.random.default_rng(np.random.SeedSequence([INIT_STREAM, seed]))
        phi_cfg = GinConfig(in_dim, hidden_dim, hidden_dim, dropout)
        theta_cfg = GinConfig(hidden_dim, hidden_dim, out_dim, dropout)
        groups = {"phi": init_params(phi_cfg, rng), "theta": init_params(theta_cfg, rng)}
        d_theta = groups["theta"].shape[0]
        for name in ("alpha", "beta"):
            for k, v in ad.init_adapter(hidden_dim, d_theta, rng).items():
                groups[f"{name}.{k}"] = v
        for k, v in mt.init_head(hidden_dim, n_base, rng).items():
            groups[f"head.{k}"] = v
        return cls(phi_cfg, theta_cfg, groups)

    def _sub(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k.split(".", 1)[1]: v for k, v in self.groups.items() if k.startswith(prefix + ".")}

    @property
    def phi(self) -> torch.Tensor:
        return self.groups["phi"]

    @property
    def theta(self) -> torch.Tensor:
        return self.groups["theta"]

    @property
    def alpha(self) -> dict[str, torch.Tensor]:
        return self._sub("alpha")

    @property
    def beta(self) -> dict[str, torch.Tensor]:
        return self._sub("beta")

    @property
    def head(self) -> dict[str, torch.Tensor]:
        return self._sub("head")

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.groups.items())

    def clone(self, requires_grad: bool = False) -> "ModelParams":
        groups = {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.groups.items()}
        return ModelParams(self.phi_cfg, self.theta_cfg, groups)

    def equal(self, other: "ModelParams") -> bool:
        return self.groups.keys() == other.groups.keys() and all(
            torch.equal(v, other.groups[k]) for k, v in self.groups.items()
        )

    def dims(self) -> dict:
        return {
            "in_dim": self.phi_cfg.in_dim,
            "hidden_dim": self.phi_cfg.hidden_dim,
            "out_dim": self.theta_cfg.out_dim,
            "dropout": self.phi_cfg.dropout,
            "n_base": int(self.groups["head.b"].shape[0]),
        }

    @classmethod
    def from_groups(cls, dims: dict, groups: dict[str, torch.Tensor]) -> "ModelParams":
        phi_cfg = GinConfig(dims["in_dim"], dims["hidden_dim"], dims["hidden_dim"], dims["dropout"])
        theta_cfg = GinConfig(dims["hidden_dim"], dims["hidden_dim"], dims["out_dim"], dims["dropout"])
        return cls(phi_cfg, theta_cfg, {k: v.reshape(_shape(k, dims, groups[k])) for k, v in groups.items()})


def _shape(name: str, dims: dict, flat: torch.Tensor) -> tuple[int, ...]:
    h = dims["hidden_dim"]
    if name in ("phi", "theta") or name.endswith(".b1") or name.endswith(".b2") or name == "head.b":
        return (flat.numel(),)
    if name.endswith(".w1"):
        return (h, h)
    return (h, flat.numel() // h)


class GraphContext:
    """Per-graph caches: tensor features, full adjacency and 2-hop query subgraphs."""

    def __init__(self, g: Graph):
        self.g = g
        self.x = torch.tensor(g.features, dtype=DTYPE)
        self.adj = Adjacency.of(g)
        self._two_hop: dict[int, Subgraph] = {}

    def two_hop(self, v: int) -> Subgraph:
        sg = self._two_hop.get(v)
        if sg is None:
            sg, _ = ad.build_query_subgraph(self.g, v)
            self._two_hop[v] = sg
        return sg

    def first_step(self, model: ModelParams, training=False, generator=None) -> torch.Tensor:
        return gnn_forward(model.phi, model.phi_cfg, self.adj, self.x, training, generator)


@dataclass
class EpisodeOutput:
    """``logits`` are the matching-loss logits. With adaptive temperatures the
    predictions are the cosine argmax, which can differ from their argmax."""

    loss: torch.Tensor
    l_match: torch.Tensor
    l_ce: torch.Tensor | None
    logits: torch.Tensor
    predictions: np.ndarray
    tau: torch.Tensor | None


def _rows(H: torch.Tensor, ids) -> torch.Tensor:
    return H.index_select(0, torch.as_tensor(np.asarray(ids), dtype=torch.long))


def episode_forward(
    model: ModelParams,
    ctx: GraphContext,
    task: MetaTask,
    variant: str = "full",
    *,
    training: bool = False,
    gamma: float = 1.0,
    base_index: dict[int, int] | None = None,
    H: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> EpisodeOutput:
    """Loss and predictions for one task.

    ``H`` may be passed in to reuse first-step embeddings (frozen encoder at
    evaluation). The base-class cross-entropy term is added only when
    ``training`` and a ``base_index`` (global class id -> head column) are given.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    g = ctx.g
    if H is None:
        H = ctx.first_step(model, training, generator)
    n = task.n_way
    slots = task.query_slots()
    query_nodes = task.query_nodes()
    supports = [task.support_nodes(i) for i in range(n)]

    if variant == "protonet":
        protos = torch.stack([_rows(H, s).mean(0) for s in supports])
        q = _rows(H, query_nodes)
        logits = mt.euclidean_logits(q, protos)
        l_match = mt.cross_entropy_sum(logits, slots)
        preds = np.argmax(logits.detach().numpy(), axis=1)
        return EpisodeOutput(l_match, l_match, None, logits, preds, None)

    cfg = model.theta_cfg
    adapt = variant != "no_class"
    theta = model.theta
    alpha, beta = model.alpha, model.beta

    protos, spreads = [], []
    for s in supports:
        theta_i = ad.film_adapt(theta, _rows(H, s), alpha, beta) if adapt else theta
        if variant == "no_node":
            sgs = [ctx.two_hop(int(v)) for v in s]
            rows = ad.centroid_embeddings(theta_i, cfg, sgs, [_rows(H, sg.nodes) for sg in sgs], training, generator)
            protos.append(rows.mean(0))
            spreads.append(rows)
        else:
            ces = ad.build_class_ego_subgraph(g, s, H)
            s_i, s_k = ad.class_prototype(theta_i, cfg, ces, training, generator)
            protos.append(s_i)
            spreads.append(s_k)
    protos = torch.stack(protos)

    theta_q = ad.film_adapt(theta, _rows(H, task.support_nodes()), alpha, beta) if adapt else theta
    qsgs = [ctx.two_hop(int(v)) for v in query_nodes]
    q = ad.centroid_embeddings(theta_q, cfg, qsgs, [_rows(H, sg.nodes) for sg in qsgs], training, generator)

    if variant == "no_task":
        tau = None
        logits = mt.euclidean_logits(q, protos)
        l_match = mt.cross_entropy_sum(logits, slots)
    else:
        tau = mt.adaptive_temperatures(spreads, protos)
        logits = mt.episode_logits(q, protos, tau)
        l_match = mt.info_loss(q, protos, tau, slots)
    preds = mt.predict(q, protos) if tau is not None else np.argmax(logits.detach().numpy(), axis=1)

    l_ce = None
    loss = l_match
    if training and base_index is not None:
        labels = [base_index[int(g.labels[v])] for v in query_nodes]
        l_ce = mt.base_class_ce(model.head, _rows(H, query_nodes), labels)
        loss = mt.total_loss(l_match, l_ce, gamma)
    return EpisodeOutput(loss, l_match, l_ce, logits, preds, tau)
