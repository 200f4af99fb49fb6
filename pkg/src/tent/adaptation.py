"""Class-ego subgraphs, FiLM modulation of the subgraph encoder, prototypes and query embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from tent.encoder import DTYPE, GinConfig, ShapeError, batch_adjacency, gnn_forward, xavier_uniform
from tent.graph import Graph, Subgraph, gather_rows, induced_csr, k_hop_neighborhood

VIRTUAL = -1


@dataclass(frozen=True, eq=False)
class ClassEgoSubgraph:
    """Virtual class node (local index 0) joined to the K support nodes,
    plus the supports' one-hop neighbors and all induced real edges."""

    sg: Subgraph
    support_local_indices: np.ndarray
    features: torch.Tensor | None = None

    @property
    def virtual_feature(self) -> torch.Tensor:
        return self.features[0]

    def to_json(self) -> dict:
        pairs = sorted(self.sg.edge_pairs())
        return {
            "nodes": self.sg.nodes.tolist(),
            "edges": [[u, v] for u, v in pairs if u < v and u != 0],
            "virtual_edges": [[0, v] for u, v in pairs if u == 0],
            "centroid": self.sg.centroid_index,
        }

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)


def class_ego_structure(g: Graph, support: Sequence[int]) -> tuple[Subgraph, np.ndarray]:
    support = np.asarray(support, dtype=np.int64)
    if support.size == 0:
        raise ValueError("class-ego subgraph needs at least one support node")
    if np.unique(support).size != support.size:
        raise ValueError("support nodes must be distinct")
    real = np.union1d(support, gather_rows(g.edge_offsets, g.edge_targets, support)[0])
    offsets, targets = induced_csr(g, real)
    k = support.size
    sup_local = np.searchsorted(real, support) + 1
    # local 0 is the virtual node, real node j moves to j + 1
    src = np.concatenate([np.repeat(np.arange(1, real.size + 1), np.diff(offsets)), sup_local, np.zeros(k, np.int64)])
    dst = np.concatenate([targets + 1, np.zeros(k, np.int64), sup_local])
    order = np.lexsort((dst, src))
    new_offsets = np.zeros(real.size + 2, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=real.size + 1), out=new_offsets[1:])
    new_targets = dst[order]
    nodes = np.concatenate([[VIRTUAL], real])
    return Subgraph(nodes, new_offsets, new_targets, 0, None, virtual_edges=k), sup_local


def build_class_ego_subgraph(g: Graph, support: Sequence[int], H: torch.Tensor | None) -> ClassEgoSubgraph:
    """Features are rows of the first-step embeddings ``H``; the virtual
    node starts from the mean of the support rows."""
    sg, sup_local = class_ego_structure(g, support)
    feats = None
    if H is not None:
        sup = torch.as_tensor(np.asarray(support), dtype=torch.long)
        real = torch.tensor(sg.nodes[1:], dtype=torch.long)
        feats = torch.cat([H.index_select(0, sup).mean(0, keepdim=True), H.index_select(0, real)])
    return ClassEgoSubgraph(sg, sup_local, feats)


def build_query_subgraph(g: Graph, q: int, H: torch.Tensor | None = None) -> tuple[Subgraph, torch.Tensor | None]:
    """Induced subgraph on the 2-hop neighborhood of ``q`` (centroid ``q``)."""
    nodes = k_hop_neighborhood(g, q, 2)
    offsets, targets = induced_csr(g, nodes)
    sg = Subgraph(nodes, offsets, targets, int(np.searchsorted(nodes, q)))
    feats = None if H is None else H.index_select(0, torch.as_tensor(nodes, dtype=torch.long))
    return sg, feats


# ---------------------------------------------------------------------------
# FiLM


def init_adapter(hidden_dim: int, out_dim: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """Two-layer perceptron ``hidden_dim -> hidden_dim -> out_dim``; output layer starts at zero."""
    return {
        "w1": torch.tensor(xavier_uniform(rng, hidden_dim, hidden_dim), dtype=DTYPE),
        "b1": torch.zeros(hidden_dim, dtype=DTYPE),
        "w2": torch.zeros(hidden_dim, out_dim, dtype=DTYPE),
        "b2": torch.zeros(out_dim, dtype=DTYPE),
    }


def adapter_mlp(p: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def film_adapt(
    theta: torch.Tensor,
    context: torch.Tensor,
    alpha_net: Mapping[str, torch.Tensor],
    beta_net: Mapping[str, torch.Tensor],
) -> torch.Tensor:
    """``(alpha + 1) * theta + beta`` with alpha, beta predicted from the context mean.

    The mean is scaled to unit length first. Sum-aggregated rows have norms
    in the tens, which makes every adapter step swing theta far enough to
    wreck it within a few episodes. A zero mean stays zero.
    """
    if context.ndim != 2 or context.shape[0] == 0:
        raise ShapeError("context must be a non-empty (m, d_h) matrix")
    if context.shape[1] != alpha_net["w1"].shape[0]:
        raise ShapeError(f"context dim {context.shape[1]} != adapter input dim {alpha_net['w1'].shape[0]}")
    if alpha_net["w2"].shape[1] != theta.shape[0] or beta_net["w2"].shape[1] != theta.shape[0]:
        raise ShapeError("adapter output width does not match the parameter vector length")
    summary = context.mean(0)
    norm = torch.linalg.vector_norm(summary)
    if norm > 0:
        summary = summary / norm
    alpha = adapter_mlp(alpha_net, summary)
    beta = adapter_mlp(beta_net, summary)
    return (alpha + 1.0) * theta + beta


def class_prototype(
    theta_i: torch.Tensor, cfg: GinConfig, ces: ClassEgoSubgraph, training=False, generator=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns the virtual-node embedding and the K support-node rows of the same pass."""
    emb = gnn_forward(theta_i, cfg, ces.sg, ces.features, training, generator)
    return emb[ces.sg.centroid_index], emb[torch.as_tensor(ces.support_local_indices, dtype=torch.long)]


def query_embedding(theta_q: torch.Tensor, cfg: GinConfig, qsg: Subgraph, features: torch.Tensor,
                    training=False, generator=None) -> torch.Tensor:
    emb = gnn_forward(theta_q, cfg, qsg, features, training, generator)
    return emb[qsg.centroid_index]


def centroid_embeddings(
    theta: torch.Tensor,
    cfg: GinConfig,
    subgraphs: Sequence[Subgraph],
    features: Sequence[torch.Tensor],
    training=False,
    generator=None,
) -> torch.Tensor:
    """Centroid rows for many subgraphs sharing one parameter vector, in one batched pass."""
    adj, starts = batch_adjacency(subgraphs)
    emb = gnn_forward(theta, cfg, adj, torch.cat(list(features)), training, generator)
    rows = torch.as_tensor(starts + np.array([s.centroid_index for s in subgraphs]), dtype=torch.long)
    return emb.index_select(0, rows)
