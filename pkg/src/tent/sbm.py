"""Stochastic-block-model graphs with class-dependent Gaussian features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tent.graph import (ClassSplit, Graph, from_edges, load_graph, make_class_split, read_split, save_graph,
                        write_split)

EDGE_FILE, FEATURE_FILE, LABEL_FILE, SPLIT_FILE = "edges.tsv", "features.bin", "labels.txt", "split.json"


@dataclass(frozen=True)
class SbmSpec:
    classes: int
    nodes_per_class: int
    p_in: float
    p_out: float
    feature_dim: int
    feature_noise: float
    split: tuple[int, int, int]


PRESETS = {
    "sbm-small": SbmSpec(15, 50, 0.2, 0.01, 32, 0.3, (5, 5, 5)),
    "sbm-tiny": SbmSpec(6, 20, 0.3, 0.02, 8, 0.3, (2, 2, 2)),
}


def sbm_graph(classes: int, nodes_per_class: int, p_in: float, p_out: float, feature_dim: int,
              feature_noise: float, seed: int) -> Graph:
    # p_in == p_out is allowed: it is the structure-free null model
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if feature_dim < classes:
        raise ValueError("feature_dim must be >= classes for orthogonal class means")
    rng = np.random.default_rng(seed)
    n = classes * nodes_per_class
    labels = np.repeat(np.arange(classes), nodes_per_class)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    basis, _ = np.linalg.qr(rng.standard_normal((feature_dim, classes)))
    means = basis.T  # rows are orthonormal
    features = means[labels] + feature_noise * rng.standard_normal((n, feature_dim))
    return from_edges(n, edges, features, labels)


def generate_sbm(out_dir: str | Path, classes: int, nodes_per_class: int, p_in: float, p_out: float,
                 feature_dim: int, feature_noise: float, seed: int,
                 split: tuple[int, int, int] | None = None) -> tuple[Graph, ClassSplit]:
    """Write the edge, feature, label and split-manifest files into ``out_dir``."""
    if classes < 3:
        raise ValueError("need at least 3 classes for a base/val/novel split")
    if split is None:
        third = classes // 3
        split = (classes - 2 * third, third, third)
    if sum(split) > classes or min(split) < 1:
        raise ValueError(f"split {split} is infeasible for {classes} classes")
    g = sbm_graph(classes, nodes_per_class, p_in, p_out, feature_dim, feature_noise, seed)
    cs = make_class_split(g, split, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / EDGE_FILE, out / FEATURE_FILE, out / LABEL_FILE)
    write_split(out / SPLIT_FILE, cs)
    return g, cs


def generate_preset(out_dir: str | Path, preset: str, seed: int) -> tuple[Graph, ClassSplit]:
    try:
        s = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    return generate_sbm(out_dir, s.classes, s.nodes_per_class, s.p_in, s.p_out, s.feature_dim,
                        s.feature_noise, seed, s.split)


def load_dataset(data_dir: str | Path) -> tuple[Graph, ClassSplit]:
    """Read a directory laid out like the output of :func:`generate_sbm`."""
    d = Path(data_dir)
    missing = [f for f in (EDGE_FILE, FEATURE_FILE, LABEL_FILE, SPLIT_FILE) if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    g = load_graph(d / EDGE_FILE, d / FEATURE_FILE, d / LABEL_FILE)
    return g, read_split(d / SPLIT_FILE)


def modularity(g: Graph) -> float:
    """Newman modularity of the labeling."""
    e = g.edge_array()
    m2 = e.shape[0]
    if m2 == 0:
        return 0.0
    deg = np.diff(g.edge_offsets).astype(float)
    same = g.labels[e[:, 0]] == g.labels[e[:, 1]]
    k = np.bincount(g.labels, weights=deg)
    return float(same.sum() / m2 - ((k / m2) ** 2).sum())
