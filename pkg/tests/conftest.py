
import numpy as np
import pytest
import torch

from tent.graph import from_edges

torch.set_num_threads(1)


def random_graph(n, p, seed, d=4, classes=3):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return from_edges(n, edges, rng.standard_normal((n, d)), rng.integers(0, classes, n)), edges


@pytest.fixture
def path4():
    return from_edges(4, [(0, 1), (1, 2), (2, 3)], np.arange(4.0)[:, None], [0, 0, 1, 1])


@pytest.fixture
def rand50():
    return random_graph(50, 0.08, 3)
