"""Task-level matching: adaptive temperatures, the temperature-scaled
cosine matching loss, base-class cross-entropy and the prediction rule."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch

from tent.encoder import DTYPE, NumericError

DEGENERATE_SPREAD = 1e-12


def adaptive_temperatures(
    support_embs: Sequence[torch.Tensor] | torch.Tensor, prototypes: torch.Tensor
) -> torch.Tensor:
    """Per-class temperature proportional to the summed distance of the class's
    support embeddings from its prototype, rescaled so the mean is 1.

    Falls back to all-ones when every class has (near) zero spread.
    """
    n = prototypes.shape[0]
    spread = torch.stack([torch.linalg.vector_norm(support_embs[i] - prototypes[i], dim=-1).sum() for i in range(n)])
    total = float(spread.sum().detach())
    if total < DEGENERATE_SPREAD:
        return torch.ones(n, dtype=prototypes.dtype)
    # a single collapsed class would otherwise get tau = 0
    spread = spread.clamp_min(DEGENERATE_SPREAD * total)
    return n * spread / spread.sum()


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise NumericError("cannot l2-normalize a zero-norm embedding")
    return x / norm


def episode_logits(query_embs: torch.Tensor, prototypes: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """Q x N matrix of ``q_i . s_j / tau_j`` over l2-normalized embeddings."""
    return (l2_normalize(query_embs) @ l2_normalize(prototypes).T) / tau


def _log_softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))


def _check_slots(slots, n: int) -> torch.Tensor:
    slots = torch.as_tensor(np.asarray(slots), dtype=torch.long)
    if slots.numel() and (int(slots.min()) < 0 or int(slots.max()) >= n):
        raise ValueError(f"label outside [0, {n})")
    return slots


def per_query_info_loss(query_embs, prototypes, tau, query_slots) -> torch.Tensor:
    logits = episode_logits(query_embs, prototypes, tau)
    slots = _check_slots(query_slots, prototypes.shape[0])
    return -_log_softmax_rows(logits).gather(1, slots[:, None]).squeeze(1)


def info_loss(query_embs, prototypes, tau, query_slots) -> torch.Tensor:
    """Sum over queries of ``-log softmax_j(q_i . s_j / tau_j)`` at the true slot."""
    return per_query_info_loss(query_embs, prototypes, tau, query_slots).sum()


def cross_entropy_sum(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = _check_slots(labels, logits.shape[1])
    return -_log_softmax_rows(logits).gather(1, labels[:, None]).sum()


def init_head(in_dim: int, n_classes: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    bound = np.sqrt(6.0 / (in_dim + n_classes))
    return {
        "w": torch.tensor(rng.uniform(-bound, bound, size=(in_dim, n_classes)), dtype=DTYPE),
        "b": torch.zeros(n_classes, dtype=DTYPE),
    }


def head_logits(head: Mapping[str, torch.Tensor], h: torch.Tensor) -> torch.Tensor:
    return h @ head["w"] + head["b"]


def base_class_ce(head: Mapping[str, torch.Tensor], H_query: torch.Tensor, base_labels) -> torch.Tensor:
    """Summed softmax cross-entropy of the linear head over base classes."""
    return cross_entropy_sum(head_logits(head, H_query), base_labels)


def total_loss(l_n, l_ce, gamma: float = 1.0):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return l_n + gamma * l_ce


def predict(query_embs, prototypes) -> np.ndarray:
    """Slot maximizing ``q_i . s_j / tau_i`` over l2-normalized embeddings.

    The temperature is indexed by the query, so it scales a whole row and
    drops out of the argmax; the class temperatures only shape the loss.
    Ties go to the lowest slot.
    """
    with torch.no_grad():
        cos = l2_normalize(query_embs) @ l2_normalize(prototypes).T
    return np.argmax(cos.numpy(), axis=1)


def euclidean_logits(query_embs: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """``-||q_i - s_j||^2`` (unnormalized embeddings, no temperature)."""
    diff = query_embs[:, None, :] - prototypes[None, :, :]
    return -(diff * diff).sum(-1)


def euclidean_loss(query_embs, prototypes, query_slots) -> torch.Tensor:
    return cross_entropy_sum(euclidean_logits(query_embs, prototypes), query_slots)


def euclidean_predict(query_embs, prototypes) -> np.ndarray:
    with torch.no_grad():
        return np.argmax(euclidean_logits(query_embs, prototypes).numpy(), axis=1)
