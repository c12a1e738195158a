"""Training losses: label-smoothed cross-entropy and knowledge transfer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass
class LossReport:
    translation: Tensor
    kt: Tensor
    total: Tensor
    tokens: int

    def floats(self) -> dict[str, float]:
        return {"translation": self.translation.item(), "kt": self.kt.item(), "total": self.total.item()}


def smoothed_targets(targets: np.ndarray, vocab_size: int, epsilon: float, pad_id: int | None) -> np.ndarray:
    """Gold gets ``1 - eps``; ``eps`` is shared evenly by the other non-pad tokens."""
    targets = np.asarray(targets, dtype=np.int64)
    others = vocab_size - 1 - (pad_id is not None)
    dist = np.full((*targets.shape, vocab_size), epsilon / others)
    if pad_id is not None:
        dist[..., pad_id] = 0.0
    np.put_along_axis(dist, targets[..., None], 1.0 - epsilon, axis=-1)
    return dist


def label_smoothed_ce(logits, targets, epsilon: float = 0.4, pad_id: int | None = None) -> Tensor:
    """Mean over non-pad positions of ``-sum_v p_v log softmax(logits)_v``."""
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"label smoothing must be in [0, 1), got {epsilon}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise nx.ShapeError(f"label_smoothed_ce: targets {targets.shape} vs logits {logits.shape}")
    keep = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("label_smoothed_ce: every target is padding")
    dist = smoothed_targets(np.where(keep, targets, 0), V, epsilon, pad_id) * keep[..., None]
    return nx.div(nx.neg(nx.sum(nx.mul(nx.log_softmax(logits), dist))), float(n))


def kt_loss(e_i, e_j, similarity: float) -> Tensor:
    """``(cos(e_i, e_j) - S_ij)^2``."""
    diff = nx.sub(nx.cosine_similarity(e_i, e_j), similarity)
    return nx.mul(diff, diff)


def kt_loss_batch(embeddings, similarity: np.ndarray) -> Tensor:
    """Mean of :func:`kt_loss` over ordered in-batch pairs ``i != j``.

    ``similarity`` is the ``(B, B)`` slice of the reference matrix for the
    batch's samples.  A batch of one has no pairs and contributes 0.
    """
    E = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    B, d = E.shape
    if B < 2:
        return Tensor(0.0)
    cos = nx.cosine_similarity(nx.reshape(E, (B, 1, d)), nx.reshape(E, (1, B, d)))
    off = ~np.eye(B, dtype=bool)
    diff = nx.mul(nx.sub(cos, np.asarray(similarity, dtype=np.float64)), off.astype(np.float64))
    return nx.div(nx.sum(nx.mul(diff, diff)), float(B * (B - 1)))


def total_loss(translation, kt, kt_weight: float = 1.0) -> Tensor:
    if kt_weight < 0:
        raise ContractError(f"kt weight must be >= 0, got {kt_weight}")
    if kt_weight == 0:
        return translation if isinstance(translation, Tensor) else Tensor(translation)
    return nx.add(translation, nx.mul(kt, kt_weight))
