"""Adaptive grounding counter.

Predicts how many targets an expression refers to (0, 1, 2, 3 or more), trains
that prediction with cross entropy plus a supervised contrastive loss against a
FIFO memory bank, and uses it to pick output boxes from the query proposals.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .nn import MLP, Module
from .tensor import ContractError, Tensor, concat, log_softmax, logsumexp

log = logging.getLogger(__name__)

NUM_COUNT_CLASSES = 5
MANY = 4  # class index for "more than three"
NORM_EPS = 1e-8


def count_label(n_targets: int) -> int:
    return min(int(n_targets), MANY)


def global_feature(words: Tensor, objects: Tensor, word_mask=None) -> Tensor:
    """Concatenate the mean word feature and the mean object embedding.

    Works on ``(K, C)``/``(N, C)`` or batched ``(B, K, C)``/``(B, N, C)`` inputs.
    """
    if words.shape[-2] == 0 or objects.shape[-2] == 0:
        raise ContractError("global feature needs at least one word and one object")
    if word_mask is None:
        pooled_words = words.mean(axis=-2)
    else:
        m = np.asarray(word_mask, dtype=np.float64)
        pooled_words = (words * m[..., None]).sum(axis=-2) / m.sum(axis=-1, keepdims=True)
    return concat([pooled_words, objects.mean(axis=-2)], axis=-1)


class CountHead(Module):
    """Two-layer perceptron from the global feature to five count logits."""

    def __init__(self, rng, in_dim: int, hidden: int | None = None):
        super().__init__()
        self.mlp = MLP(rng, [in_dim, hidden or 2 * in_dim, NUM_COUNT_CLASSES])

    def __call__(self, feature: Tensor) -> Tensor:
        return self.mlp(feature)


def predict_count(feature: Tensor, head: CountHead) -> tuple[Tensor, np.ndarray]:
    """Logits and argmax label (lowest index wins ties)."""
    logits = head(feature)
    return logits, np.argmax(logits.data, axis=-1)


def count_ce_loss(logits: Tensor, labels) -> Tensor:
    """Per-sample cross entropy of count logits."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    if lp.ndim == 1:
        return -lp[int(labels)]
    return -lp[np.arange(lp.shape[0]), labels]


@dataclass
class MemoryBank:
    """FIFO of detached global features and their count labels."""

    capacity: int = 512

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("memory bank capacity must be positive")
        self._entries: deque = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, feature, label: int) -> None:
        data = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
        self._entries.append((np.array(data, dtype=np.float64, copy=True), int(label)))

    def push_batch(self, features, labels) -> None:
        data = features.data if isinstance(features, Tensor) else np.asarray(features)
        for f, y in zip(data, labels):
            self.push(f, y)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self._entries], dtype=np.int64)

    @property
    def features(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, 0))
        return np.stack([f for f, _ in self._entries])

    def state(self) -> dict:
        return {"features": self.features, "labels": self.labels}

    def load_state(self, state: dict) -> None:
        self._entries.clear()
        for f, y in zip(state["features"], state["labels"]):
            self.push(f, int(y))


def bank_push(bank: MemoryBank, feature, label: int) -> MemoryBank:
    bank.push(feature, label)
    return bank


def _normalize(x: Tensor) -> Tensor:
    n = (x * x).sum(axis=-1, keepdims=True).clip(NORM_EPS**2).sqrt()
    return x / n


def supcon_loss(anchor: Tensor, anchor_label, bank: MemoryBank, tau: float = 0.07) -> Tensor:
    """Supervised contrastive loss of anchor(s) against the bank contents.

    ``anchor`` is ``(D,)`` or ``(B, D)``. Bank entries are constants. Anchors
    without a same-label entry in the bank contribute 0.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    single = anchor.ndim == 1
    a = anchor.unsqueeze(0) if single else anchor
    labels = np.atleast_1d(np.asarray(anchor_label, dtype=np.int64))
    if len(bank) == 0:
        log.warning("memory bank is empty; contrastive loss is 0")
        out = a.sum(axis=-1) * 0.0
        return out.reshape(()) if single else out
    feats = bank.features
    feats = feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), NORM_EPS)
    logits = (_normalize(a) @ Tensor(feats.T)) * (1.0 / tau)
    pos = (labels[:, None] == bank.labels[None, :]).astype(np.float64)
    n_pos = pos.sum(axis=-1)
    log_prob = logits - logsumexp(logits, axis=-1, keepdims=True)
    per = -(log_prob * pos).sum(axis=-1) * (1.0 / np.maximum(n_pos, 1.0))
    return per.reshape(()) if single else per


def agc_loss(cls_loss, con_loss):
    return cls_loss + con_loss


def select_targets(scores, count: int, theta: float = 0.7) -> list[int]:
    """Indices of the proposals to output.

    Count 0 gives nothing; counts 1-3 give the top-scoring proposals (lower index
    wins ties); the "more than three" class keeps every proposal scoring above
    ``theta``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    count = int(count)
    if count == 0:
        return []
    if count >= MANY:
        return [int(i) for i in np.flatnonzero(scores > theta)]
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:count])


def select_by_threshold(scores, theta: float = 0.7) -> list[int]:
    """Threshold-only selection used when the counter is disabled."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    return [int(i) for i in np.flatnonzero(scores > theta)]
