"""Word-object, phrase-object and text-image alignment losses.

Batched tensors use a leading batch axis ``B``. Word axes carry a validity
mask because expressions have different lengths.
"""

from __future__ import annotations

import numpy as np

from .nn import LayerNorm, Linear, Module, MultiHeadAttention, FeedForward, NEG_INF
from .tensor import ContractError, DimensionError, PROB_EPS, Tensor, log_softmax, sigmoid, softmax, stack

NORM_EPS = 1e-8


class TextReconstructor(Module):
    """One cross-attention transformer layer: masked words attend to object embeddings."""

    def __init__(self, rng, dim: int, heads: int, ffn: int):
        super().__init__()
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn)

    def __call__(self, objects: Tensor, masked_words: Tensor) -> Tensor:
        if objects.shape[-1] != masked_words.shape[-1]:
            raise DimensionError(
                f"object dim {objects.shape[-1]} != word dim {masked_words.shape[-1]}"
            )
        x = masked_words + self.attn(self.norm_q(masked_words), self.norm_kv(objects))
        return x + self.ffn(self.norm_ffn(x))


def reconstruct_text(reconstructor: TextReconstructor, objects: Tensor, masked_words: Tensor) -> Tensor:
    return reconstructor(objects, masked_words)


def _row_norm(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=-1)
    # same as max(norm, NORM_EPS)
    return sq.clip(NORM_EPS**2).sqrt()


def masked_recovery_loss(words: Tensor, recon: Tensor, alpha, word_mask=None) -> Tensor:
    """``alpha * (1 - mean cosine)`` between original and reconstructed word rows.

    Inputs are ``(K, C)`` or ``(B, K, C)``; ``alpha`` is 0 for no-target samples.
    Returns the per-sample loss (scalar, or shape ``(B,)``).
    """
    if words.shape != recon.shape:
        raise DimensionError(f"word shapes differ: {words.shape} vs {recon.shape}")
    cos = (words * recon).sum(axis=-1) / (_row_norm(words) * _row_norm(recon))
    if word_mask is None:
        word_mask = np.ones(cos.shape, dtype=bool)
    m = np.asarray(word_mask, dtype=np.float64)
    mean_cos = (cos * m).sum(axis=-1) / np.maximum(m.sum(axis=-1), 1.0)
    alpha = np.asarray(alpha, dtype=np.float64)
    return (1.0 - mean_cos) * alpha


def phrase_features(words: Tensor, spans) -> Tensor:
    """Average word features over each ``(start, end)`` span (end exclusive)."""
    if not spans:
        return Tensor(np.zeros((0, words.shape[-1])))
    rows = []
    for start, end in spans:
        if not 0 <= start < end <= words.shape[0]:
            raise ContractError(f"span ({start}, {end}) outside [0, {words.shape[0]})")
        rows.append(words[start:end].mean(axis=0))
    return stack(rows, axis=0)


def phrase_pooling_matrix(spans_per_sample, max_phrases: int, max_words: int) -> np.ndarray:
    """``(B, M, K)`` averaging weights so that ``P @ words`` gives phrase features."""
    pool = np.zeros((len(spans_per_sample), max_phrases, max_words))
    for b, spans in enumerate(spans_per_sample):
        for i, (start, end) in enumerate(spans):
            pool[b, i, start:end] = 1.0 / (end - start)
    return pool


class PhraseObjectHead(Module):
    def __init__(self, rng, phrase_dim: int, object_dim: int, dim: int):
        super().__init__()
        self.w1 = Linear(rng, phrase_dim, dim, bias=False)
        self.w2 = Linear(rng, object_dim, dim, bias=False)

    def logits(self, phrases: Tensor, objects: Tensor) -> Tensor:
        p = self.w1(phrases)
        o = self.w2(objects)
        return p @ o.swapaxes(-1, -2)

    def __call__(self, phrases: Tensor, objects: Tensor) -> Tensor:
        return sigmoid(self.logits(phrases, objects))


def phrase_object_map(phrases: Tensor, objects: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Sigmoid of projected phrase-object dot products, ``(M, N)``."""
    if phrases.shape[-1] != w1.shape[0] or objects.shape[-1] != w2.shape[0]:
        raise DimensionError("projection input dims do not match the features")
    if w1.shape[1] != w2.shape[1]:
        raise DimensionError("projections map to different sub-space sizes")
    return sigmoid((phrases @ w1) @ (objects @ w2).swapaxes(-1, -2))


def phrase_object_loss(s: Tensor, y, valid=None) -> Tensor:
    """Summed binary cross entropy between the relation map and the binary target map.

    For batched ``(B, M, N)`` input returns shape ``(B,)``; ``valid`` masks padded phrases.
    """
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise DimensionError(f"map shapes differ: {s.shape} vs {y.shape}")
    if s.size == 0:
        return Tensor(np.zeros(s.shape[:-2]))
    p = s.clip(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(p.log() * y + (1.0 - p).log() * (1.0 - y))
    if valid is not None:
        bce = bce * np.asarray(valid, dtype=np.float64)
    return bce.sum(axis=(-2, -1))


class GlobalProjection(Module):
    def __init__(self, rng, object_dim: int, word_dim: int, dim: int):
        super().__init__()
        self.obj = Linear(rng, object_dim, dim, bias=False)
        self.word = Linear(rng, word_dim, dim, bias=False)


def pairwise_match_scores(objects: Tensor, words: Tensor, word_mask=None) -> tuple[Tensor, Tensor]:
    """Global match scores for every (image, text) pair in a batch.

    ``objects`` is ``(B, N, C)`` of projected object embeddings and ``words``
    ``(B, K, C)`` of projected word features. Returns ``(S_T, S_I)``, each
    ``(B, B)`` indexed ``[image, text]``. ``S_T`` normalizes attention over
    words and averages over objects; ``S_I`` normalizes over objects and
    averages over valid words.
    """
    b, n, _ = objects.shape
    _, k, _ = words.shape
    if n == 0 or k == 0:
        raise ContractError("global match scores need at least one object and one word")
    if word_mask is None:
        word_mask = np.ones((words.shape[0], k), dtype=bool)
    wm = np.asarray(word_mask, dtype=bool)
    # dots[i, t, j, k] = <o_{i,j}, w_{t,k}>
    dots = objects.unsqueeze(1) @ words.swapaxes(-1, -2).unsqueeze(0)
    word_bias = np.where(wm, 0.0, NEG_INF)[None, :, None, :]
    a_text = softmax(dots + word_bias, axis=-1)
    s_t = (a_text * dots).sum(axis=-1).mean(axis=-1)
    a_img = softmax(dots, axis=-2)
    per_word = (a_img * dots).sum(axis=-2)
    wmf = wm.astype(np.float64)[None, :, :]
    s_i = (per_word * wmf).sum(axis=-1) / wmf.sum(axis=-1)
    return s_t, s_i


def global_match_scores(objects: Tensor, words: Tensor, w_obj: Tensor, w_word: Tensor) -> tuple[Tensor, Tensor]:
    """``(S_T, S_I)`` for one image-text pair from unprojected ``(N, C)`` and ``(K, C)`` features."""
    if objects.shape[0] == 0 or words.shape[0] == 0:
        raise ContractError("global match scores need at least one object and one word")
    o = (objects @ w_obj).unsqueeze(0)
    w = (words @ w_word).unsqueeze(0)
    s_t, s_i = pairwise_match_scores(o, w)
    return s_t.reshape(()), s_i.reshape(())


def text_image_loss(s_t: Tensor, s_i: Tensor) -> Tensor:
    """Per-pair contrastive loss summed over both score types and both directions.

    ``s_t`` and ``s_i`` are ``(B, B)`` indexed ``[image, text]``; diagonal entries
    are the matched pairs. Returns shape ``(B,)``.
    """
    if s_t.ndim != 2 or s_t.shape[0] == 0:
        raise ContractError("text-image loss needs a non-empty square score matrix")
    if s_t.shape != s_i.shape or s_t.shape[0] != s_t.shape[1]:
        raise DimensionError(f"score matrices must be square and equal: {s_t.shape}, {s_i.shape}")
    diag = np.arange(s_t.shape[0])
    total = 0.0
    for s in (s_t, s_i):
        over_texts = log_softmax(s, axis=1)[diag, diag]
        over_images = log_softmax(s, axis=0)[diag, diag]
        total = total - over_texts - over_images
    return total


def alignment_loss(w2o, p2o, t2i):
    return w2o + p2o + t2i
