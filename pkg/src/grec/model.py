"""Toy grounding network.

Scene objects become tokens (attribute embeddings plus an encoding of their
box), words become tokens (embedding plus position). Both are projected into a
shared space, concatenated, fused by a transformer encoder, and read out by a
decoder whose learnable object queries yield per-query boxes, object
probabilities and optional soft masks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .alignment import GlobalProjection, PhraseObjectHead, TextReconstructor
from .counter import CountHead
from .data import COLORS, MASK_ID, PAD_ID, SHAPES, SIZES, VOCAB, GroundingInstance
from .nn import (
    DecoderLayer,
    EncoderLayer,
    LayerNorm,
    Linear,
    MLP,
    Module,
    key_padding_bias,
    param,
)
from .tensor import ContractError, Tensor, concat, sigmoid, softmax

FOURIER_FREQS = (1.0, 2.0, 4.0, 8.0)


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    bbox: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    mask: float = 1.0
    dice: float = 1.0


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_queries: int = 10
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_words: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    use_masks: bool = False
    use_agc: bool = True
    use_w2o: bool = True
    use_p2o: bool = True
    use_t2i: bool = True
    use_supcon: bool = True
    tau: float = 0.07
    theta: float = 0.7
    bank_capacity: int = 512
    mask_size: int = 32

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self) -> None:
        if self.num_queries < 5:
            raise ConfigError(f"num_queries must be >= 5, got {self.num_queries}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.bank_capacity <= 0:
            raise ConfigError("bank_capacity must be positive")

    def architecture_hash(self) -> str:
        """Hash of the fields that determine parameter shapes."""
        keys = ("embed_dim", "num_queries", "encoder_layers", "decoder_layers", "heads",
                "ffn_dim", "max_words")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    """Padded arrays for a list of instances."""

    instances: list
    obj_attrs: np.ndarray  # (B, S, 3) int
    obj_boxes: np.ndarray  # (B, S, 4)
    obj_valid: np.ndarray  # (B, S) bool
    tokens: np.ndarray  # (B, K) int
    masked_tokens: np.ndarray  # (B, K) int
    word_valid: np.ndarray  # (B, K) bool
    phrase_pool: np.ndarray  # (B, M, K)
    phrase_valid: np.ndarray  # (B, M) bool
    phrase_gts: list  # per sample list of gt-index lists
    gt_boxes: list  # per sample (G, 4)
    count_labels: np.ndarray  # (B,)
    has_target: np.ndarray  # (B,) float

    def __len__(self) -> int:
        return len(self.instances)


def fourier_box_features(boxes: np.ndarray) -> np.ndarray:
    """Raw box coordinates plus sin/cos features at a few frequencies."""
    feats = [boxes]
    for f in FOURIER_FREQS:
        feats.append(np.sin(2 * np.pi * f * boxes))
        feats.append(np.cos(2 * np.pi * f * boxes))
    return np.concatenate(feats, axis=-1)


BOX_FEATURE_DIM = 4 * (1 + 2 * len(FOURIER_FREQS))


def collate(instances: list[GroundingInstance], rng: np.random.Generator | None = None,
            max_words: int | None = None) -> Batch:
    """Pad a list of instances and mask one entity word per expression.

    Without ``rng`` the first entity position is masked.
    """
    b = len(instances)
    s = max(len(i.scene.objects) for i in instances)
    k = max(len(i.expression.tokens) for i in instances)
    if max_words is not None and k > max_words:
        raise ConfigError(f"expression of {k} words exceeds max_words={max_words}")
    m = max(1, max(len(i.expression.phrase_spans) for i in instances))
    obj_attrs = np.zeros((b, s, 3), dtype=np.int64)
    obj_boxes = np.zeros((b, s, 4))
    obj_valid = np.zeros((b, s), dtype=bool)
    tokens = np.full((b, k), PAD_ID, dtype=np.int64)
    word_valid = np.zeros((b, k), dtype=bool)
    pool = np.zeros((b, m, k))
    phrase_valid = np.zeros((b, m), dtype=bool)
    phrase_gts, gt_boxes = [], []
    for bi, inst in enumerate(instances):
        objs = inst.scene.objects
        obj_attrs[bi, : len(objs)] = [o.attrs for o in objs]
        obj_boxes[bi, : len(objs)] = [o.box for o in objs]
        obj_valid[bi, : len(objs)] = True
        toks = inst.expression.tokens
        if not toks:
            raise ContractError(f"instance {inst.id} has an empty expression")
        tokens[bi, : len(toks)] = toks
        word_valid[bi, : len(toks)] = True
        # phrase annotations name scene objects; matching works on target-list positions
        position = {obj: pos for pos, obj in enumerate(inst.expression.target_indices)}
        gts = []
        for pi, (start, end, g) in enumerate(inst.expression.phrase_spans):
            pool[bi, pi, start:end] = 1.0 / (end - start)
            phrase_valid[bi, pi] = True
            gts.append([position.get(obj, -1) for obj in g])
        phrase_gts.append(gts)
        gt_boxes.append(inst.gt_boxes)
    masked = tokens.copy()
    for bi, inst in enumerate(instances):
        ents = inst.expression.entity_positions
        if ents:
            pos = ents[int(rng.integers(len(ents)))] if rng is not None else ents[0]
            masked[bi, pos] = MASK_ID
    return Batch(
        instances=list(instances),
        obj_attrs=obj_attrs,
        obj_boxes=obj_boxes,
        obj_valid=obj_valid,
        tokens=tokens,
        masked_tokens=masked,
        word_valid=word_valid,
        phrase_pool=pool,
        phrase_valid=phrase_valid,
        phrase_gts=phrase_gts,
        gt_boxes=gt_boxes,
        count_labels=np.array([inst.count_label for inst in instances], dtype=np.int64),
        has_target=np.array([1.0 if inst.expression.target_indices else 0.0 for inst in instances]),
    )


@dataclass
class QueryOutputs:
    objects: Tensor  # O_e (B, N, C)
    boxes: Tensor  # (B, N, 4) center format in (0, 1)
    class_logits: Tensor  # (B, N, 2), index 0 = object
    words: Tensor  # T_w (B, K, C)
    masked_words: Tensor  # T_w* (B, K, C)

    @property
    def object_prob(self) -> Tensor:
        return softmax(self.class_logits, axis=-1)[..., 0]


class GroundingModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.embed_dim
        scale = 0.1
        self.word_emb = param(rng.normal(0, scale, (len(VOCAB), c)))
        self.word_pos = param(rng.normal(0, scale, (config.max_words, c)))
        self.color_emb = param(rng.normal(0, scale, (len(COLORS), c)))
        self.shape_emb = param(rng.normal(0, scale, (len(SHAPES), c)))
        self.size_emb = param(rng.normal(0, scale, (len(SIZES), c)))
        self.box_enc = Linear(rng, BOX_FEATURE_DIM, c)
        self.text_proj = Linear(rng, c, c)
        self.visual_proj = Linear(rng, c, c)
        self.modality_emb = param(rng.normal(0, scale, (2, c)))
        self.encoder = [EncoderLayer(rng, c, config.heads, config.ffn_dim) for _ in range(config.encoder_layers)]
        self.encoder_norm = LayerNorm(c)
        self.queries = param(rng.normal(0, 1.0, (config.num_queries, c)))
        self.decoder = [DecoderLayer(rng, c, config.heads, config.ffn_dim) for _ in range(config.decoder_layers)]
        self.decoder_norm = LayerNorm(c)
        self.box_head = MLP(rng, [c, c, c, 4])
        self.class_head = Linear(rng, c, 2)
        self.mask_log_sharpness = param(np.array(np.log(40.0)))
        # alignment and counting heads
        self.reconstructor = TextReconstructor(rng, c, config.heads, config.ffn_dim)
        self.phrase_head = PhraseObjectHead(rng, c, c, c)
        self.global_proj = GlobalProjection(rng, c, c, c)
        self.count_head = CountHead(rng, 2 * c)

    # -- encoders ------------------------------------------------------------
    def encode_text(self, tokens: np.ndarray) -> Tensor:
        k = tokens.shape[1]
        if k == 0:
            raise ContractError("expression has no words")
        x = self.word_emb[tokens] + self.word_pos[np.arange(k)]
        return self.text_proj(x)

    def encode_scene(self, attrs: np.ndarray, boxes: np.ndarray) -> Tensor:
        x = (
            self.color_emb[attrs[..., 0]]
            + self.shape_emb[attrs[..., 1]]
            + self.size_emb[attrs[..., 2]]
            + self.box_enc(Tensor(fourier_box_features(boxes)))
        )
        return self.visual_proj(x)

    def encode_fuse(self, batch: Batch) -> tuple[Tensor, np.ndarray, Tensor]:
        """Fused encoder output ``(B, S + K, C)``, its validity mask, and the word features."""
        words = self.encode_text(batch.tokens)
        scene = self.encode_scene(batch.obj_attrs, batch.obj_boxes)
        x = concat([scene + self.modality_emb[0], words + self.modality_emb[1]], axis=1)
        valid = np.concatenate([batch.obj_valid, batch.word_valid], axis=1)
        bias = key_padding_bias(valid)
        for layer in self.encoder:
            x = layer(x, bias)
        return self.encoder_norm(x), valid, words

    def decode(self, memory: Tensor, valid: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        b = memory.shape[0]
        x = self.queries.unsqueeze(0) + Tensor(np.zeros((b, 1, 1)))
        bias = key_padding_bias(valid)
        for layer in self.decoder:
            x = layer(x, memory, bias)
        objects = self.decoder_norm(x)
        boxes = sigmoid(self.box_head(objects))
        logits = self.class_head(objects)
        return objects, boxes, logits

    def __call__(self, batch: Batch) -> QueryOutputs:
        memory, valid, words = self.encode_fuse(batch)
        objects, boxes, logits = self.decode(memory, valid)
        masked_words = self.encode_text(batch.masked_tokens)
        return QueryOutputs(objects, boxes, logits, words, masked_words)

    # -- masks -------------------------------------------------------------
    def soft_masks(self, boxes: Tensor) -> Tensor:
        """Soft rectangle masks ``(..., H, W)`` rendered from center boxes ``(..., 4)``."""
        size = self.config.mask_size
        centers = (np.arange(size) + 0.5) / size
        sharp = self.mask_log_sharpness.exp()
        half_w = boxes[..., 2:3] * 0.5
        half_h = boxes[..., 3:4] * 0.5
        cx, cy = boxes[..., 0:1], boxes[..., 1:2]
        x_prof = sigmoid((centers - (cx - half_w)) * sharp) * sigmoid(((cx + half_w) - centers) * sharp)
        y_prof = sigmoid((centers - (cy - half_h)) * sharp) * sigmoid(((cy + half_h) - centers) * sharp)
        return y_prof.unsqueeze(-1) * x_prof.unsqueeze(-2)
