"""Synthetic grounding scenes and templated referring expressions.

A scene is a handful of attributed boxes. Expressions follow a tiny grammar::

    single/no-target   [SIZE] [COLOR] SHAPE
    multi              ALL [SIZE] [COLOR] SHAPE
    count phrase       TWO|THREE [SIZE] [COLOR] SHAPE
    ordinal            1ST|2ND|3RD SHAPE FROM-LEFT|FROM-RIGHT

The targets of an expression are exactly the scene objects it describes, so a
description matching nothing is a no-target expression.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import pairwise_iou, to_xyxy
from .counter import count_label

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle", "star")
SIZES = ("small", "medium", "large")
FUNCTION_WORDS = ("ALL", "1ST", "2ND", "3RD", "FROM-LEFT", "FROM-RIGHT", "TWO", "THREE")
SPECIAL = ("<pad>", "<mask>")

VOCAB = SPECIAL + COLORS + SHAPES + SIZES + FUNCTION_WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_ID["<pad>"]
MASK_ID = TOKEN_ID["<mask>"]
ORDINALS = ("1ST", "2ND", "3RD")
NUMBER_WORDS = {"TWO": 2, "THREE": 3}

KINDS = ("no_target", "single", "multi", "count_phrase")

SIZE_RANGES = ((0.08, 0.13), (0.14, 0.20), (0.21, 0.28))


class GenerationError(RuntimeError):
    """Object placement could not satisfy the overlap constraint."""


class FeasibilityError(ValueError):
    """The requested expression kind cannot be realized in the given scene."""


@dataclass
class SceneObject:
    color: int
    shape: int
    size: int
    box: tuple[float, float, float, float]

    @property
    def attrs(self) -> tuple[int, int, int]:
        return (self.color, self.shape, self.size)


@dataclass
class Scene:
    objects: list[SceneObject]
    distractor_count: int = 0

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)


@dataclass
class Expression:
    tokens: list[int]
    entity_positions: list[int]
    phrase_spans: list[tuple[int, int, list[int]]]
    target_indices: list[int]
    kind: str

    @property
    def words(self) -> list[str]:
        return [VOCAB[t] for t in self.tokens]


@dataclass
class GroundingInstance:
    id: str
    scene: Scene
    expression: Expression
    count_label: int = field(default=0)

    @property
    def gt_boxes(self) -> np.ndarray:
        return self.scene.boxes[self.expression.target_indices].reshape(-1, 4)

    def to_dict(self) -> dict:
        e = self.expression
        return {
            "version": FORMAT_VERSION,
            "id": self.id,
            "scene": {
                "objects": [{"attr": list(o.attrs), "box": [round(v, 6) for v in o.box]}
                            for o in self.scene.objects],
                "distractors": self.scene.distractor_count,
            },
            "expr": {
                "tokens": list(e.tokens),
                "entity": list(e.entity_positions),
                "phrases": [{"span": [a, b], "gts": list(g)} for a, b, g in e.phrase_spans],
                "kind": e.kind,
            },
            "targets": list(e.target_indices),
            "count": self.count_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundingInstance":
        if d.get("version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported instance format version {d.get('version')}")
        objs = [SceneObject(*o["attr"], box=tuple(o["box"])) for o in d["scene"]["objects"]]
        scene = Scene(objs, d["scene"].get("distractors", 0))
        ex = d["expr"]
        expr = Expression(
            tokens=list(ex["tokens"]),
            entity_positions=list(ex["entity"]),
            phrase_spans=[(p["span"][0], p["span"][1], list(p["gts"])) for p in ex["phrases"]],
            target_indices=list(d["targets"]),
            kind=ex["kind"],
        )
        return cls(str(d["id"]), scene, expr, int(d["count"]))


@dataclass
class SynthConfig:
    min_objects: int = 2
    max_objects: int = 8
    max_pair_iou: float = 0.5
    min_box_size: float = 0.05
    duplicate_prob: float = 0.4
    distractor_prob: float = 0.3
    kind_probs: dict = field(
        default_factory=lambda: {"no_target": 0.15, "single": 0.45, "multi": 0.30, "count_phrase": 0.10}
    )
    ordinal_prob: float = 0.25
    max_placement_tries: int = 1000


# -- scenes --------------------------------------------------------------------


def _place_box(rng, size_id: int, placed: list, cfg: SynthConfig):
    lo, hi = SIZE_RANGES[size_id]
    for _ in range(cfg.max_placement_tries):
        w = max(cfg.min_box_size, rng.uniform(lo, hi))
        h = max(cfg.min_box_size, rng.uniform(lo, hi))
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        box = (cx, cy, w, h)
        if not placed:
            return box
        ious = pairwise_iou(to_xyxy(np.array([box])), to_xyxy(np.array(placed)))
        if ious.max() < cfg.max_pair_iou:
            return box
    raise GenerationError(f"could not place object after {cfg.max_placement_tries} tries")


def generate_scene(rng: np.random.Generator, config: SynthConfig | None = None) -> Scene:
    """Random scene whose objects repeat attributes often enough for multi-target phrases."""
    cfg = config or SynthConfig()
    if not 1 <= cfg.min_objects <= cfg.max_objects:
        raise ValueError("object count bounds are inconsistent")
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    distractors = 0
    for _ in range(n):
        size = int(rng.integers(len(SIZES)))
        u = rng.random()
        if objects and u < cfg.duplicate_prob:
            src = objects[int(rng.integers(len(objects)))]
            color, shape = src.color, src.shape
        elif objects and u < cfg.duplicate_prob + cfg.distractor_prob:
            src = objects[int(rng.integers(len(objects)))]
            if rng.random() < 0.5:
                color = src.color
                shape = int((src.shape + rng.integers(1, len(SHAPES))) % len(SHAPES))
            else:
                shape = src.shape
                color = int((src.color + rng.integers(1, len(COLORS))) % len(COLORS))
            distractors += 1
        else:
            color = int(rng.integers(len(COLORS)))
            shape = int(rng.integers(len(SHAPES)))
        box = _place_box(rng, size, [o.box for o in objects], cfg)
        objects.append(SceneObject(color, shape, size, box))
    return Scene(objects, distractors)


# -- expressions -----------------------------------------------------------------


def _matches(obj: SceneObject, color, shape, size) -> bool:
    return (
        obj.shape == shape
        and (color is None or obj.color == color)
        and (size is None or obj.size == size)
    )


def _describe(color, shape, size) -> list[int]:
    toks = []
    if size is not None:
        toks.append(TOKEN_ID[SIZES[size]])
    if color is not None:
        toks.append(TOKEN_ID[COLORS[color]])
    toks.append(TOKEN_ID[SHAPES[shape]])
    return toks


def _candidate_descriptions(scene: Scene):
    """Every (color, shape, size) description with optional color/size, and its matches."""
    out = []
    for shape in range(len(SHAPES)):
        for color in (None, *range(len(COLORS))):
            for size in (None, *range(len(SIZES))):
                idx = [i for i, o in enumerate(scene.objects) if _matches(o, color, shape, size)]
                out.append(((color, shape, size), idx))
    return out


def _attribute_expression(prefix: list[int], desc, targets, kind) -> Expression:
    color, shape, size = desc
    noun = _describe(color, shape, size)
    tokens = prefix + noun
    start = len(prefix)
    entity = [len(tokens) - 1]
    spans = [(start, len(tokens), list(targets))]
    return Expression(tokens, entity, spans, list(targets), kind)


def _ordinal_expression(scene: Scene, rng, want_target: bool) -> Expression:
    shape = int(rng.integers(len(SHAPES)))
    ordinal = int(rng.integers(len(ORDINALS)))
    direction = "FROM-LEFT" if rng.random() < 0.5 else "FROM-RIGHT"
    same = [i for i, o in enumerate(scene.objects) if o.shape == shape]
    has_target = ordinal < len(same)
    if has_target != want_target:
        raise FeasibilityError("ordinal does not produce the requested kind")
    same.sort(key=lambda i: scene.objects[i].box[0], reverse=direction == "FROM-RIGHT")
    targets = [same[ordinal]] if has_target else []
    tokens = [TOKEN_ID[ORDINALS[ordinal]], TOKEN_ID[SHAPES[shape]], TOKEN_ID[direction]]
    return Expression(
        tokens, [1], [(0, 3, list(targets))], targets, "single" if has_target else "no_target"
    )


def generate_expression(scene: Scene, kind: str, rng: np.random.Generator,
                        config: SynthConfig | None = None) -> Expression:
    """Templated expression of the requested kind whose targets are its exact matches.

    Raises :class:`FeasibilityError` when the scene cannot realize ``kind``.
    """
    cfg = config or SynthConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown expression kind {kind!r}")
    if kind in ("single", "no_target") and rng.random() < cfg.ordinal_prob:
        try:
            return _ordinal_expression(scene, rng, want_target=kind == "single")
        except FeasibilityError:
            pass
    cands = _candidate_descriptions(scene)
    if kind == "no_target":
        # only shapes or colors that occur keep the no-target case non-trivial
        present_shapes = {o.shape for o in scene.objects}
        pool = [(d, idx) for d, idx in cands if not idx and d[1] in present_shapes]
        if not pool:
            raise FeasibilityError("every description matches some object")
        desc, _ = pool[int(rng.integers(len(pool)))]
        prefix = [TOKEN_ID["ALL"]] if rng.random() < 0.3 else []
        return _attribute_expression(prefix, desc, [], kind)
    if kind == "single":
        pool = [(d, idx) for d, idx in cands if len(idx) == 1]
        if not pool:
            raise FeasibilityError("no description isolates exactly one object")
        desc, idx = pool[int(rng.integers(len(pool)))]
        return _attribute_expression([], desc, idx, kind)
    if kind == "multi":
        pool = [(d, idx) for d, idx in cands if len(idx) >= 2]
        if not pool:
            raise FeasibilityError("no description matches two or more objects")
        desc, idx = pool[int(rng.integers(len(pool)))]
        return _attribute_expression([TOKEN_ID["ALL"]], desc, idx, kind)
    pool = [(d, idx) for d, idx in cands if len(idx) in NUMBER_WORDS.values()]
    if not pool:
        raise FeasibilityError("no description matches two or three objects")
    desc, idx = pool[int(rng.integers(len(pool)))]
    word = "TWO" if len(idx) == 2 else "THREE"
    return _attribute_expression([TOKEN_ID[word]], desc, idx, kind)


def generate_instance(rng: np.random.Generator, kind: str, instance_id: str,
                      config: SynthConfig | None = None, max_tries: int = 200) -> GroundingInstance:
    for _ in range(max_tries):
        scene = generate_scene(rng, config)
        try:
            expr = generate_expression(scene, kind, rng, config)
        except FeasibilityError:
            continue
        return GroundingInstance(instance_id, scene, expr, count_label(len(expr.target_indices)))
    raise GenerationError(f"could not realize a {kind} expression in {max_tries} scenes")


def sample_kind(rng: np.random.Generator, config: SynthConfig | None = None) -> str:
    cfg = config or SynthConfig()
    kinds = list(cfg.kind_probs)
    p = np.array([cfg.kind_probs[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=p / p.sum()))]


SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


def generate_split(name: str, n: int, seed: int, config: SynthConfig | None = None) -> list[GroundingInstance]:
    """``n`` instances; instance ``i`` draws from its own seed ``(seed, split, i)``."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, SPLIT_INDEX[name], i])
        out.append(generate_instance(rng, sample_kind(rng, config), f"{name}-{i:06d}", config))
    return out


def write_jsonl(path, instances) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[GroundingInstance]:
    with open(path) as fh:
        return [GroundingInstance.from_dict(json.loads(line)) for line in fh if line.strip()]


def make_split(out_dir, sizes: dict[str, int], seed: int, config: SynthConfig | None = None) -> dict:
    """Write ``{split}.jsonl`` files plus ``manifest.json`` with per-split kind histograms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config or SynthConfig()
    manifest = {"version": FORMAT_VERSION, "seed": seed, "config": asdict(cfg), "splits": {}}
    for name, n in sizes.items():
        instances = generate_split(name, n, seed, cfg)
        write_jsonl(out / f"{name}.jsonl", instances)
        manifest["splits"][name] = {
            "count": n,
            "kinds": dict(sorted(Counter(i.expression.kind for i in instances).items())),
            "count_labels": {str(k): v for k, v in sorted(Counter(i.count_label for i in instances).items())},
        }
        log.info("wrote %d %s instances", n, name)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
