"""Training objectives, the two-phase training loop, inference and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import (
    masked_recovery_loss,
    pairwise_match_scores,
    phrase_object_loss,
    text_image_loss,
)
from .assignment import MatchAssignment, build_phrase_gt_map, hungarian, matching_cost
from .boxes import box_losses, dice_loss, focal_loss, rasterize_box
from .counter import (
    MemoryBank,
    count_ce_loss,
    global_feature,
    select_by_threshold,
    select_targets,
    supcon_loss,
)
from .data import GroundingInstance
from .model import Batch, GroundingModel, ModelConfig, QueryOutputs, collate
from .nn import Adam
from .tensor import Tensor, backward, log_softmax, no_grad, softmax

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
OBJECT, NO_OBJECT = 0, 1

LOSS_COLUMNS = (
    "total", "det", "bbox", "giou", "class", "mask", "dice",
    "w2o", "p2o", "t2i", "count_cls", "con",
)


class NumericalError(FloatingPointError):
    """A loss became NaN or infinite."""


def _zero() -> Tensor:
    return Tensor(0.0)


# -- matching ---------------------------------------------------------------------


def match_batch(outputs: QueryOutputs, batch: Batch, config: ModelConfig) -> list[MatchAssignment]:
    """Hungarian assignment per sample; computed on values only, never differentiated."""
    w = config.weights
    boxes = outputs.boxes.data
    prob = softmax(Tensor(outputs.class_logits.data), axis=-1).data[..., OBJECT]
    out = []
    for b, gt in enumerate(batch.gt_boxes):
        cost = matching_cost(boxes[b], prob[b], gt, w.cls, w.bbox, w.giou)
        out.append(hungarian(cost))
    return out


# -- losses -----------------------------------------------------------------------


def detection_loss(model: GroundingModel, outputs: QueryOutputs, batch: Batch,
                   matches: Sequence[MatchAssignment]) -> dict[str, Tensor]:
    """Weighted box, GIoU and object/no-object terms (plus mask terms when enabled).

    Matched queries learn their box and the object class; all others learn
    no-object. Box terms average over the matched pairs of the batch.
    """
    cfg = model.config
    w = cfg.weights
    bsz, n = outputs.boxes.shape[:2]
    target = np.full((bsz, n), NO_OBJECT, dtype=np.int64)
    bi, qi, gts = [], [], []
    for b, m in enumerate(matches):
        for q, g in m.pairs:
            target[b, q] = OBJECT
            bi.append(b)
            qi.append(q)
            gts.append(batch.gt_boxes[b][g])
    lp = log_softmax(outputs.class_logits, axis=-1)
    bb, qq = np.meshgrid(np.arange(bsz), np.arange(n), indexing="ij")
    l_class = -lp[bb, qq, target].mean()
    parts = {"class": l_class, "bbox": _zero(), "giou": _zero(), "mask": _zero(), "dice": _zero()}
    if bi:
        pred = outputs.boxes[np.array(bi), np.array(qi)]
        gt = np.array(gts)
        l1, lg = box_losses(pred, gt)
        parts["bbox"] = l1.mean()
        parts["giou"] = lg.mean()
        if cfg.use_masks:
            soft = model.soft_masks(pred)
            gt_masks = np.stack([rasterize_box(g, cfg.mask_size) for g in gt]).astype(np.float64)
            parts["mask"] = focal_loss(soft, gt_masks)
            parts["dice"] = dice_loss(soft, gt_masks)
    det = w.bbox * parts["bbox"] + w.giou * parts["giou"] + w.cls * parts["class"]
    if cfg.use_masks:
        det = det + w.mask * parts["mask"] + w.dice * parts["dice"]
    parts["det"] = det
    return parts


def phrase_targets(batch: Batch, matches: Sequence[MatchAssignment], num_queries: int) -> np.ndarray:
    m = batch.phrase_pool.shape[1]
    y = np.zeros((len(batch), m, num_queries))
    for b, (gts, match) in enumerate(zip(batch.phrase_gts, matches)):
        if gts:
            y[b, : len(gts)] = build_phrase_gt_map(match, gts, num_queries, len(batch.gt_boxes[b]))
    return y


def alignment_losses(model: GroundingModel, outputs: QueryOutputs, batch: Batch,
                     matches: Sequence[MatchAssignment]) -> dict[str, Tensor]:
    cfg = model.config
    parts = {"w2o": _zero(), "p2o": _zero(), "t2i": _zero()}
    words = outputs.words
    if cfg.use_w2o:
        recon = model.reconstructor(outputs.objects, outputs.masked_words)
        parts["w2o"] = masked_recovery_loss(words, recon, batch.has_target, batch.word_valid).mean()
    if cfg.use_p2o:
        phrases = Tensor(batch.phrase_pool) @ words
        s = model.phrase_head(phrases, outputs.objects)
        y = phrase_targets(batch, matches, cfg.num_queries)
        valid = batch.phrase_valid[:, :, None]
        parts["p2o"] = phrase_object_loss(s, y, valid).mean()
    if cfg.use_t2i:
        o = model.global_proj.obj(outputs.objects)
        wv = model.global_proj.word(words)
        s_t, s_i = pairwise_match_scores(o, wv, batch.word_valid)
        parts["t2i"] = text_image_loss(s_t, s_i).mean()
    parts["align"] = parts["w2o"] + parts["p2o"] + parts["t2i"]
    return parts


def counter_losses(model: GroundingModel, outputs: QueryOutputs, batch: Batch,
                   bank: MemoryBank | None) -> dict[str, Tensor]:
    cfg = model.config
    feature = global_feature(outputs.words, outputs.objects, batch.word_valid)
    logits = model.count_head(feature)
    parts = {"feature": feature, "logits": logits}
    parts["count_cls"] = count_ce_loss(logits, batch.count_labels).mean()
    if cfg.use_supcon and bank is not None:
        parts["con"] = supcon_loss(feature, batch.count_labels, bank, cfg.tau).mean()
    else:
        parts["con"] = _zero()
    parts["agc"] = parts["count_cls"] + parts["con"]
    return parts


def pretrain_loss(model: GroundingModel, batch: Batch, outputs: QueryOutputs | None = None,
                  matches=None) -> tuple[Tensor, dict]:
    """Alignment losses plus detection loss, batch-averaged."""
    outputs = outputs if outputs is not None else model(batch)
    matches = matches if matches is not None else match_batch(outputs, batch, model.config)
    det = detection_loss(model, outputs, batch, matches)
    align = alignment_losses(model, outputs, batch, matches)
    total = align["align"] + det["det"]
    return total, {**det, **align}


def finetune_loss(model: GroundingModel, batch: Batch, bank: MemoryBank | None,
                  outputs: QueryOutputs | None = None, matches=None) -> tuple[Tensor, dict]:
    """Detection loss plus counting losses (when the counter is enabled)."""
    outputs = outputs if outputs is not None else model(batch)
    matches = matches if matches is not None else match_batch(outputs, batch, model.config)
    det = detection_loss(model, outputs, batch, matches)
    parts = dict(det)
    total = det["det"]
    if model.config.use_agc:
        agc = counter_losses(model, outputs, batch, bank)
        parts.update(agc)
        total = total + agc["agc"]
    return total, parts


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainSchedule:
    pretrain_steps: int = 3000
    finetune_steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def _scalar_parts(total: Tensor, parts: dict) -> dict[str, float]:
    row = {k: 0.0 for k in LOSS_COLUMNS}
    row["total"] = float(total.data)
    for k in LOSS_COLUMNS[1:]:
        if k in parts:
            row[k] = float(parts[k].data)
    return row


class Trainer:
    """Owns the model parameters, optimizer state, memory bank and data-order RNG."""

    def __init__(self, model: GroundingModel, schedule: TrainSchedule):
        self.model = model
        self.schedule = schedule
        self.params = model.parameters()
        self.optimizer = Adam(self.params, lr=schedule.lr)
        self.bank = MemoryBank(model.config.bank_capacity)
        self.rng = np.random.default_rng(schedule.seed)
        self.step = 0
        self.history: list[dict] = []

    @property
    def phase(self) -> str:
        return "pretrain" if self.step < self.schedule.pretrain_steps else "finetune"

    @property
    def total_steps(self) -> int:
        return self.schedule.pretrain_steps + self.schedule.finetune_steps

    def _check_finite(self, total: Tensor, parts: dict) -> None:
        if not np.isfinite(total.data):
            bad = {k: float(v.data) for k, v in parts.items() if isinstance(v, Tensor) and v.size == 1}
            raise NumericalError(f"non-finite loss at step {self.step}: {bad}")

    def train_step(self, instances: Sequence[GroundingInstance]) -> dict[str, float]:
        batch = collate(list(instances), self.rng, self.model.config.max_words)
        phase = self.phase
        self.optimizer.zero_grad()
        if phase == "pretrain":
            total, parts = pretrain_loss(self.model, batch)
        else:
            total, parts = finetune_loss(self.model, batch, self.bank)
        self._check_finite(total, parts)
        backward(total)
        self.optimizer.step()
        if phase == "finetune" and "feature" in parts:
            self.bank.push_batch(parts["feature"].data, batch.count_labels)
        row = {"phase": phase, "step": self.step, **_scalar_parts(total, parts)}
        self.history.append(row)
        self.step += 1
        return row

    def _next_batch(self, data: Sequence[GroundingInstance]):
        bs = min(self.schedule.batch_size, len(data))
        if not hasattr(self, "_order") or self._cursor + bs > len(self._order):
            self._order = self.rng.permutation(len(data))
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + bs]
        self._cursor += bs
        return [data[i] for i in idx]

    def fit(self, data: Sequence[GroundingInstance], until: int | None = None,
            log_every: int = 100) -> list[dict]:
        """Run steps until ``until`` (default: the end of both phases)."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < until:
            row = self.train_step(self._next_batch(data))
            if log_every and row["step"] % log_every == 0:
                log.info("step %d [%s] total=%.4f det=%.4f", row["step"], row["phase"],
                         row["total"], row["det"])
        return self.history

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("phase", "step") + LOSS_COLUMNS)
            writer.writeheader()
            writer.writerows(self.history)

    # -- checkpoints ---------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path, schedule: TrainSchedule | None = None) -> "Trainer":
        return load_checkpoint(path, schedule)


def save_checkpoint(path, trainer: Trainer) -> None:
    """Parameters, optimizer moments, memory bank and RNG state in one ``.npz``."""
    model = trainer.model
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    opt = trainer.optimizer.state()
    for i, (m, v) in enumerate(zip(opt["m"], opt["v"])):
        arrays[f"adam_m/{i}"] = m
        arrays[f"adam_v/{i}"] = v
    bank = trainer.bank.state()
    arrays["bank/features"] = bank["features"]
    arrays["bank/labels"] = bank["labels"]
    order = getattr(trainer, "_order", None)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.architecture_hash(),
        "schedule": trainer.schedule.__dict__,
        "step": trainer.step,
        "adam_t": opt["t"],
        "rng": trainer.rng.bit_generator.state,
        "cursor": getattr(trainer, "_cursor", 0),
        "order": None if order is None else order.tolist(),
        "history": trainer.history,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class CheckpointError(ValueError):
    pass


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["meta"]).decode())


def load_checkpoint(path, schedule: TrainSchedule | None = None,
                    expected: ModelConfig | None = None) -> Trainer:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig.from_dict(meta["config"])
        if config.architecture_hash() != meta["config_hash"]:
            raise CheckpointError("checkpoint config hash does not match its stored config")
        if expected is not None and expected.architecture_hash() != meta["config_hash"]:
            raise CheckpointError(
                f"config hash mismatch: checkpoint {meta['config_hash']} "
                f"vs model {expected.architecture_hash()}"
            )
        model = GroundingModel(config)
        model.load_state_dict({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        trainer = Trainer(model, schedule or TrainSchedule(**meta["schedule"]))
        n = len(trainer.params)
        trainer.optimizer.load_state({
            "t": meta["adam_t"],
            "m": [z[f"adam_m/{i}"] for i in range(n)],
            "v": [z[f"adam_v/{i}"] for i in range(n)],
        })
        trainer.bank.load_state({"features": z["bank/features"], "labels": z["bank/labels"]})
    trainer.rng.bit_generator.state = meta["rng"]
    trainer.step = int(meta["step"])
    trainer.history = list(meta.get("history", []))
    if meta.get("order") is not None:
        trainer._order = np.array(meta["order"], dtype=np.int64)
        trainer._cursor = int(meta["cursor"])
    return trainer


# -- inference -------------------------------------------------------------------


@dataclass
class Prediction:
    id: str
    boxes: np.ndarray  # (P, 4) center format
    scores: np.ndarray  # (P,)
    count: int  # predicted (or oracle) count class; -1 when the counter is unused
    mask: np.ndarray | None = None  # union mask when masks are enabled
    all_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "boxes": [[round(float(v), 6) for v in b] for b in self.boxes],
            "scores": [round(float(s), 6) for s in self.scores],
            "count": int(self.count),
        }
        if self.mask is not None:
            d["mask_rle"] = mask_to_rle(self.mask)
        return d


def mask_to_rle(mask: np.ndarray) -> dict:
    """Row-major run lengths starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs, current, length = [], False, 0
    for v in flat:
        if v == current:
            length += 1
        else:
            runs.append(length)
            current, length = v, 1
    runs.append(length)
    return {"size": list(np.shape(mask)), "counts": runs}


def rle_to_mask(rle: dict) -> np.ndarray:
    flat, value = [], False
    for n in rle["counts"]:
        flat.extend([value] * n)
        value = not value
    return np.array(flat, dtype=bool).reshape(rle["size"])


def forward_eval(model: GroundingModel, instances: Sequence[GroundingInstance]):
    """Values of the query outputs and count logits without recording a graph."""
    with no_grad():
        batch = collate(list(instances), None, model.config.max_words)
        out = model(batch)
        feature = global_feature(out.words, out.objects, batch.word_valid)
        count_logits = model.count_head(feature).data
        prob = out.object_prob.data
    return out.boxes.data, prob, count_logits


def infer(model: GroundingModel, instances: Sequence[GroundingInstance], theta: float | None = None,
          use_agc: bool | None = None, oracle_count: bool = False, batch_size: int = 256,
          force_count: int | None = None) -> list[Prediction]:
    """Predicted box sets. The counter chooses how many proposals to keep unless
    ``use_agc`` is off, in which case proposals above ``theta`` are kept."""
    cfg = model.config
    theta = cfg.theta if theta is None else theta
    use_agc = cfg.use_agc if use_agc is None else use_agc
    preds: list[Prediction] = []
    for start in range(0, len(instances), batch_size):
        chunk = list(instances[start : start + batch_size])
        boxes, prob, count_logits = forward_eval(model, chunk)
        for b, inst in enumerate(chunk):
            if force_count is not None:
                count = int(force_count)
            elif oracle_count:
                count = inst.count_label
            else:
                count = int(np.argmax(count_logits[b]))
            if use_agc:
                keep = select_targets(prob[b], count, theta)
            else:
                keep = select_by_threshold(prob[b], theta)
                count = -1
            mask = None
            if cfg.use_masks:
                mask = np.zeros((cfg.mask_size, cfg.mask_size), dtype=bool)
                if keep:
                    with no_grad():
                        soft = model.soft_masks(Tensor(boxes[b, keep])).data
                    mask = (soft > 0.5).any(axis=0)
            preds.append(Prediction(inst.id, boxes[b, keep].reshape(-1, 4), prob[b, keep], count,
                                    mask, prob[b].copy()))
    return preds


def count_accuracy(model: GroundingModel, instances: Sequence[GroundingInstance], batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(instances), batch_size):
        chunk = list(instances[start : start + batch_size])
        _, _, logits = forward_eval(model, chunk)
        labels = np.array([i.count_label for i in chunk])
        hits += int((np.argmax(logits, axis=-1) == labels).sum())
    return hits / max(len(instances), 1)


def write_predictions(path, preds: Sequence[Prediction]) -> None:
    Path(path).write_text("".join(json.dumps(p.to_dict()) + "\n" for p in preds))


def read_predictions(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
