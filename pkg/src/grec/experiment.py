"""End-to-end runs shared by the CLI report and the acceptance suite.

One pretrained backbone per seed is finetuned twice, with and without the
contrastive counting loss, so the two variants see identical data order.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

from .data import GroundingInstance
from .metrics import grec_report
from .model import GroundingModel, ModelConfig
from .train import Trainer, TrainSchedule, count_accuracy, infer

log = logging.getLogger(__name__)


@dataclass
class VariantResult:
    name: str
    precision_f1: float
    n_acc: float
    t_acc: float
    count_acc: float
    threshold_precision_f1: float
    threshold_n_acc: float
    per_kind: dict = field(default_factory=dict)
    seconds: float = 0.0


def evaluate(model: GroundingModel, test: Sequence[GroundingInstance], name: str = "model",
             seconds: float = 0.0) -> VariantResult:
    """Counter-gated and threshold-only scores of one trained model."""
    agc = grec_report(infer(model, test, use_agc=True), test)
    thr = grec_report(infer(model, test, use_agc=False), test)
    return VariantResult(
        name=name,
        precision_f1=agc.precision_f1,
        n_acc=agc.n_acc,
        t_acc=agc.t_acc,
        count_acc=count_accuracy(model, test),
        threshold_precision_f1=thr.precision_f1,
        threshold_n_acc=thr.n_acc,
        per_kind=agc.per_kind,
        seconds=seconds,
    )


def run_seed(train: Sequence[GroundingInstance], test: Sequence[GroundingInstance], seed: int,
             schedule: TrainSchedule | None = None, config: ModelConfig | None = None,
             ablate_supcon: bool = True) -> dict[str, VariantResult]:
    """Train the full model (and optionally the no-contrastive variant) for one seed."""
    base = schedule or TrainSchedule()
    schedule = TrainSchedule(base.pretrain_steps, base.finetune_steps, base.batch_size, base.lr, seed)
    cfg = ModelConfig(**{**(config or ModelConfig()).to_dict(), "seed": seed})
    start = time.perf_counter()
    trainer = Trainer(GroundingModel(cfg), schedule)
    trainer.fit(train, until=schedule.pretrain_steps, log_every=500)
    pre_seconds = time.perf_counter() - start
    variants = {"full": trainer}
    if ablate_supcon:
        nocon = copy.deepcopy(trainer)  # shares nothing with the original
        nocon.model.config.use_supcon = False
        variants["no_supcon"] = nocon
    results = {}
    for name, tr in variants.items():
        t0 = time.perf_counter()
        tr.fit(train, log_every=500)
        seconds = pre_seconds + time.perf_counter() - t0
        results[name] = evaluate(tr.model, test, name, seconds)
        log.info("seed %d %s: %s", seed, name, results[name])
    return results
