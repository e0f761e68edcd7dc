"""Finite-difference checks of every training loss at tiny dimensions."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .alignment import (
    masked_recovery_loss,
    pairwise_match_scores,
    phrase_object_loss,
    phrase_object_map,
    text_image_loss,
)
from .boxes import box_losses, dice_loss, focal_loss
from .counter import MemoryBank, count_ce_loss, supcon_loss
from .data import Expression, GroundingInstance, Scene, SceneObject
from .model import GroundingModel, ModelConfig, QueryOutputs, collate
from .tensor import Tensor, grad_check, log_softmax, sigmoid
from .train import finetune_loss, match_batch, pretrain_loss

TINY_DIMS = dict(C=8, N=5, K=4, M=2, B=3)


def _boxes(rng, shape):
    return np.concatenate([rng.uniform(0.3, 0.7, shape + (2,)), rng.uniform(0.1, 0.3, shape + (2,))], axis=-1)


def _toy_batch(rng, b: int, k: int):
    """``b`` instances with ``k`` words and two phrases each, built directly."""
    out = []
    for i in range(b):
        n_obj = int(rng.integers(2, 5))
        objs = [SceneObject(int(rng.integers(6)), int(rng.integers(4)), int(rng.integers(3)),
                            tuple(_boxes(rng, ())))
                for _ in range(n_obj)]
        n_t = int(rng.integers(0, n_obj + 1))
        targets = sorted(rng.choice(n_obj, n_t, replace=False).tolist())
        tokens = rng.integers(2, 20, k).tolist()
        spans = [(0, 2, targets[:1]), (2, k, targets)]
        expr = Expression(tokens, [k - 1], spans, targets, "multi")
        out.append(GroundingInstance(f"g{i}", Scene(objs), expr, min(n_t, 4)))
    return out


def loss_cases(seed: int, dims: dict | None = None) -> dict[str, tuple[Callable, list[Tensor]]]:
    """``name -> (f, inputs)`` for every loss, with inputs drawn from ``seed``."""
    d = {**TINY_DIMS, **(dims or {})}
    c, n, k, m, b = d["C"], d["N"], d["K"], d["M"], d["B"]
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable, list[Tensor]]] = {}

    words = Tensor(rng.normal(size=(k, c)))
    recon = Tensor(rng.normal(size=(k, c)))
    cases["w2o"] = (lambda w, r: masked_recovery_loss(w, r, 1.0), [words, recon])

    w1, w2 = Tensor(rng.normal(size=(c, c)) * 0.3), Tensor(rng.normal(size=(c, c)) * 0.3)
    y = (rng.random((m, n)) > 0.5).astype(np.float64)
    cases["p2o"] = (
        lambda p, o, a, b_: phrase_object_loss(phrase_object_map(p, o, a, b_), y),
        [Tensor(rng.normal(size=(m, c))), Tensor(rng.normal(size=(n, c))), w1, w2],
    )

    cases["t2i"] = (
        lambda o, w: text_image_loss(*pairwise_match_scores(o, w)).sum(),
        [Tensor(rng.normal(size=(b, n, c)) * 0.5), Tensor(rng.normal(size=(b, k, c)) * 0.5)],
    )

    gt = _boxes(rng, (n,))
    cases["bbox_l1"] = (lambda p: box_losses(p, gt)[0].sum(), [Tensor(_boxes(rng, (n,)))])
    cases["giou"] = (lambda p: box_losses(p, gt)[1].sum(), [Tensor(_boxes(rng, (n,)))])

    cls_target = rng.integers(0, 2, n)
    cases["class"] = (
        lambda z: -log_softmax(z, axis=-1)[np.arange(n), cls_target].mean(),
        [Tensor(rng.normal(size=(n, 2)))],
    )

    gt_mask = (rng.random((2, 6, 6)) > 0.5).astype(np.float64)
    cases["mask_focal"] = (lambda z: focal_loss(sigmoid(z), gt_mask), [Tensor(rng.normal(size=(2, 6, 6)))])
    cases["mask_dice"] = (lambda z: dice_loss(sigmoid(z), gt_mask), [Tensor(rng.normal(size=(2, 6, 6)))])

    labels = rng.integers(0, 5, b)
    cases["count_cls"] = (lambda z: count_ce_loss(z, labels).mean(), [Tensor(rng.normal(size=(b, 5)))])

    bank = MemoryBank(capacity=16)
    bank.push_batch(rng.normal(size=(12, 2 * c)), rng.integers(0, 5, 12))
    cases["supcon"] = (
        lambda a: supcon_loss(a, labels, bank, tau=0.5).mean(),
        [Tensor(rng.normal(size=(b, 2 * c)))],
    )

    cfg = ModelConfig(embed_dim=c, num_queries=n, encoder_layers=1, decoder_layers=1, heads=2,
                      ffn_dim=2 * c, max_words=k, seed=seed, use_masks=True, mask_size=8)
    model = GroundingModel(cfg)
    batch = collate(_toy_batch(rng, b, k), rng, k)
    leaves = [
        Tensor(rng.normal(size=(b, n, c))),
        Tensor(rng.normal(size=(b, n, 4))),
        Tensor(rng.normal(size=(b, n, 2))),
        Tensor(rng.normal(size=(b, k, c))),
        Tensor(rng.normal(size=(b, k, c))),
    ]

    def outputs(o, bx, z, w, mw):
        return QueryOutputs(o, sigmoid(bx), z, w, mw)

    matches = match_batch(outputs(*leaves), batch, cfg)
    cases["pretrain"] = (lambda *xs: pretrain_loss(model, batch, outputs(*xs), matches)[0], leaves)
    ft_bank = MemoryBank(capacity=16)
    ft_bank.push_batch(rng.normal(size=(8, 2 * c)), rng.integers(0, 5, 8))
    cases["finetune"] = (lambda *xs: finetune_loss(model, batch, ft_bank, outputs(*xs), matches)[0], leaves)
    return cases


def run_suite(seeds, dims: dict | None = None, eps: float = 1e-6, only=None) -> dict[str, float]:
    """Worst relative error per loss over ``seeds`` (optionally restricted to ``only``)."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, (f, inputs) in loss_cases(int(seed), dims).items():
            if only is not None and name not in only:
                continue
            err = grad_check(f, inputs, eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
