"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -s`` and in the captured output of failures).
"""

import math
import time

import numpy as np
import pytest

from grec.alignment import masked_recovery_loss, phrase_object_loss, text_image_loss
from grec.assignment import hungarian
from grec.boxes import dice_loss, focal_loss
from grec.counter import MANY, MemoryBank, count_ce_loss, select_targets, supcon_loss
from grec.data import Expression, GroundingInstance, Scene, SceneObject, generate_split
from grec.experiment import run_seed
from grec.gradsuite import loss_cases, run_suite
from grec.metrics import gres_report, grec_report, sample_f1
from grec.tensor import Tensor, backward
from grec.train import TrainSchedule


def verdict(n: int, ok: bool, detail: str) -> None:
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


# -- 1: gradients -------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    # every individual loss plus the pretraining composite; the finetuning composite
    # is a sum of already-checked terms and is covered by the unit tests
    names = [n for n in loss_cases(0) if n != "finetune"]
    start = time.perf_counter()
    worst = run_suite(range(20), only=names)
    seconds = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-3 and seconds < 60
    verdict(1, ok, f"max rel err {top:.2e} over {len(worst)} losses x 20 seeds in {seconds:.1f}s")
    assert top < 1e-3, worst
    assert seconds < 60


# -- 2: matching ----------------------------------------------------------------------


def exhaustive_assignment(cost):
    """Optimal injection of the smaller side, enumerated over subsets of used columns.

    Rows are processed in order; the state is the set of columns already taken.
    Independent of the Hungarian implementation.
    """
    transpose = cost.shape[0] < cost.shape[1]
    c = cost.T if transpose else cost
    rows, cols = c.shape
    full = (1 << cols) - 1
    best = {0: (0.0, ())}
    for r in range(rows):
        nxt = dict(best)  # row r left unmatched
        for used, (val, pairs) in best.items():
            for g in range(cols):
                if used >> g & 1:
                    continue
                key = used | 1 << g
                cand = (val + c[r, g], pairs + ((r, g),))
                if key not in nxt or cand[0] < nxt[key][0]:
                    nxt[key] = cand
        best = nxt
    val, pairs = best[full]
    if transpose:
        pairs = tuple((g, r) for r, g in pairs)
    return val, sorted(pairs)


def test_criterion_2_matching_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        small = int(rng.integers(1, 8))
        large = int(rng.integers(small, small + 6))
        shape = (large, small) if rng.random() < 0.7 else (small, large)
        cost = rng.random(shape) * rng.choice([1.0, 10.0, 100.0])
        m = hungarian(cost)
        val, pairs = exhaustive_assignment(cost)
        if abs(m.total_cost(cost) - val) > 1e-9 or m.pairs != pairs:
            bad += 1
    seconds = time.perf_counter() - start
    ok = bad == 0 and seconds < 30
    verdict(2, ok, f"{1000 - bad}/1000 matrices agree, {seconds:.1f}s")
    assert bad == 0
    assert seconds < 30


# -- 3: closed forms --------------------------------------------------------------------


def test_criterion_3_closed_forms():
    checks = {}
    s = Tensor(np.array([[0.42]]))
    checks["t2i B=1"] = abs(float(text_image_loss(s, s).data[0])) <= 1e-12
    m, n = 2, 5
    y = np.random.default_rng(0).integers(0, 2, (m, n))
    p2o = float(phrase_object_loss(Tensor(np.full((m, n), 0.5)), y).data)
    checks["p2o uniform"] = abs(p2o - m * n * math.log(2)) <= 1e-9
    w = Tensor(np.random.default_rng(1).normal(size=(4, 8)), requires_grad=True)
    r = Tensor(np.random.default_rng(2).normal(size=(4, 8)), requires_grad=True)
    loss = masked_recovery_loss(w, r, 0.0)
    backward(loss)
    checks["w2o alpha=0"] = float(loss.data) == 0.0 and not np.any(w.grad) and not np.any(r.grad)
    checks["cls uniform"] = abs(float(count_ce_loss(Tensor(np.zeros(5)), 2).data) - math.log(5)) <= 1e-9
    bank = MemoryBank(capacity=2)
    bank.push(np.array([1.0, 0.0]), 1)
    bank.push(np.array([0.0, 1.0]), 3)
    con = float(supcon_loss(Tensor(np.array([1.0, 0.0])), 1, bank, tau=1.0).data)
    checks["supcon fixture"] = abs(con + math.log(math.e / (math.e + 1))) <= 1e-9
    failed = [k for k, v in checks.items() if not v]
    verdict(3, not failed, f"{len(checks) - len(failed)}/{len(checks)} closed forms hold")
    assert not failed


# -- 4: metrics -----------------------------------------------------------------------


def _inst(i, boxes, targets):
    kind = "no_target" if not targets else ("single" if len(targets) == 1 else "multi")
    expr = Expression([2], [0], [(0, 1, list(targets))], list(targets), kind)
    return GroundingInstance(f"m{i}", Scene([SceneObject(0, 0, 0, b) for b in boxes]), expr, min(len(targets), 4))


P = (0.2, 0.2, 0.2, 0.2)
Q = (0.6, 0.6, 0.2, 0.2)
R = (0.3, 0.8, 0.2, 0.2)


def test_criterion_4_metric_oracle():
    # instance, prediction, hand-scored pass
    fixture = [
        (_inst(0, [P, Q], []), [], True),
        (_inst(1, [P, Q], []), [Q], False),
        (_inst(2, [P], []), [], True),
        (_inst(3, [P, Q], [0]), [(0.21, 0.2, 0.2, 0.2)], True),
        (_inst(4, [P, Q], [0]), [Q], False),
        (_inst(5, [P, Q], [1]), [], False),
        (_inst(6, [P, Q, R], [0, 1]), [Q, P], True),
        (_inst(7, [P, Q, R], [0, 1, 2]), [P, Q, R, (0.9, 0.1, 0.1, 0.1)], False),
        (_inst(8, [P, Q, R], [0, 2]), [P, (0.4, 0.8, 0.2, 0.2)], False),  # IoU 1/3 on R
        (_inst(9, [P, Q, R], [1, 2]), [R, Q], True),
    ]
    data = [f[0] for f in fixture]
    preds = [{"id": f[0].id, "boxes": f[1]} for f in fixture]
    rep = grec_report(preds, data)
    fixture_ok = rep.precision_f1 == 5 / 10 and rep.n_acc == 2 / 3

    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(1000):
        k = int(rng.integers(1, 5))
        gt = np.column_stack([rng.uniform(0.15, 0.85, (k, 2)), rng.uniform(0.05, 0.2, (k, 2))])
        pred = gt.copy()
        drop = int(rng.integers(0, k + 1))  # drop some matched boxes
        pred = pred[drop:]
        f_base, _ = sample_f1(pred, gt)
        # adding an unmatched box never raises F1
        extra = np.vstack([pred, [[3.0, 3.0, 0.1, 0.1]]])
        f_extra, ok_extra = sample_f1(extra, gt)
        # removing a correct box never raises F1
        f_less = sample_f1(pred[1:], gt)[0] if len(pred) else f_base
        # moving a correct box far away never raises F1
        moved = pred.copy()
        if len(moved):
            moved[0, :2] += 2.0
        f_moved = sample_f1(moved, gt)[0]
        if f_extra > f_base or ok_extra or f_less > f_base or f_moved > f_base or not 0 <= f_base <= 1:
            violations += 1
    ok = fixture_ok and violations == 0
    verdict(4, ok, f"fixture Pr={rep.precision_f1:.2f} N-acc={rep.n_acc:.3f}; {violations} monotonicity violations")
    assert fixture_ok
    assert violations == 0


# -- 5 and 6: trained models ---------------------------------------------------------

SEEDS = (0, 1, 2)
BUDGET_SECONDS = 20 * 60


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    train = generate_split("train", 20000, 0)
    test = generate_split("test", 1000, 0)
    gen_seconds = time.perf_counter() - t0
    results = {seed: run_seed(train, test, seed, TrainSchedule()) for seed in SEEDS}
    return gen_seconds, results


def test_criterion_5_end_to_end(trained):
    gen_seconds, results = trained
    full = results[0]["full"]
    seconds = gen_seconds + full.seconds
    ok = full.precision_f1 >= 0.85 and full.n_acc >= 0.85 and full.count_acc >= 0.90 and seconds <= BUDGET_SECONDS
    verdict(5, ok, f"Pr={full.precision_f1:.3f} N-acc={full.n_acc:.3f} count={full.count_acc:.3f} "
                   f"in {seconds / 60:.1f} min")
    assert full.precision_f1 >= 0.85
    assert full.n_acc >= 0.85
    assert full.count_acc >= 0.90
    assert seconds <= BUDGET_SECONDS


def test_criterion_6_directional_ablation(trained):
    _, results = trained
    pr_gaps = [r["full"].precision_f1 - r["full"].threshold_precision_f1 for r in results.values()]
    n_gaps = [r["full"].n_acc - r["full"].threshold_n_acc for r in results.values()]
    con_gap = float(np.mean([r["full"].count_acc - r["no_supcon"].count_acc for r in results.values()]))
    selection_ok = min(pr_gaps) >= 0.02 and min(n_gaps) >= 0.02
    con_ok = con_gap >= 0.01
    verdict(6, selection_ok and con_ok,
            f"counter minus threshold: Pr {['%.3f' % g for g in pr_gaps]}, N-acc {['%.3f' % g for g in n_gaps]}; "
            f"contrastive on minus off: count acc {con_gap:+.4f}")
    assert selection_ok
    assert con_ok


# -- 7: selection -----------------------------------------------------------------------


def test_criterion_7_selection_contract():
    def run(seed):
        rng = np.random.default_rng(seed)
        bad, outputs = 0, []
        for _ in range(10000):
            n = int(rng.integers(5, 16))
            scores = rng.random(n)
            if rng.random() < 0.3:
                scores = np.round(scores, 1)  # ties
            count = int(rng.integers(0, 5))
            theta = float(rng.random())
            chosen = select_targets(scores, count, theta)
            outputs.append(tuple(chosen))
            if count == 0:
                bad += chosen != []
            elif count < MANY:
                rest = np.delete(scores, chosen)
                bad += len(chosen) != count or (len(rest) and scores[chosen].min() < rest.max())
            else:
                higher = select_targets(scores, count, min(theta + 0.1, 1.0))
                bad += not set(higher) <= set(chosen)
                bad += chosen != sorted(int(i) for i in np.flatnonzero(scores > theta))
        return bad, outputs

    bad, first = run(7)
    _, second = run(7)
    ok = bad == 0 and first == second
    verdict(7, ok, f"{bad} contract violations over 10000 proposal sets; deterministic={first == second}")
    assert bad == 0
    assert first == second


# -- 8: masks ----------------------------------------------------------------------------


def test_criterion_8_mask_path():
    checks = {}
    gt = np.array([[1.0, 0.0], [0.0, 1.0]])
    checks["focal perfect"] = abs(float(focal_loss(Tensor(gt.copy()), gt).data)) <= 1e-12
    checks["focal half"] = abs(float(focal_loss(Tensor(np.full((2, 2), 0.5)), gt).data) - 0.125 * math.log(2)) <= 1e-12
    ones = np.ones((4, 4))
    checks["dice perfect"] = abs(float(dice_loss(Tensor(ones.copy()), ones).data)) <= 1e-12
    checks["dice empty"] = abs(float(dice_loss(Tensor(np.zeros((4, 4))), ones).data) - 16 / 17) <= 1e-12

    a = _inst(0, [(0.5, 0.5, 0.5, 0.5)], [0])  # 16x16 block at rows/cols 8..23
    b = _inst(1, [(0.25, 0.25, 0.25, 0.25)], [0])  # 8x8 block at rows/cols 4..11
    c = _inst(2, [P], [])
    pa = np.zeros((32, 32), bool)
    pa[8:24, 16:32] = True  # inter 128, union 384
    pb = np.zeros((32, 32), bool)
    pb[4:12, 4:12] = True  # exact, 64/64
    pc = np.zeros((32, 32), bool)
    rep = gres_report({"m0": pa, "m1": pb, "m2": pc}, [a, b, c])
    checks["cIoU"] = rep.ciou == (128 + 64) / (384 + 64)
    checks["gIoU"] = abs(rep.giou_metric - (1 / 3 + 1 + 1) / 3) <= 1e-15
    failed = [k for k, v in checks.items() if not v]
    verdict(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} mask fixtures hold")
    assert not failed
