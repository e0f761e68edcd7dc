"""Command-line entry point: ``grec {gen-data,train,eval,grad-check,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Set ``GREC_LOG_LEVEL`` (e.g. DEBUG, WARNING) to change
log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .data import make_split, read_jsonl
from .gradsuite import run_suite
from .metrics import DataError, grec_report, gres_report
from .model import ConfigError, GroundingModel
from .train import (
    CheckpointError,
    NumericalError,
    Trainer,
    count_accuracy,
    infer,
    load_checkpoint,
    write_predictions,
)

log = logging.getLogger("grec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="override every seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/val/test splits")
    _common(p)

    p = sub.add_parser("train", help="two-phase training; writes a checkpoint and a loss log")
    _common(p)
    p.add_argument("--data", help="dataset directory (default: [data] dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("eval", help="predict and score a split")
    _common(p)
    p.add_argument("--checkpoint", help="default: <out>/checkpoint.npz")
    p.add_argument("--data", help="dataset directory (default: [data] dir)")
    p.add_argument("--split", help="split name (default: [eval] split)")
    p.add_argument("--theta", type=float, help="score threshold")
    p.add_argument("--oracle-count", action="store_true", help="use ground-truth counts")
    p.add_argument("--no-agc", action="store_true", help="threshold-only selection")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    _common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of random draws")

    p = sub.add_parser("report", help="figures and CSV summary of a run directory")
    _common(p)
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "theta", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, theta=args.theta))
    if getattr(args, "oracle_count", False):
        cfg = replace(cfg, eval=replace(cfg.eval, oracle_count=True))
    if getattr(args, "split", None):
        cfg = replace(cfg, eval=replace(cfg.eval, split=args.split))
    cfg.validate()
    return cfg


def _echo_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(cfg.to_ini())


def _load_split(directory: Path, split: str):
    path = directory / f"{split}.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file {path}; run gen-data first")
    data = read_jsonl(path)
    if not data:
        raise DataError(f"{path} is empty")
    return data


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data.dir)
    manifest = make_split(out, cfg.data.sizes, cfg.data.seed)
    _echo_config(cfg, out)
    for name, info in manifest["splits"].items():
        print(f"{name}: {info['count']} instances {info['kinds']}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = Path(args.data or cfg.data.dir)
    train = _load_split(data_dir, "train")
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    if args.resume:
        trainer = load_checkpoint(args.resume, cfg.train, expected=cfg.model)
        log.info("resumed at step %d", trainer.step)
    else:
        trainer = Trainer(GroundingModel(cfg.model), cfg.train)
    try:
        trainer.fit(train, log_every=args.log_every)
    finally:
        trainer.write_log(out / "losses.csv")
    trainer.save(out / "checkpoint.npz")
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.step} steps; final total loss {last.get('total', float('nan')):.4f}")
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint or out / "checkpoint.npz")
    if not ckpt.is_file():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    trainer = load_checkpoint(ckpt, expected=cfg.model)
    model = trainer.model
    model.config = replace(model.config, theta=cfg.model.theta, use_agc=model.config.use_agc and not args.no_agc)
    data = _load_split(Path(args.data or cfg.data.dir), cfg.eval.split)
    preds = infer(model, data, oracle_count=cfg.eval.oracle_count)
    report = grec_report(preds, data)
    report.count_acc = count_accuracy(model, data)
    if model.config.use_masks:
        masks = gres_report(preds, data, model.config.mask_size)
        report.ciou, report.giou_metric = masks.ciou, masks.giou_metric
    variants = {
        "counter": grec_report(infer(model, data, use_agc=True), data),
        "threshold": grec_report(infer(model, data, use_agc=False), data),
        "oracle_count": grec_report(infer(model, data, use_agc=True, oracle_count=True), data),
    }
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / f"predictions_{cfg.eval.split}.jsonl", preds)
    payload = {
        "checkpoint": str(ckpt),
        "split": cfg.eval.split,
        "theta": model.config.theta,
        "oracle_count": cfg.eval.oracle_count,
        "use_agc": model.config.use_agc,
        "report": report.to_dict(),
        "variants": {k: {"precision_f1": v.precision_f1, "n_acc": v.n_acc, "t_acc": v.t_acc}
                     for k, v in variants.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(report.format_text())
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    seeds = [cfg.model.seed + i for i in range(max(args.seeds, 1))]
    worst = run_suite(seeds)
    width = max(len(k) for k in worst)
    failed = False
    print(f"{'loss':<{width}}  max_rel_err  status")
    for name, err in worst.items():
        ok = err < GRAD_TOL
        failed |= not ok
        print(f"{name:<{width}}  {err:11.3e}  {'pass' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def _read_losses(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k != "phase":
                r[k] = float(v)
    return rows


def cmd_report(args, cfg: RunConfig) -> int:
    from .plotting import plot_loss_curves, plot_per_kind, plot_variants

    run = Path(args.out or cfg.out_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    figures = run / "figures"
    figures.mkdir(exist_ok=True)
    made = []
    losses = run / "losses.csv"
    if losses.is_file():
        history = _read_losses(losses)
        if history:
            made.append(plot_loss_curves(history, figures / "loss_curves.png"))
    report_path = run / "report.json"
    rows = []
    if report_path.is_file():
        payload = json.loads(report_path.read_text())
        rep = payload["report"]
        if rep.get("per_kind"):
            made.append(plot_per_kind(rep["per_kind"], figures / "per_kind.png"))
        rows = [{"name": k, **v} for k, v in payload.get("variants", {}).items()]
        if rows:
            made.append(plot_variants(rows, figures / "selection_variants.png", ("precision_f1", "n_acc", "t_acc")))
    if not made:
        raise DataError(f"nothing to report in {run}: no losses.csv or report.json")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "precision_f1", "n_acc", "t_acc"])
    for r in rows:
        writer.writerow([r["name"]] + [("" if r[m] is None else f"{r[m]:.4f}") for m in ("precision_f1", "n_acc", "t_acc")])
    (run / "summary.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    for path in made:
        print(f"figure: {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def main(argv=None) -> int:
    level = os.environ.get("GREC_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, CheckpointError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
