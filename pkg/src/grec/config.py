"""Run configuration read from an INI file.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
command-line flags. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import ConfigError, LossWeights, ModelConfig
from .train import TrainSchedule


@dataclass
class DataSettings:
    dir: str = "data"
    train_size: int = 20000
    val_size: int = 1000
    test_size: int = 1000
    seed: int = 0

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}


@dataclass
class EvalSettings:
    split: str = "test"
    oracle_count: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalSettings = field(default_factory=EvalSettings)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.model.validate()
        for name, n in self.data.sizes.items():
            if n < 0:
                raise ConfigError(f"{name}_size must be >= 0")
        if self.train.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.train.pretrain_steps < 0 or self.train.finetune_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.train.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.model.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.eval.split not in self.data.sizes:
            raise ConfigError(f"unknown eval split {self.eval.split!r}")

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every seed (data, model, data order) set to ``seed``."""
        return replace(
            self,
            model=replace(self.model, seed=seed),
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        model = asdict(self.model)
        weights = model.pop("weights")
        parser["model"] = {k: _fmt(v) for k, v in model.items()}
        parser["loss_weights"] = {k: _fmt(v) for k, v in weights.items()}
        parser["data"] = {k: _fmt(v) for k, v in asdict(self.data).items()}
        parser["train"] = {k: _fmt(v) for k, v in asdict(self.train).items()}
        parser["eval"] = {k: _fmt(v) for k, v in asdict(self.eval).items()}
        parser["run"] = {"out_dir": self.out_dir}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            value = raw.strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def _apply(section: str, obj, items: dict):
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known or key == "weights":
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        updates[key] = _coerce(section, key, raw, getattr(obj, key))
    return replace(obj, **updates)


SECTIONS = ("model", "loss_weights", "data", "train", "eval", "run")


def parse_ini(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    cfg = RunConfig()
    get = lambda s: dict(parser[s]) if parser.has_section(s) else {}  # noqa: E731
    weights = _apply("loss_weights", LossWeights(), get("loss_weights"))
    model = _apply("model", replace(cfg.model, weights=weights), get("model"))
    run = get("run")
    if set(run) - {"out_dir"}:
        raise ConfigError(f"unknown keys in section [run]: {sorted(set(run) - {'out_dir'})}")
    cfg = RunConfig(
        model=model,
        data=_apply("data", cfg.data, get("data")),
        train=_apply("train", cfg.train, get("train")),
        eval=_apply("eval", cfg.eval, get("eval")),
        out_dir=run.get("out_dir", cfg.out_dir),
    )
    cfg.validate()
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_ini(p.read_text())
