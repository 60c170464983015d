"""Experiment configuration as flat ``key=value`` text."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .model import ArchConfig
from .trainer import TrainConfig

PRESETS = (
    "shock", "rrt", "t3s_ar", "minus_t3s", "t3s_dllm", "tau_sweep", "loss_transfer",
    "one_step", "static_baselines", "sketch", "teacher_mix", "cross_selector",
)


class ConfigError(ValueError):
    pass


# key -> default; the default's type is the parse type
DEFAULTS: dict[str, object] = {
    "preset": "shock",
    "seed": 0,
    "tau": 0.2,
    "selector": "self",
    "keep_checkpoints": "all",
    "topk": 10,
    # distillation data (teacher style 1) and held-out split
    "data.num_examples": 200,
    "data.heldout_examples": 200,
    "data.chain_length": 3,
    "data.modulus": 10,
    "data.operators": "+-",
    "data.teacher_style": 1,
    # base model: pre-distillation student trained on teacher style 0
    "base.num_examples": 600,
    "base.steps": 400,
    "base.learning_rate": 3e-3,
    "arch.vocab_size": 64,
    "arch.embed_dim": 32,
    "arch.num_layers": 2,
    "arch.num_heads": 2,
    "arch.max_seq_len": 128,
    "arch.mlp_ratio": 2,
    "train.learning_rate": 3e-3,
    "train.batch_size": 32,
    "train.num_steps": 150,
    "train.optimizer": "adam",
    "train.checkpoint_every": 1,
    "train.loss_reduction": "mean",
    "dllm.num_steps": 150,
    "dllm.learning_rate": 3e-3,
    "dllm.checkpoint_every": 10,
    "dllm.decode_steps": 0,
    "dllm.base_steps": 400,
    "dllm.mask_low": 0.1,
    "dllm.mask_high": 0.9,
    "transfer.num_steps": 50,
    "transfer.learning_rate": 1e-3,
    "one_step.learning_rate": 0.05,
    "static.p": -1.0,
    "sketch.k": 8,
    "sketch.num_examples": 200,
    "sweep.taus": "0,0.1,0.2,0.3,0.5",
    "mix.steps_per_teacher": 75,
    "cross.embed_dim": 16,
    "cross.seed_offset": 7,
}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    out_dir: str | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **kv) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            k = k.replace("__", ".")
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = _parse(k, str(v)) if isinstance(v, str) else v
        cfg = ExperimentConfig(vals, self.out_dir)
        cfg.validate()
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        vals = dict(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigError(f"line {lineno}: unknown config key {k!r}")
            vals[k] = _parse(k, v)
        cfg = cls(vals)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def dumps(self) -> str:
        return "".join(f"{k}={self.values[k]!r}\n" if isinstance(self.values[k], float) else f"{k}={self.values[k]}\n"
                       for k in DEFAULTS)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def validate(self) -> None:
        v = self.values
        if v["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {v['preset']!r}; choose from {', '.join(PRESETS)}")
        if v["tau"] < 0:
            raise ConfigError("tau must be non-negative")
        if v["keep_checkpoints"] not in ("all", "ends"):
            raise ConfigError("keep_checkpoints must be all or ends")
        if v["data.teacher_style"] not in (0, 1):
            raise ConfigError("data.teacher_style must be 0 or 1")
        if not 0 <= v["dllm.mask_low"] <= v["dllm.mask_high"] <= 1:
            raise ConfigError("need 0 <= dllm.mask_low <= dllm.mask_high <= 1")
        try:
            self.data_config().validate()
            self.base_data_config().validate()
            self.arch()
            self.train_config().validate(v["data.num_examples"])
            self.taus()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # typed views ---------------------------------------------------------

    def data_config(self, num_examples: int | None = None, style: int | None = None) -> DataConfig:
        v = self.values
        return DataConfig(num_examples or v["data.num_examples"], v["data.chain_length"], v["data.modulus"],
                          v["data.operators"], (v["data.teacher_style"] if style is None else style,))

    def base_data_config(self) -> DataConfig:
        return self.data_config(self.values["base.num_examples"], 1 - self.values["data.teacher_style"])

    def arch(self, **over) -> ArchConfig:
        v = self.values
        kw = {k.split(".", 1)[1]: v[k] for k in DEFAULTS if k.startswith("arch.")}
        kw["seed"] = v["seed"]
        kw.update(over)
        return ArchConfig(**kw)

    def train_config(self, **over) -> TrainConfig:
        v = self.values
        kw = {k.split(".", 1)[1]: v[k] for k in DEFAULTS if k.startswith("train.")}
        kw["seed"] = v["seed"]
        kw.update(over)
        return TrainConfig(**kw)

    def taus(self) -> list[float]:
        try:
            out = [float(s) for s in str(self.values["sweep.taus"]).split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"sweep.taus must be comma-separated numbers, got {self.values['sweep.taus']!r}") from None
        if not out or any(t < 0 for t in out):
            raise ConfigError("sweep.taus needs at least one non-negative value")
        return out
