"""Experiment configuration: a YAML tree mapped onto dataclasses, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n: int = 2000
    d_in: int = 16
    frames_per_phoneme: tuple[int, int] = (2, 4)
    noise: float = 0.1
    max_piece_len: int = 3
    p_the: float = 0.4
    p_adj: float = 0.4
    p_object: float = 0.6
    p_adverb: float = 0.7
    voice_seed: int = 1234
    lexicon: str | None = None

    def validate(self) -> None:
        if self.n < 30:
            raise ConfigError(f"corpus.n must be >= 30, got {self.n}")
        lo, hi = self.frames_per_phoneme
        if not 1 <= lo <= hi:
            raise ConfigError(f"corpus.frames_per_phoneme must satisfy 1 <= lo <= hi, got {self.frames_per_phoneme}")
        if self.max_piece_len < 2:
            raise ConfigError("corpus.max_piece_len must be >= 2")
        if self.noise < 0:
            raise ConfigError("corpus.noise must be >= 0")


@dataclass
class ModelDims:
    d: int = 64
    n_speech: int = 2
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 4
    ffn: int = 128
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"model.d ({self.d}) must be divisible by model.heads ({self.heads})")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")


@dataclass
class StageConfig:
    """One training stage.  ``average_last`` of None means min(10, epochs); 0 disables averaging."""

    epochs: int = 12
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    clip: float = 1.0
    patience: int = 3
    average_last: int | None = None
    tau: float = 0.2
    p_star: float = 0.8
    lambda_ctr: float = 1.0
    lambda_kl: float = 2.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be positive")
        if not 0 <= self.p_star <= 1:
            raise ConfigError("p_star must lie in [0, 1]")
        if self.lambda_ctr < 0 or self.lambda_kl < 0:
            raise ConfigError("loss weights must be non-negative")

    def averaging(self) -> int:
        return min(10, self.epochs) if self.average_last is None else self.average_last


@dataclass
class FinetuneConfig:
    """Short fine-tuning schedule; ``steps`` of None means the TR step count divided by 8."""

    steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 10
    clip: float = 1.0
    p_star: float = 0.8
    lambda_kl: float = 5.0

    def validate(self) -> None:
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr <= 0 or not 0 <= self.p_star <= 1 or self.lambda_kl < 0:
            raise ConfigError("invalid fine-tuning hyperparameters")


@dataclass
class AttackConfig:
    victim: str = "mt"
    objective: str = "bleu"
    splits: tuple[str, ...] = ("train", "dev", "test")
    max_len: int = 40

    def validate(self) -> None:
        if self.victim not in ("mt", "base", "tr"):
            raise ConfigError(f"attack.victim must be one of mt, base, tr; got {self.victim!r}")
        if self.objective not in ("bleu", "nll"):
            raise ConfigError(f"attack.objective must be bleu or nll; got {self.objective!r}")
        bad = set(self.splits) - {"train", "dev", "test"}
        if bad:
            raise ConfigError(f"unknown attack splits {sorted(bad)}")


@dataclass
class EvalConfig:
    beam: int = 5
    max_len: int = 40

    def validate(self) -> None:
        if self.beam < 1:
            raise ConfigError("eval.beam must be >= 1")


@dataclass
class SweepConfig:
    lambdas: tuple[float, ...] = (1.0, 2.0, 5.0, 8.0, 10.0)

    def validate(self) -> None:
        if not self.lambdas or any(v < 0 for v in self.lambdas):
            raise ConfigError("sweep.lambdas must be a non-empty list of non-negative weights")


def _mt_default() -> StageConfig:
    return StageConfig(epochs=8, average_last=0)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/cmrt"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelDims = field(default_factory=ModelDims)
    mt: StageConfig = field(default_factory=_mt_default)
    st: StageConfig = field(default_factory=StageConfig)
    tr: StageConfig = field(default_factory=StageConfig)
    fn: FinetuneConfig = field(default_factory=FinetuneConfig)
    advspeech: FinetuneConfig = field(default_factory=FinetuneConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "ExperimentConfig":
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "validate"):
                v.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(base, data: Any, where: str):
    """Copy of dataclass instance ``base`` with the fields in ``data`` overridden."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(base)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(base, name)
        key = f"{where}.{name}" if where else name
        hint = str(fields[name].type)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value or {}, key)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key}: expected a list")
            kwargs[name] = tuple(value)
        elif value is None and "None" in hint:
            kwargs[name] = None
        elif isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number or string, got {value!r}")
        elif "int" in hint and isinstance(value, int):
            kwargs[name] = value
        elif "float" in hint and isinstance(value, (int, float)):
            kwargs[name] = float(value)
        elif "str" in hint and isinstance(value, str):
            kwargs[name] = value
        else:
            raise ConfigError(f"{key}: expected {hint}, got {value!r}")
    return dataclasses.replace(base, **kwargs)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig(), data or {}, "").validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    return config_from_dict(data)
