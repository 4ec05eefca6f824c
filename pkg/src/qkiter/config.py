"""Experiment configuration: one JSON file, validated as a whole.

Unknown keys are rejected with a ConfigError naming the dotted key path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .loss import LossConfig
from .store import DEFAULT_CHUNK_SIZE
from .trainer import OptimConfig, PhaseSchedule, PhaseSpec, RunConfig


@dataclass
class EvalConfig:
    n_eval_queries: int = 500
    n_distractors: int = 500
    n_extra_keys: int = 500


@dataclass
class ModelConfig:
    backbone_width: int = 128
    d_mid: int = 64
    head_hidden: int = 64
    d_out: int = 32
    d_proj: int = 64
    featurizer_seed: int = 7
    init_seed: int = 1


def _default_phases():
    return [{"kind": k, "max_steps": 600} for k in ("Q", "K", "Q")]


@dataclass
class TrainConfig:
    batch_size: int = 32
    chunk_size: int = DEFAULT_CHUNK_SIZE
    head_refresh_every: int = 1
    seed: int = 0
    phases: list = field(default_factory=_default_phases)


@dataclass
class SimclrConfig:
    steps: int | None = None  # None: same step budget as the QK schedule
    lr0: float | None = None  # None: optim.lr0


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    simclr: SimclrConfig = field(default_factory=SimclrConfig)
    workers: int = 1

    def schedule(self) -> PhaseSchedule:
        return PhaseSchedule([dict(p) for p in self.train.phases], self.train.seed)

    def run_config(self, workers: int | None = None) -> RunConfig:
        return RunConfig(
            self.loss,
            self.optim,
            self.train.batch_size,
            self.train.chunk_size,
            self.train.head_refresh_every,
            self.workers if workers is None else workers,
        )

    def simclr_steps(self) -> int:
        return self.simclr.steps or self.schedule().total_steps

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Every seed in the config replaced by ``seed``."""
        d = self.to_dict()
        d["synth"]["seed"] = seed
        d["model"]["featurizer_seed"] = seed
        d["model"]["init_seed"] = seed
        d["train"]["seed"] = seed
        return from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["scale_range"] = list(d["synth"]["scale_range"])
        return d

    def validate(self) -> None:
        m, t = self.model, self.train
        for name in ("backbone_width", "d_mid", "head_hidden", "d_out", "d_proj"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.d_out > min(m.d_proj, self.synth.n_keys):
            raise ConfigError("model.d_out cannot exceed d_proj or the number of keys")
        if not 1 <= t.batch_size <= self.synth.n_keys:
            raise ConfigError("train.batch_size must be in [1, synth.n_keys]")
        if t.chunk_size < 1 or t.head_refresh_every < 1:
            raise ConfigError("train.chunk_size and train.head_refresh_every must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.simclr.steps is not None and self.simclr.steps < 1:
            raise ConfigError("simclr.steps must be >= 1")
        e = self.eval
        if e.n_eval_queries < 1 or e.n_distractors < 0 or e.n_extra_keys < 0:
            raise ConfigError("eval counts must be non-negative with n_eval_queries >= 1")
        self.schedule()


_SECTIONS = {
    "synth": SynthConfig,
    "eval": EvalConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
    "simclr": SimclrConfig,
}
_PHASE_KEYS = {f.name for f in dataclasses.fields(PhaseSpec)}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in _SECTIONS and key != "workers":
            raise ConfigError(f"unknown config key '{key}'")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    for i, p in enumerate(parts["train"].phases):
        if not isinstance(p, dict):
            raise ConfigError(f"train.phases[{i}] must be an object")
        for key in p:
            if key not in _PHASE_KEYS:
                raise ConfigError(f"unknown config key 'train.phases[{i}].{key}'")
    cfg = ExperimentConfig(**parts, workers=raw.get("workers", 1))
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
