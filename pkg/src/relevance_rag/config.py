"""Run configuration: one JSON file holding every knob, with defaults filled in."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CorpusSpec, SamplerParams
from .inference import VerificationPolicy
from .model import ModelConfig
from .trainer import ObjectiveFlags, TrainSchedule

ABLATION_VARIANTS = {
    "full": ObjectiveFlags(),
    "no_fine_loss": ObjectiveFlags(fine_loss=False),
    "no_noise_pairing": ObjectiveFlags(noise_pairing=False),
    "random_negatives": ObjectiveFlags(negatives="random"),
}


@dataclass(frozen=True)
class Paths:
    dataset: str | None = None
    checkpoint: str | None = None
    reports: str | None = None


@dataclass(frozen=True)
class EvalSettings:
    split: str = "test"
    k: int | None = None
    max_new_tokens: int = 8
    # applied before evaluation; 1.0 leaves only distractors
    corruption: float = 0.0
    sweep_axis: str = "n_docs"
    sweep_levels: tuple = (1, 2, 3, 4)
    ablation_variants: tuple = tuple(ABLATION_VARIANTS)
    ablation_seeds: tuple = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    sampler: SamplerParams = field(default_factory=SamplerParams)
    objective: ObjectiveFlags = field(default_factory=ObjectiveFlags)
    policy: VerificationPolicy = field(default_factory=VerificationPolicy)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to the schedule and sampler as well."""
        return replace(
            self,
            seed=seed,
            schedule=replace(self.schedule, seed=seed),
            sampler=replace(self.sampler, seed=seed),
        )


def _build(cls, data):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for name, value in data.items():
        if name in nested:
            kwargs[name] = _build(nested[name], value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    RunConfig: {
        "paths": Paths,
        "model": ModelConfig,
        "corpus": CorpusSpec,
        "schedule": TrainSchedule,
        "sampler": SamplerParams,
        "objective": ObjectiveFlags,
        "policy": VerificationPolicy,
        "eval": EvalSettings,
    }
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def dump_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
