"""Versioned YAML experiment configuration.

One file holds every knob of a run::

    version: 1
    seeds: [0, 1, 2]
    task:     {TaskSpec fields}
    teacher:  {TeacherConfig fields}
    student:  {StudentConfig fields}
    distill:  {DistillConfig fields}
    episode:  {EpisodeConfig fields}

Missing keys fall back to the defaults below; unknown keys are rejected.
The per-run seed overrides the ``seed`` field of every section.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from gdfo.bench.tasks import TaskSpec
from gdfo.distill import DistillConfig
from gdfo.errors import ConfigError
from gdfo.models import VARIANTS, TeacherConfig
from gdfo.trainer import EpisodeConfig

CONFIG_VERSION = 1


@dataclass
class StudentConfig:
    hidden_dim: int = 64
    variant: str = "pool-mlp"
    # start from the public embedding table instead of a random one
    share_embeddings: bool = True
    init_offset: int = 1000

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown student variant {self.variant!r}")
        if self.hidden_dim < 1:
            raise ConfigError("student hidden_dim must be positive")


def _reference_teacher() -> TeacherConfig:
    return TeacherConfig(embed_dim=48, epochs=20)


def _reference_episode() -> EpisodeConfig:
    return EpisodeConfig(embed_dim=48, proj_dim=5, budget=200, generator_lr=50.0)


@dataclass
class ExperimentConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher: TeacherConfig = field(default_factory=_reference_teacher)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    episode: EpisodeConfig = field(default_factory=_reference_episode)

    def validate(self) -> None:
        self.task.validate()
        self.student.validate()
        self.distill.validate()
        self.episode.validate()
        if self.episode.embed_dim != self.teacher.embed_dim:
            raise ConfigError(f"episode.embed_dim {self.episode.embed_dim} must equal teacher.embed_dim "
                              f"{self.teacher.embed_dim}")
        if self.episode.n_prompt_tokens != self.task.prefix_len:
            raise ConfigError(f"episode.n_prompt_tokens {self.episode.n_prompt_tokens} must equal "
                              f"task.prefix_len {self.task.prefix_len}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(
            seeds=[seed],
            task=replace(self.task, seed=seed),
            teacher=replace(self.teacher, seed=seed),
            student=self.student,
            distill=replace(self.distill, seed=seed),
            episode=replace(self.episode, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seeds": list(self.seeds),
            "task": asdict(self.task),
            "teacher": asdict(self.teacher),
            "student": asdict(self.student),
            "distill": asdict(self.distill),
            "episode": asdict(self.episode),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())


_SECTIONS = {"task": TaskSpec, "teacher": TeacherConfig, "student": StudentConfig,
             "distill": DistillConfig, "episode": EpisodeConfig}


def _section(name: str, raw, default):
    if raw is None:
        return default
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    cls = _SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return replace(default, **raw)


def from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a mapping")
    version = obj.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    unknown = set(obj) - {"version", "seeds", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base = ExperimentConfig()
    cfg = ExperimentConfig(
        seeds=[int(s) for s in obj.get("seeds", base.seeds)],
        **{name: _section(name, obj.get(name), getattr(base, name)) for name in _SECTIONS},
    )
    if isinstance(cfg.task.min_length, float) or isinstance(cfg.episode.budget, float):
        raise ConfigError("integer fields must be integers")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        obj = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(obj)
