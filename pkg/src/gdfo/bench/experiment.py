"""Seeded presets, ablations and the alpha sweep.

Per seed the expensive pieces (task, teacher, distilled students) are built
once and shared by every preset. Each preset run gets its own metered
service instance so its call count can be checked against the closed form
``generations * popsize * batches + inference calls``.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gdfo.bench.config import ExperimentConfig, from_dict
from gdfo.bench.tasks import TEMPLATE, TaskBundle, generate_task
from gdfo.blackbox import InferenceRequest, InProcessHandle, TeacherService
from gdfo.diffcore import Tensor
from gdfo.distill import DistillConfig, random_prompts, run_distillation
from gdfo.errors import ConfigError
from gdfo.models import ModelParams, init_params, predict_logits, pretrain_teacher
from gdfo.promptspace import PromptVector, sample_initial_prompt
from gdfo import trainer

log = logging.getLogger(__name__)

PRESETS = ("gdfo", "gdfo-wo-kd", "gdfo-wo-dfo", "bbt-only", "manual-prompt")

RESULT_FIELDS = ("preset", "alpha", "seed", "test_accuracy", "generations", "train_calls",
                 "inference_calls", "service_calls", "kd_calls", "best_teacher_ce", "seconds")
SUMMARY_FIELDS = ("preset", "alpha", "n_seeds", "mean_accuracy", "std_accuracy", "min_accuracy",
                  "max_accuracy")


@dataclass
class SeedArtifacts:
    """Everything a preset needs for one seed; built by :func:`prepare_seed`."""

    config: ExperimentConfig
    bundle: TaskBundle
    teacher: ModelParams
    student_kd: ModelParams
    student_ce: ModelParams
    p0: PromptVector
    kd_calls: int
    agreement_pre: float
    agreement_post: float
    kd_history: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seeds[0]


@dataclass
class RunResult:
    """One preset on one seed. ``test_accuracy`` is the score on whichever split was evaluated."""

    preset: str
    alpha: float
    seed: int
    test_accuracy: float
    generations: int
    train_calls: int
    inference_calls: int
    service_calls: int
    kd_calls: int
    best_teacher_ce: float
    seconds: float
    history: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in RESULT_FIELDS}


def make_student(cfg: ExperimentConfig, embeddings: np.ndarray, label_word_ids, n_prompt_tokens: int) -> ModelParams:
    """Untrained student; its embedding table starts from the public one if configured."""
    seed = cfg.seeds[0] + cfg.student.init_offset
    vocab, e = embeddings.shape
    student = init_params(vocab, e, n_prompt_tokens, cfg.student.hidden_dim, label_word_ids,
                          cfg.student.variant, seed=seed)
    if cfg.student.share_embeddings:
        student.weights["embed"] = Tensor(np.array(embeddings))
    return student


def _fresh_student(cfg: ExperimentConfig, teacher: ModelParams) -> ModelParams:
    return make_student(cfg, teacher.embeddings, teacher.label_word_ids, teacher.n_prompt_tokens)


def agreement(student: ModelParams, teacher: InProcessHandle, embeddings: np.ndarray, inputs,
              seed: int) -> float:
    """Argmax agreement between student and teacher under random prompts (one batched teacher call)."""
    rng = np.random.default_rng([seed, 7])
    prompts = random_prompts(embeddings, student.n_prompt_tokens, len(inputs), rng)
    t = teacher.query(InferenceRequest(prompts, inputs)).logits
    s = predict_logits(student, prompts, inputs)
    return float(np.mean(np.argmax(s, axis=1) == np.argmax(t, axis=1)))


_CACHE: dict = {}


def prepare_seed(cfg: ExperimentConfig, seed: int, use_cache: bool = True) -> SeedArtifacts:
    """Build task, teacher and both students for ``seed`` (memoized per config)."""
    scfg = cfg.for_seed(seed)
    key = json.dumps(scfg.to_dict(), sort_keys=True, default=str)
    if use_cache and key in _CACHE:
        return _CACHE[key]
    scfg.validate()
    bundle = generate_task(scfg.task)
    teacher = pretrain_teacher(bundle.corpus, scfg.teacher)
    embeddings = teacher.embeddings
    train, test = bundle.split.train, bundle.split.test

    kd_service = TeacherService(teacher, budget=scfg.distill.epochs * len(train) + 2)
    kd_handle = InProcessHandle(kd_service)
    student_kd = _fresh_student(scfg, teacher)
    pre = agreement(student_kd, kd_handle, embeddings, test.inputs, seed)
    result = run_distillation(kd_handle, student_kd, train.inputs, train.labels, scfg.distill, embeddings)
    post = agreement(student_kd, kd_handle, embeddings, test.inputs, seed)

    ce_cfg = DistillConfig(**{**scfg.distill.__dict__, "lam": 0.0})
    student_ce = _fresh_student(scfg, teacher)
    run_distillation(kd_handle, student_ce, train.inputs, train.labels, ce_cfg, embeddings)

    p0 = sample_initial_prompt(teacher, scfg.episode.n_prompt_tokens, seed)
    arts = SeedArtifacts(scfg, bundle, teacher, student_kd, student_ce, p0, result.teacher_calls, pre, post,
                         result.history)
    log.info("seed %d prepared: KD agreement %.3f -> %.3f", seed, pre, post)
    if use_cache:
        _CACHE[key] = arts
    return arts


def clear_cache() -> None:
    _CACHE.clear()


def run_preset(preset: str, arts: SeedArtifacts, alpha: float | None = None, split_name: str = "test") -> RunResult:
    """Run one preset on prepared artifacts and score it on ``split_name`` via ``infer``."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if split_name not in ("dev", "test"):
        raise ConfigError(f"can only score on dev or test, not {split_name!r}")
    t0 = time.perf_counter()
    base = arts.config.episode
    split = arts.bundle.split
    scored = getattr(split, split_name)
    student = arts.student_ce if preset == "gdfo-wo-kd" else arts.student_kd
    if preset in ("gdfo-wo-dfo",):
        alpha = 1.0
    elif preset in ("bbt-only", "manual-prompt"):
        alpha = 0.0
    elif alpha is None:
        alpha = base.alpha
    cfg = trainer.EpisodeConfig(**{**base.__dict__, "alpha": float(alpha),
                                   "use_generator": preset not in ("bbt-only", "manual-prompt")})
    service = TeacherService(arts.teacher, budget=cfg.budget + len(scored))
    handle = InProcessHandle(service)
    state = trainer.init_state(cfg, arts.p0)

    if preset == "gdfo-wo-dfo":
        trainer.train_generator_only(state, split.train.instances, split.train.labels, student, TEMPLATE)
        generations = 0
    elif preset == "manual-prompt":
        generations = 0
    else:
        trainer.train(state, split.train.instances, split.train.labels, handle, student, TEMPLATE)
        generations = state.cma.generation
    train_calls = service.calls_used
    acc, _ = trainer.evaluate(state, scored.instances, scored.labels, handle, student, TEMPLATE)
    return RunResult(preset, float(alpha), arts.seed, acc, generations, train_calls,
                     service.calls_used - train_calls, service.calls_used,
                     arts.kd_calls if preset != "gdfo-wo-kd" else 0,
                     state.best_loss, time.perf_counter() - t0, state.history)


def summarize(results: Iterable[RunResult]) -> list[dict]:
    groups: dict = {}
    for r in results:
        groups.setdefault((r.preset, r.alpha), []).append(r.test_accuracy)
    rows = []
    for (preset, alpha), accs in groups.items():
        a = np.asarray(accs)
        rows.append({"preset": preset, "alpha": alpha, "n_seeds": len(a), "mean_accuracy": float(a.mean()),
                     "std_accuracy": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
                     "min_accuracy": float(a.min()), "max_accuracy": float(a.max())})
    return rows


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def run_experiment(cfg: ExperimentConfig, presets: Sequence[str] = PRESETS, seeds: Sequence[int] | None = None,
                   out_dir=None, plot: bool = True) -> list[RunResult]:
    """Run ``presets`` over ``seeds``; optionally write result and summary CSVs plus figures."""
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}; expected one of {PRESETS}")
    seeds = list(cfg.seeds if seeds is None else seeds)
    results = []
    for seed in seeds:
        arts = prepare_seed(cfg, seed)
        for preset in presets:
            r = run_preset(preset, arts)
            log.info("seed %d %s: %.4f", seed, preset, r.test_accuracy)
            results.append(r)
    if out_dir is not None:
        _emit(Path(out_dir), "experiment", cfg, results, plot)
    return results


def alpha_sweep(cfg: ExperimentConfig, values: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                seeds: Sequence[int] | None = None, out_dir=None, plot: bool = True) -> list[RunResult]:
    """GDFO at each alpha in ``values``; one result per (alpha, seed)."""
    for a in values:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"alpha {a} outside [0, 1]")
    seeds = list(cfg.seeds if seeds is None else seeds)
    results = []
    for seed in seeds:
        arts = prepare_seed(cfg, seed)
        for a in values:
            results.append(run_preset("gdfo", arts, alpha=float(a)))
    if out_dir is not None:
        _emit(Path(out_dir), "alpha_sweep", cfg, results, plot)
    return results


GRID_FIELDS = ("setting", "preset", "n_seeds", "mean_dev_accuracy", "std_dev_accuracy")


def grid_search(cfg: ExperimentConfig, axes: dict, preset: str = "gdfo", seeds: Sequence[int] | None = None,
                out_dir=None) -> list[dict]:
    """Score every combination of ``axes`` on the dev split, best first.

    ``axes`` maps dotted config keys to candidate values, for example
    ``{"episode.alpha": [0.25, 0.5], "distill.lr": [0.01, 0.05]}``.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    keys = list(axes)
    for key in keys:
        if key.count(".") != 1:
            raise ConfigError(f"grid key {key!r} must look like section.field")
    seeds = list(cfg.seeds if seeds is None else seeds)
    rows = []
    for values in itertools.product(*(axes[k] for k in keys)):
        d = cfg.to_dict()
        for key, value in zip(keys, values):
            section, name = key.split(".")
            if not isinstance(d.get(section), dict):
                raise ConfigError(f"unknown config section {section!r}")
            d[section][name] = value
        trial = from_dict(d)
        accs = np.array([run_preset(preset, prepare_seed(trial, s), split_name="dev").test_accuracy
                         for s in seeds])
        setting = " ".join(f"{k}={v}" for k, v in zip(keys, values))
        log.info("grid %s: %.4f", setting, accs.mean())
        rows.append({"setting": setting, "preset": preset, "n_seeds": len(accs),
                     "mean_dev_accuracy": float(accs.mean()),
                     "std_dev_accuracy": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0})
    rows.sort(key=lambda r: -r["mean_dev_accuracy"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.yaml")
        _write_csv(out / "grid.csv", GRID_FIELDS, rows)
    return rows


def _emit(out: Path, kind: str, cfg: ExperimentConfig, results: list[RunResult], plot: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    _write_csv(out / f"{kind}_results.csv", RESULT_FIELDS, [r.row() for r in results])
    summary = summarize(results)
    _write_csv(out / f"{kind}_summary.csv", SUMMARY_FIELDS, summary)
    if plot:
        from gdfo.bench import plots

        if kind == "alpha_sweep":
            plots.alpha_curve(summary, out / "alpha_sweep.png")
        else:
            plots.preset_bars(summary, out / "comparison.png")
        plots.training_curves(results, out / f"{kind}_training.png")
