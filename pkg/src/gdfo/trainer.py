"""Joint prompt optimization against a frozen student and a black-box teacher.

Each step asks CMA-ES for a population of low-dimensional vectors ``z``,
scores every candidate by the teacher's mean cross-entropy on the training
batch (one metered call per candidate per batch), tells CMA-ES the scores,
and takes one gradient step on the prompt generator through the frozen
student using the best ``z`` seen so far. Inference fuses the generated
prompt with ``p0 + A z_best`` and asks the teacher once per instance.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from gdfo import checkpoint, cmaes
from gdfo import diffcore as dc
from gdfo.blackbox import BlackBoxHandle, InferenceRequest
from gdfo.diffcore import Tensor
from gdfo.errors import BudgetError, ConfigError, ContractError, DimensionError, ServiceError
from gdfo.models import ModelParams, forward_batch, pooled_token_embeddings
from gdfo.promptspace import PromptVector, ProjectionMatrix, combine_values, make_projection

log = logging.getLogger(__name__)

TRAIN_CSV_FIELDS = ("step", "api_calls_used", "best_teacher_ce", "pop_mean_ce", "pop_min_ce",
                    "student_ce", "train_accuracy")


@dataclass
class EpisodeConfig:
    n_prompt_tokens: int = 5
    embed_dim: int = 16
    proj_dim: int = 10
    proj_scale: float | None = None
    alpha: float = 0.5
    budget: int = 2000
    popsize: int = 8
    sigma0: float = 1.0
    generator_lr: float = 1e-3
    batch_size: int | None = None
    use_generator: bool = True
    seed: int = 0

    @property
    def prompt_dim(self) -> int:
        return self.n_prompt_tokens * self.embed_dim

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.popsize < 2 or self.budget < 0 or self.proj_dim < 1:
            raise ConfigError("need popsize >= 2, budget >= 0, proj_dim >= 1")
        if self.proj_dim > self.prompt_dim:
            raise ConfigError(f"proj_dim {self.proj_dim} exceeds prompt width {self.prompt_dim}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


@dataclass
class PromptGenerator:
    """One fully connected layer: pooled instance embedding (e) -> prompt (D)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def zeros(cls, embed_dim: int, prompt_dim: int) -> "PromptGenerator":
        return cls(Tensor(np.zeros((embed_dim, prompt_dim))), Tensor(np.zeros(prompt_dim)))

    @property
    def prompt_dim(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, pooled) -> Tensor:
        pooled = dc.as_tensor(pooled)
        if pooled.ndim != 2 or pooled.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"generator expects (B, {self.weight.shape[0]}) input, got {pooled.shape}")
        return pooled @ self.weight + self.bias


def generate_prompt(gen: PromptGenerator, instance: Sequence[int], student: ModelParams) -> PromptVector:
    """p_gd for one instance: generator applied to the mean student embedding."""
    if len(instance) == 0:
        raise ContractError("instance must be nonempty")
    if gen.weight.shape[0] != student.embed_dim:
        raise ContractError(f"generator input width {gen.weight.shape[0]} != student embed_dim {student.embed_dim}")
    pooled = pooled_token_embeddings(student, [instance])
    return PromptVector(gen(pooled).data[0], "p_gd")


@dataclass
class TrainState:
    config: EpisodeConfig
    cma: cmaes.CmaState
    generator: PromptGenerator
    p0: PromptVector
    A: ProjectionMatrix
    best_z: np.ndarray
    best_loss: float = math.inf
    api_calls_used: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    def remaining(self) -> int:
        return self.config.budget - self.api_calls_used

    def prompts_for(self, pooled: np.ndarray, z) -> np.ndarray:
        p_gd = self.generator(pooled).data
        return combine_values(p_gd, self.p0.values, self.A, z, self.config.alpha)


def init_state(cfg: EpisodeConfig, p0: PromptVector, A: ProjectionMatrix | None = None) -> TrainState:
    cfg.validate()
    if len(p0) != cfg.prompt_dim:
        raise DimensionError(f"p0 width {len(p0)} != D={cfg.prompt_dim}")
    if A is None:
        A = make_projection(cfg.prompt_dim, cfg.proj_dim, seed=cfg.seed + 1, scale=cfg.proj_scale)
    if A.shape != (cfg.prompt_dim, cfg.proj_dim):
        raise DimensionError(f"projection shape {A.shape} != {(cfg.prompt_dim, cfg.proj_dim)}")
    cma = cmaes.init(cfg.proj_dim, cfg.sigma0, cfg.popsize, seed=cfg.seed + 2)
    return TrainState(cfg, cma, PromptGenerator.zeros(cfg.embed_dim, cfg.prompt_dim), p0, A,
                      best_z=np.zeros(cfg.proj_dim))


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def _batches(n: int, batch_size: int | None) -> list[np.ndarray]:
    size = n if batch_size is None else batch_size
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _generator_update(state: TrainState, student: ModelParams, pooled: np.ndarray,
                      inputs: list, labels: np.ndarray) -> float:
    """One SGD step on the generator; returns the student CE before the step."""
    cfg = state.config
    gen = state.generator
    for p in gen.parameters():
        p.requires_grad = True
    try:
        p_gd = gen(pooled)
        if cfg.alpha == 1.0:
            prompts = p_gd
        else:
            fixed = (1.0 - cfg.alpha) * (state.p0.values + state.A.project(state.best_z))
            prompts = p_gd * cfg.alpha + fixed
        logits = forward_batch(student, prompts, inputs)
        loss = -dc.log_softmax(logits)[np.arange(len(labels)), labels].mean()
        if cfg.alpha > 0.0 and cfg.use_generator:
            dc.backward(loss)
            dc.sgd_step(gen.parameters(), cfg.generator_lr)
        return loss.item()
    finally:
        for p in gen.parameters():
            p.requires_grad = False
            p.grad = None


def joint_train_step(state: TrainState, instances: Sequence[Sequence[int]], labels,
                     teacher: BlackBoxHandle, student: ModelParams,
                     template: Sequence[int] = ()) -> dict:
    """One generation of CMA-ES plus one generator update per batch."""
    cfg = state.config
    labels = np.asarray(labels, dtype=np.int64)
    inputs = [tuple(x) + tuple(template) for x in instances]
    batches = _batches(len(inputs), cfg.batch_size)
    cost = cfg.popsize * len(batches)
    if cost > state.remaining():
        raise BudgetError(f"step needs {cost} calls, {state.remaining()} remain in the training budget")
    if cost > teacher.calls_remaining():
        raise BudgetError(f"step needs {cost} calls, the service has {teacher.calls_remaining()} left")
    if any(p.requires_grad for p in student.parameters()):
        raise ContractError("student must be frozen during prompt training")

    pooled = pooled_token_embeddings(student, instances)
    candidates = state.cma.ask()
    losses = np.zeros((len(candidates), len(inputs)))
    correct = np.zeros((len(candidates), len(inputs)), dtype=bool)
    try:
        for i, z in enumerate(candidates):
            for idx in batches:
                prompts = state.prompts_for(pooled[idx], z)
                resp = teacher.query(InferenceRequest(prompts, [inputs[j] for j in idx]))
                losses[i, idx] = _cross_entropy(resp.logits, labels[idx])
                correct[i, idx] = np.argmax(resp.logits, axis=1) == labels[idx]
    except (BudgetError, ServiceError):
        state.cma.cancel_ask()
        raise
    fitness = losses.mean(axis=1)
    state.cma.tell(candidates, fitness)
    state.api_calls_used += cost

    student_ce = 0.0
    for idx in batches:
        student_ce += _generator_update(state, student, pooled[idx], [inputs[j] for j in idx], labels[idx])
    student_ce /= len(batches)

    best = int(np.argmin(fitness))
    if fitness[best] < state.best_loss:
        state.best_loss = float(fitness[best])
        state.best_z = np.array(candidates[best])
    state.step += 1
    metrics = {
        "step": state.step,
        "api_calls_used": state.api_calls_used,
        "best_teacher_ce": state.best_loss,
        "pop_mean_ce": float(fitness.mean()),
        "pop_min_ce": float(fitness.min()),
        "student_ce": student_ce,
        "train_accuracy": float(correct[best].mean()),
    }
    state.history.append(metrics)
    return metrics


def steps_for_budget(cfg: EpisodeConfig, n_train: int) -> int:
    return cfg.budget // (cfg.popsize * len(_batches(n_train, cfg.batch_size)))


def train(state: TrainState, instances, labels, teacher: BlackBoxHandle, student: ModelParams,
          template: Sequence[int] = (), csv_path=None) -> TrainState:
    """Run joint steps until the training budget cannot cover another generation."""
    steps = steps_for_budget(state.config, len(instances)) - state.step
    fh = open(csv_path, "w", newline="") if csv_path is not None else None
    try:
        writer = csv.DictWriter(fh, fieldnames=TRAIN_CSV_FIELDS) if fh else None
        if writer:
            writer.writeheader()
        for _ in range(max(steps, 0)):
            metrics = joint_train_step(state, instances, labels, teacher, student, template)
            if writer:
                writer.writerow(metrics)
            if state.step % 50 == 0:
                log.debug("step %d: %s", state.step, metrics)
    finally:
        if fh:
            fh.close()
    return state


def train_generator_only(state: TrainState, instances, labels, student: ModelParams,
                         template: Sequence[int] = (), steps: int | None = None) -> TrainState:
    """Generator updates without any teacher query; ``z`` stays at the CMA-ES initial mean."""
    labels = np.asarray(labels, dtype=np.int64)
    inputs = [tuple(x) + tuple(template) for x in instances]
    pooled = pooled_token_embeddings(student, instances)
    batches = _batches(len(inputs), state.config.batch_size)
    steps = steps_for_budget(state.config, len(instances)) if steps is None else steps
    for _ in range(steps):
        ce = 0.0
        for idx in batches:
            ce += _generator_update(state, student, pooled[idx], [inputs[j] for j in idx], labels[idx])
        state.step += 1
        state.history.append({"step": state.step, "api_calls_used": state.api_calls_used,
                              "best_teacher_ce": float("nan"), "pop_mean_ce": float("nan"),
                              "pop_min_ce": float("nan"), "student_ce": ce / len(batches),
                              "train_accuracy": float("nan")})
    return state


def infer(state: TrainState, instance: Sequence[int], teacher: BlackBoxHandle, student: ModelParams,
          template: Sequence[int] = ()) -> int:
    """Predicted class for one instance; costs one teacher call. Ties go to the lowest index."""
    state.A.verify()
    pooled = pooled_token_embeddings(student, [instance])
    prompt = state.prompts_for(pooled, state.best_z)
    resp = teacher.query(InferenceRequest(prompt, [tuple(instance) + tuple(template)]))
    return int(np.argmax(resp.logits[0]))


def evaluate(state: TrainState, instances, labels, teacher: BlackBoxHandle, student: ModelParams,
             template: Sequence[int] = ()) -> tuple[float, np.ndarray]:
    preds = np.array([infer(state, x, teacher, student, template) for x in instances], dtype=np.int64)
    return float(np.mean(preds == np.asarray(labels))), preds


# snapshots

def save_state(state: TrainState, path) -> str:
    cma_scalars, cma_tensors = state.cma.to_checkpoint()
    scalars = {f"config.{k}": v for k, v in asdict(state.config).items()}
    scalars.update({f"cma.{k}": v for k, v in cma_scalars.items()})
    scalars.update({
        "best_loss": state.best_loss if math.isfinite(state.best_loss) else None,
        "api_calls_used": state.api_calls_used,
        "step": state.step,
        "projection.scale": state.A.scale,
        "projection.seed": state.A.seed,
    })
    tensors = {
        "generator.weight": state.generator.weight.data,
        "generator.bias": state.generator.bias.data,
        "best_z": state.best_z,
        "p0": state.p0.values,
        "projection": state.A.values,
    }
    tensors.update({f"cma.{k}": v for k, v in cma_tensors.items()})
    return checkpoint.save(path, "trainstate", scalars, tensors)


def load_state(path) -> TrainState:
    ckpt = checkpoint.load(path, kind="trainstate")
    s, t = ckpt.scalars, ckpt.tensors
    names = {f.name for f in fields(EpisodeConfig)}
    cfg = EpisodeConfig(**{k[len("config."):]: v for k, v in s.items()
                           if k.startswith("config.") and k[len("config."):] in names})
    cma = cmaes.CmaState.from_checkpoint({k[4:]: v for k, v in s.items() if k.startswith("cma.")},
                                         {k[4:]: v for k, v in t.items() if k.startswith("cma.")})
    gen = PromptGenerator(Tensor(t["generator.weight"]), Tensor(t["generator.bias"]))
    A = ProjectionMatrix(t["projection"], s["projection.scale"], s["projection.seed"])
    best = math.inf if s["best_loss"] is None else float(s["best_loss"])
    return TrainState(cfg, cma, gen, PromptVector(t["p0"], "p0"), A, np.array(t["best_z"]), best,
                      int(s["api_calls_used"]), int(s["step"]))
