"""Knowledge distillation of the black-box teacher into the student.

Loss per instance::

    L_KL = KL(softmax(S / tau) || softmax(T / tau))
    L_CE = -log softmax(S)[y]
    L    = (1 - lambda) * L_CE + lambda * L_KL

Teacher logits only ever enter as constants.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gdfo import diffcore as dc
from gdfo.blackbox import BlackBoxHandle, InferenceRequest
from gdfo.diffcore import Tensor
from gdfo.errors import BudgetError, ConfigError, ContractError, NumericError
from gdfo.models import ModelParams, forward_batch, predict_logits
from gdfo.promptspace import sample_prompt_tokens

log = logging.getLogger(__name__)

DISTILL_CSV_FIELDS = ("epoch", "loss", "loss_ce", "loss_kl", "train_accuracy", "teacher_agreement")


@dataclass
class DistillConfig:
    tau: float = 1.0
    lam: float = 0.5
    epochs: int = 200
    lr: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be non-negative")


def kd_losses(student_logits, teacher_logits, label, cfg: DistillConfig,
              reduce: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Return (L_CE, L_KL, L) as scalar tensors.

    ``student_logits`` may be a tensor (gradients flow into it);
    ``teacher_logits`` is always treated as a constant. Batched inputs of
    shape (B, C) with labels (B,) are averaged over the batch, or returned
    per row with shape (B,) when ``reduce`` is false.
    """
    s = dc.as_tensor(student_logits)
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                   dtype=np.float64)
    if s.shape != t.shape:
        raise ContractError(f"student logits {s.shape} and teacher logits {t.shape} differ in shape")
    if not (np.all(np.isfinite(s.data)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite logits")
    single = s.ndim == 1
    if single:
        s, t = s.reshape(1, -1), t.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    C = s.shape[-1]
    if labels.shape != (s.shape[0],) or np.any((labels < 0) | (labels >= C)):
        raise ContractError(f"labels {labels.tolist()} invalid for {C} classes")

    log_p = dc.log_softmax(s)
    ce = -log_p[np.arange(len(labels)), labels]

    # identical scaling on both sides keeps KL exactly 0 at equal logits for any tau
    inv_tau = 1.0 / cfg.tau
    log_ps = dc.log_softmax(s * inv_tau)
    zt = t * inv_tau
    zt = zt - zt.max(axis=-1, keepdims=True)
    log_pt = zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))
    kl = (dc.exp(log_ps) * (log_ps - log_pt)).sum(axis=-1)
    if reduce:
        ce, kl = ce.mean(), kl.mean()
    total = ce * (1.0 - cfg.lam) + kl * cfg.lam
    return ce, kl, total


def random_prompts(teacher_embeddings: np.ndarray, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random prompts p_r built from the teacher's embedding table."""
    vocab = teacher_embeddings.shape[0]
    ids = np.stack([sample_prompt_tokens(vocab, n, rng) for _ in range(count)])
    return teacher_embeddings[ids].reshape(count, -1)


def prediction_agreement(student: ModelParams, teacher_logits: np.ndarray, prompts, inputs) -> float:
    s = predict_logits(student, prompts, inputs)
    return float(np.mean(np.argmax(s, axis=1) == np.argmax(teacher_logits, axis=1)))


@dataclass
class DistillResult:
    student: ModelParams
    history: list[dict]
    teacher_calls: int


def run_distillation(teacher: BlackBoxHandle, student: ModelParams, inputs: Sequence[Sequence[int]],
                     labels, cfg: DistillConfig, teacher_embeddings: np.ndarray,
                     csv_path=None) -> DistillResult:
    """Train ``student`` in place by per-instance SGD on the KD loss.

    Each epoch visits every instance in a seeded random order, draws a
    fresh random prompt, queries teacher and student on ``[p_r; x; t]`` and
    takes one SGD step on the mixed loss. With ``lam == 0`` the teacher is
    never queried (the no-KD ablation). Teacher calls: ``epochs * len(inputs)``.

    ``teacher_embeddings`` is the embedding table the random prompt tokens
    are looked up in; clients receive it alongside the service, never the
    remaining teacher weights.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) != len(labels):
        raise ContractError("inputs and labels differ in length")
    use_teacher = cfg.lam > 0
    needed = cfg.epochs * len(inputs) if use_teacher else 0
    remaining = teacher.calls_remaining()
    if needed > remaining:
        raise BudgetError(f"distillation needs {needed} teacher calls, only {remaining} remain")

    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    n = student.n_prompt_tokens
    history = []
    calls = 0
    student.set_trainable(True)
    params = student.parameters()
    writer = None
    fh = open(csv_path, "w", newline="") if csv_path is not None else None
    try:
        if fh is not None:
            writer = csv.DictWriter(fh, fieldnames=DISTILL_CSV_FIELDS)
            writer.writeheader()
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            agree = 0
            for i in rng.permutation(len(inputs)):
                p_r = random_prompts(teacher_embeddings, n, 1, rng)
                if use_teacher:
                    resp = teacher.query(InferenceRequest(p_r, [inputs[i]]))
                    t_logits = resp.logits
                    calls += 1
                else:
                    t_logits = np.zeros((1, student.num_classes))
                s_logits = forward_batch(student, dc.Tensor(p_r), [inputs[i]])
                ce, kl, total = kd_losses(s_logits, t_logits, labels[i:i + 1], cfg)
                dc.backward(total)
                dc.sgd_step(params, cfg.lr)
                sums += (total.item(), ce.item(), kl.item())
                agree += int(np.argmax(s_logits.data) == np.argmax(t_logits))
            row = {
                "epoch": epoch + 1,
                "loss": sums[0] / len(inputs),
                "loss_ce": sums[1] / len(inputs),
                "loss_kl": sums[2] / len(inputs),
                "train_accuracy": _accuracy(student, inputs, labels, teacher_embeddings, eval_rng),
                "teacher_agreement": agree / len(inputs) if use_teacher else float("nan"),
            }
            history.append(row)
            if writer is not None:
                writer.writerow(row)
            log.debug("kd epoch %d: %s", epoch + 1, row)
    finally:
        student.set_trainable(False)
        if fh is not None:
            fh.close()
    return DistillResult(student, history, calls)


def _accuracy(student: ModelParams, inputs, labels, teacher_embeddings, rng) -> float:
    """k-shot accuracy of the student under fresh random prompts."""
    prompts = random_prompts(teacher_embeddings, student.n_prompt_tokens, len(inputs), rng)
    logits = predict_logits(student, prompts, inputs)
    return float(np.mean(np.argmax(logits, axis=1) == labels))
