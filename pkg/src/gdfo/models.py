"""Toy prompt-conditioned sequence classifiers (teacher and student).

Both roles share one architecture family. An input is a continuous prompt
of ``n`` vectors followed by embedded token ids (instance then template);
the final template token is the mask position. The encoder produces a
representation of the mask position, a one-hidden-layer MLP maps it to
vocabulary logits, and the logits of the label words are the class scores.

Encoder variants:

``pool-mlp``
    mask embedding plus the mean of all position vectors.
``single-attention``
    mask embedding plus one attention read-out whose query is the mask
    position (the mask row of a single self-attention layer).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gdfo import checkpoint
from gdfo import diffcore as dc
from gdfo.diffcore import Tensor
from gdfo.errors import ConfigError, ContractError, DimensionError, PretrainError, VocabularyError

log = logging.getLogger(__name__)

VARIANTS = ("pool-mlp", "single-attention")

_WEIGHT_ORDER = {
    "pool-mlp": ("embed", "w_hidden", "b_hidden", "w_out", "b_out"),
    "single-attention": ("embed", "w_query", "w_key", "w_value", "w_hidden", "b_hidden", "w_out", "b_out"),
}


@dataclass
class ModelParams:
    vocab_size: int
    embed_dim: int
    n_prompt_tokens: int
    hidden_dim: int
    variant: str
    label_word_ids: tuple[int, ...]
    weights: dict[str, Tensor] = field(repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        ids = self.label_word_ids
        if len(set(ids)) != len(ids) or any(not 0 <= i < self.vocab_size for i in ids):
            raise ConfigError(f"label_word_ids must be distinct ids below {self.vocab_size}, got {ids}")

    @property
    def prompt_dim(self) -> int:
        return self.n_prompt_tokens * self.embed_dim

    @property
    def num_classes(self) -> int:
        return len(self.label_word_ids)

    @property
    def embeddings(self) -> np.ndarray:
        return self.weights["embed"].data

    def parameters(self) -> list[Tensor]:
        return [self.weights[name] for name in _WEIGHT_ORDER[self.variant]]

    def set_trainable(self, flag: bool) -> "ModelParams":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def copy(self) -> "ModelParams":
        weights = {k: Tensor(v.data.copy()) for k, v in self.weights.items()}
        return ModelParams(self.vocab_size, self.embed_dim, self.n_prompt_tokens, self.hidden_dim,
                           self.variant, tuple(self.label_word_ids), weights)

    def scalars(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "n_prompt_tokens": self.n_prompt_tokens,
            "hidden_dim": self.hidden_dim,
            "variant": self.variant,
            "label_word_ids": [int(i) for i in self.label_word_ids],
        }

    def to_bytes(self) -> bytes:
        return checkpoint.dumps("model", self.scalars(),
                                {name: self.weights[name].data for name in _WEIGHT_ORDER[self.variant]})

    def checksum(self) -> str:
        return checkpoint.checksum(self.to_bytes())


def init_params(vocab_size: int, embed_dim: int, n_prompt_tokens: int, hidden_dim: int,
                label_word_ids: Sequence[int], variant: str = "pool-mlp", seed: int = 0) -> ModelParams:
    if min(vocab_size, embed_dim, n_prompt_tokens, hidden_dim) < 1:
        raise ConfigError("model dimensions must be positive")
    rng = np.random.default_rng(seed)
    e, h = embed_dim, hidden_dim
    shapes = {
        "embed": ((vocab_size, e), 1.0),
        "w_query": ((e, e), e ** -0.5),
        "w_key": ((e, e), e ** -0.5),
        "w_value": ((e, e), e ** -0.5),
        "w_hidden": ((e, h), e ** -0.5),
        "b_hidden": ((h,), 0.0),
        "w_out": ((h, vocab_size), h ** -0.5),
        "b_out": ((vocab_size,), 0.0),
    }
    weights = {}
    for name in _WEIGHT_ORDER.get(variant, ()):
        shape, scale = shapes[name]
        weights[name] = Tensor(rng.normal(0.0, 1.0, shape) * scale)
    return ModelParams(vocab_size, embed_dim, n_prompt_tokens, hidden_dim, variant,
                       tuple(int(i) for i in label_word_ids), weights)


def save_params(params: ModelParams, path) -> str:
    raw = params.to_bytes()
    with open(path, "wb") as fh:
        fh.write(raw)
    return checkpoint.checksum(raw)


def params_from_checkpoint(ckpt: checkpoint.Checkpoint) -> ModelParams:
    s = ckpt.scalars
    weights = {k: Tensor(v) for k, v in ckpt.tensors.items()}
    return ModelParams(s["vocab_size"], s["embed_dim"], s["n_prompt_tokens"], s["hidden_dim"],
                       s["variant"], tuple(s["label_word_ids"]), weights)


def load_params(path) -> ModelParams:
    return params_from_checkpoint(checkpoint.load(path, kind="model"))


@dataclass(frozen=True)
class ModelInput:
    prompt: np.ndarray
    token_ids: tuple[int, ...]


def pad_tokens(token_ids: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with id 0; returns (ids[B, L], lengths[B])."""
    if len(token_ids) == 0:
        raise ContractError("empty batch")
    lengths = np.array([len(t) for t in token_ids], dtype=np.int64)
    if lengths.min() == 0:
        raise ContractError("token_ids must be nonempty for every instance")
    ids = np.zeros((len(token_ids), int(lengths.max())), dtype=np.int64)
    for i, seq in enumerate(token_ids):
        ids[i, :lengths[i]] = seq
    valid = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    if np.any((ids < 0) | (ids >= vocab_size)):
        bad = ids[valid & ((ids < 0) | (ids >= vocab_size))]
        raise VocabularyError(f"token ids {sorted(set(bad.tolist()))[:5]} outside vocabulary of {vocab_size}")
    return ids, lengths


def pooled_token_embeddings(params: ModelParams, token_ids: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean embedding of each instance's tokens; shape (B, embed_dim).

    Ids are summed in sorted order, so equal token multisets give bitwise equal results.
    """
    ids, lengths = pad_tokens([sorted(t) for t in token_ids], params.vocab_size)
    valid = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    emb = params.embeddings[ids] * valid[..., None]
    return emb.sum(axis=1) / lengths[:, None]


def forward_batch(params: ModelParams, prompts, token_ids: Sequence[Sequence[int]]) -> Tensor:
    """Class logits of shape (B, C) for a batch of (prompt, token_ids) pairs.

    ``prompts`` is a (B, D) array or tensor; a tensor that requires grad makes
    the logits differentiable with respect to the prompts.
    """
    prompts = dc.as_tensor(prompts)
    ids, lengths = pad_tokens(token_ids, params.vocab_size)
    batch, n, e = len(lengths), params.n_prompt_tokens, params.embed_dim
    if prompts.shape != (batch, n * e):
        raise DimensionError(f"forward: prompts have shape {prompts.shape}, expected {(batch, n * e)}")
    w = params.weights
    emb = w["embed"][ids]
    seq = dc.concat([prompts.reshape(batch, n, e), emb], axis=1)
    total = n + ids.shape[1]
    valid = np.ones((batch, total), dtype=bool)
    valid[:, n:] = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    mask_vec = w["embed"][ids[np.arange(batch), lengths - 1]]

    if params.variant == "pool-mlp":
        pool = (valid / valid.sum(axis=1, keepdims=True))[:, None, :]
        rep = mask_vec + (dc.as_tensor(pool) @ seq).reshape(batch, e)
    else:
        query = (mask_vec @ w["w_query"]).reshape(batch, e, 1)
        keys = seq @ w["w_key"]
        scores = (keys @ query).reshape(batch, total) * (e ** -0.5)
        scores = scores + np.where(valid, 0.0, -1e9)
        attn = dc.softmax(scores, axis=-1).reshape(batch, 1, total)
        rep = mask_vec + (attn @ (seq @ w["w_value"])).reshape(batch, e)

    hidden = dc.tanh(rep @ w["w_hidden"] + w["b_hidden"])
    cols = np.asarray(params.label_word_ids)
    return hidden @ w["w_out"][:, cols] + w["b_out"][cols]


def forward(params: ModelParams, inp: ModelInput) -> Tensor:
    """Logits (C,) for one input."""
    prompt = np.asarray(inp.prompt, dtype=np.float64)
    if prompt.ndim != 1 or prompt.size % params.embed_dim or prompt.size != params.prompt_dim:
        raise DimensionError(f"forward: prompt width {prompt.shape} does not match D={params.prompt_dim}")
    return forward_batch(params, prompt[None, :], [inp.token_ids]).reshape(params.num_classes)


def predict_logits(params: ModelParams, prompts: np.ndarray, token_ids: Sequence[Sequence[int]],
                   chunk: int = 512) -> np.ndarray:
    """Gradient-free batched logits as a plain array."""
    prompts = np.asarray(prompts, dtype=np.float64)
    out = [forward_batch(params, prompts[i:i + chunk], token_ids[i:i + chunk]).data
           for i in range(0, len(token_ids), chunk)]
    return np.concatenate(out, axis=0)


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return -(dc.log_softmax(logits) * targets).sum(axis=-1).mean()


@dataclass
class PretrainCorpus:
    """Teacher pre-training mixture.

    ``prefix_ids`` fill the prompt slot with embedded tokens. ``targets`` are
    (soft) class distributions; ``steered`` marks rows whose prefix is the
    task's full steering prefix (the rows the accuracy bar is measured on).
    """

    vocab_size: int
    label_word_ids: tuple[int, ...]
    prefix_ids: np.ndarray
    token_ids: list
    targets: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    steered: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)

    def subset(self, idx) -> "PretrainCorpus":
        idx = np.asarray(idx)
        return PretrainCorpus(self.vocab_size, self.label_word_ids, self.prefix_ids[idx],
                              [self.token_ids[i] for i in idx], self.targets[idx], self.labels[idx],
                              self.task_ids[idx], self.steered[idx])


@dataclass
class TeacherConfig:
    embed_dim: int = 16
    hidden_dim: int = 64
    variant: str = "pool-mlp"
    epochs: int = 40
    batch_size: int = 64
    lr: float = 5e-3
    holdout_fraction: float = 0.1
    accuracy_bar: float = 0.95
    seed: int = 0


def prefix_prompts(params: ModelParams, prefix_ids: np.ndarray) -> Tensor:
    """Embed prefix token ids into flattened prompts (B, D) via the embedding table."""
    batch = prefix_ids.shape[0]
    return params.weights["embed"][prefix_ids].reshape(batch, params.prompt_dim)


def steered_accuracy(params: ModelParams, corpus: PretrainCorpus, prefix_ids: np.ndarray | None = None) -> float:
    """Accuracy on ``corpus`` with its own prefixes, or with ``prefix_ids`` substituted."""
    prefixes = corpus.prefix_ids if prefix_ids is None else prefix_ids
    prompts = params.embeddings[prefixes].reshape(len(corpus), params.prompt_dim)
    logits = predict_logits(params, prompts, corpus.token_ids)
    return float(np.mean(np.argmax(logits, axis=1) == corpus.labels))


def pretrain_teacher(corpus: PretrainCorpus, cfg: TeacherConfig) -> ModelParams:
    """Train the teacher on the pre-training mixture, then freeze it.

    Raises :class:`PretrainError` if held-out accuracy on fully steered rows
    stays below ``cfg.accuracy_bar``.
    """
    if len(corpus) < 2:
        raise ContractError("pre-training corpus needs at least two rows")
    rng = np.random.default_rng(cfg.seed)
    n = corpus.prefix_ids.shape[1]
    params = init_params(corpus.vocab_size, cfg.embed_dim, n, cfg.hidden_dim, corpus.label_word_ids,
                         cfg.variant, seed=int(rng.integers(2**31)))
    order = rng.permutation(len(corpus))
    n_hold = max(1, int(round(cfg.holdout_fraction * len(corpus))))
    held, train = corpus.subset(order[:n_hold]), corpus.subset(order[n_hold:])
    held = held.subset(np.flatnonzero(held.steered)) if held.steered.any() else held

    params.set_trainable(True)
    opt = dc.Adam(params.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            prompts = prefix_prompts(params, train.prefix_ids[idx])
            logits = forward_batch(params, prompts, [train.token_ids[i] for i in idx])
            loss = soft_cross_entropy(logits, train.targets[idx])
            dc.backward(loss)
            opt.step()
        if log.isEnabledFor(logging.DEBUG):
            log.debug("teacher epoch %d held-out acc %.4f", epoch, steered_accuracy(params, held))
    params.set_trainable(False)
    acc = steered_accuracy(params, held)
    if acc < cfg.accuracy_bar:
        raise PretrainError(f"teacher reached {acc:.3f} held-out accuracy, below the {cfg.accuracy_bar} bar")
    log.info("teacher pre-trained: held-out steered accuracy %.4f", acc)
    for p in params.parameters():
        p.data.setflags(write=False)
    return params
