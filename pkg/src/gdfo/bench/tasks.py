"""Synthetic few-shot classification tasks with steering prefixes.

A task family has ``num_tasks`` tasks over a shared instance distribution.
Every instance carries one latent class per task ("aspect"); each aspect
owns a disjoint pool of cue tokens and emits tokens from a class-conditional
unigram distribution over its pool. Task ``m`` asks for aspect ``m``'s
class. During teacher pre-training each row is prefixed by task ``m``'s
steering tokens, so the prefix tells the teacher which aspect to read; the
downstream few-shot task withholds its prefix and a tuned prompt has to
recover it.

Vocabulary layout::

    0                      padding (never generated)
    1, 2                   template tokens; 2 is the mask position
    3 .. 3+C-1             label words
    next num_tasks*n       steering tokens, n per task
    next num_tasks*C*k     cue pools, k tokens per (task, class)
    remainder              background tokens
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gdfo.errors import ConfigError, SpecError
from gdfo.models import PretrainCorpus

PAD_ID = 0
TEMPLATE = (1, 2)


@dataclass
class TaskSpec:
    num_classes: int = 2
    num_tasks: int = 3
    target_task: int = 0
    vocab_size: int = 256
    prefix_len: int = 5
    cue_tokens_per_class: int = 4
    cue_strength: float = 0.9
    background_rate: float = 0.2
    min_length: int = 14
    max_length: int = 22
    shots: int = 16
    test_size: int = 400
    pretrain_per_task: int = 2000
    augment_prob: float = 0.5
    augment_smoothing: float = 1.0
    min_bayes_accuracy: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_tasks < 1 or self.prefix_len < 1:
            raise ConfigError("num_classes, num_tasks and prefix_len must be positive")
        if not 0 <= self.target_task < self.num_tasks:
            raise ConfigError(f"target_task {self.target_task} outside [0, {self.num_tasks})")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")
        if not (0 < self.cue_strength <= 1 and 0 <= self.background_rate < 1 and 0 <= self.augment_prob <= 1):
            raise ConfigError("cue_strength, background_rate and augment_prob must be probabilities")
        if self.shots < 1 or self.test_size < 1:
            raise ConfigError("shots and test_size must be positive")
        if self.layout_size() > self.vocab_size:
            raise ConfigError(f"vocabulary of {self.vocab_size} cannot hold the {self.layout_size()}-token layout")

    def layout_size(self) -> int:
        return (1 + len(TEMPLATE) + self.num_classes + self.num_tasks * self.prefix_len
                + self.num_tasks * self.num_classes * self.cue_tokens_per_class + 1)

    @property
    def label_word_ids(self) -> tuple[int, ...]:
        start = 1 + len(TEMPLATE)
        return tuple(range(start, start + self.num_classes))

    @property
    def steering_ids(self) -> np.ndarray:
        start = 1 + len(TEMPLATE) + self.num_classes
        return np.arange(start, start + self.num_tasks * self.prefix_len).reshape(self.num_tasks, self.prefix_len)

    @property
    def cue_ids(self) -> np.ndarray:
        """Cue pools, shape (num_tasks, num_classes, cue_tokens_per_class)."""
        start = int(self.steering_ids.max()) + 1
        k = self.cue_tokens_per_class
        size = self.num_tasks * self.num_classes * k
        return np.arange(start, start + size).reshape(self.num_tasks, self.num_classes, k)

    @property
    def background_ids(self) -> np.ndarray:
        return np.arange(int(self.cue_ids.max()) + 1, self.vocab_size)

    def class_distributions(self) -> np.ndarray:
        """Token distribution of aspect m in class c over the vocabulary, shape (M, C, V)."""
        M, C, k = self.num_tasks, self.num_classes, self.cue_tokens_per_class
        dist = np.zeros((M, C, self.vocab_size))
        cues = self.cue_ids
        for m in range(M):
            for c in range(C):
                if C == 1:
                    dist[m, c, cues[m, c]] = 1.0 / k
                    continue
                dist[m, c, cues[m].reshape(-1)] = (1.0 - self.cue_strength) / ((C - 1) * k)
                dist[m, c, cues[m, c]] = self.cue_strength / k
        return dist


@dataclass
class Examples:
    instances: list  # tuples of instance token ids (template not included)
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def inputs(self) -> list:
        return [tuple(x) + TEMPLATE for x in self.instances]

    def batch(self, idx) -> "Examples":
        return Examples([self.instances[i] for i in idx], self.labels[np.asarray(idx)])

    def to_json(self) -> dict:
        return {"instances": [list(map(int, x)) for x in self.instances], "labels": self.labels.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Examples":
        return cls([tuple(x) for x in obj["instances"]], np.asarray(obj["labels"], dtype=np.int64))


@dataclass
class FewShotSplit:
    train: Examples
    dev: Examples
    test: Examples


@dataclass
class TaskBundle:
    spec: TaskSpec
    corpus: PretrainCorpus
    split: FewShotSplit
    bayes_accuracy: float = field(default=float("nan"))

    def to_json(self) -> dict:
        return {
            "version": 1,
            "spec": asdict(self.spec),
            "bayes_accuracy": self.bayes_accuracy,
            "split": {name: getattr(self.split, name).to_json() for name in ("train", "dev", "test")},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


def _sample_instance(spec: TaskSpec, dist: np.ndarray, aspects: np.ndarray, rng: np.random.Generator) -> tuple:
    length = int(rng.integers(spec.min_length, spec.max_length + 1))
    background = spec.background_ids
    is_bg = rng.random(length) < spec.background_rate
    owner = rng.integers(spec.num_tasks, size=length)
    u = rng.random(length)
    tokens = background[rng.integers(len(background), size=length)]
    for m in np.unique(owner[~is_bg]):
        at = ~is_bg & (owner == m)
        cdf = np.cumsum(dist[m, aspects[m]])
        tokens[at] = np.minimum(np.searchsorted(cdf, u[at] * cdf[-1], side="right"), spec.vocab_size - 1)
    return tuple(int(t) for t in tokens)


def bayes_predict(spec: TaskSpec, instances, task: int) -> np.ndarray:
    """Closed-form posterior argmax for ``task`` (ties go to the lowest class).

    Cue pools are disjoint, so the likelihood ratio between classes of one
    aspect depends only on that aspect's cue tokens.
    """
    logd = np.log(np.maximum(spec.class_distributions()[task], 1e-300))  # (C, V)
    pool = set(spec.cue_ids[task].reshape(-1).tolist())
    preds = []
    for x in instances:
        own = [t for t in x if t in pool]
        preds.append(int(np.argmax(logd[:, own].sum(axis=1))) if own else 0)
    return np.asarray(preds, dtype=np.int64)


def _draw_examples(spec, dist, rng, task, labels, seen: set) -> Examples:
    instances = []
    for y in labels:
        while True:
            aspects = rng.integers(spec.num_classes, size=spec.num_tasks)
            aspects[task] = y
            x = _sample_instance(spec, dist, aspects, rng)
            if x not in seen:
                seen.add(x)
                instances.append(x)
                break
    return Examples(instances, np.asarray(labels, dtype=np.int64))


def _pretrain_corpus(spec: TaskSpec, dist: np.ndarray, rng: np.random.Generator, seen: set) -> PretrainCorpus:
    M, C, n = spec.num_tasks, spec.num_classes, spec.prefix_len
    steer = spec.steering_ids
    owner = np.full(spec.vocab_size, -1)
    for m in range(M):
        owner[steer[m]] = m
    prefixes, tokens, targets, labels, tasks, steered = [], [], [], [], [], []
    for m in range(M):
        for _ in range(spec.pretrain_per_task):
            aspects = rng.integers(C, size=M)
            x = _sample_instance(spec, dist, aspects, rng)
            seen.add(x)
            if rng.random() < spec.augment_prob:
                keep = rng.random()
                prefix = np.where(rng.random(n) < keep, steer[m], rng.integers(spec.vocab_size, size=n))
                counts = np.bincount(owner[prefix][owner[prefix] >= 0], minlength=M).astype(float)
                weights = (counts + spec.augment_smoothing) / (counts + spec.augment_smoothing).sum()
                target = np.zeros(C)
                np.add.at(target, aspects, weights)
                full = False
            else:
                prefix = steer[m].copy()
                target = np.eye(C)[aspects[m]]
                full = True
            prefixes.append(prefix)
            tokens.append(x + TEMPLATE)
            targets.append(target)
            labels.append(aspects[m])
            tasks.append(m)
            steered.append(full)
    return PretrainCorpus(spec.vocab_size, spec.label_word_ids, np.asarray(prefixes, dtype=np.int64), tokens,
                          np.asarray(targets), np.asarray(labels, dtype=np.int64),
                          np.asarray(tasks, dtype=np.int64), np.asarray(steered, dtype=bool))


def generate_task(spec: TaskSpec) -> TaskBundle:
    """Build the pre-training mixture and the downstream k-shot split.

    ``D_train`` and ``D_dev`` hold ``shots`` examples per class; ``D_test``
    holds ``test_size`` examples with uniformly drawn labels. All three are
    pairwise disjoint and disjoint from the pre-training mixture.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dist = spec.class_distributions()
    seen: set = set()
    corpus = _pretrain_corpus(spec, dist, rng, seen)

    task = spec.target_task
    per_class = np.repeat(np.arange(spec.num_classes), spec.shots)
    train = _draw_examples(spec, dist, rng, task, rng.permutation(per_class), seen)
    dev = _draw_examples(spec, dist, rng, task, rng.permutation(per_class), seen)
    test = _draw_examples(spec, dist, rng, task, rng.integers(spec.num_classes, size=spec.test_size), seen)

    bayes = float(np.mean(bayes_predict(spec, test.instances, task) == test.labels))
    if bayes < spec.min_bayes_accuracy:
        raise SpecError(f"Bayes-optimal accuracy {bayes:.3f} is below {spec.min_bayes_accuracy}; task is not learnable")
    return TaskBundle(spec, corpus, FewShotSplit(train, dev, test), bayes)


def load_split(path) -> tuple[TaskSpec, FewShotSplit]:
    obj = json.loads(Path(path).read_text())
    spec = TaskSpec(**obj["spec"])
    split = FewShotSplit(*(Examples.from_json(obj["split"][name]) for name in ("train", "dev", "test")))
    return spec, split
