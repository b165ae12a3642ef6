import csv
import math

import numpy as np
import pytest

from gdfo import diffcore as dc
from gdfo import trainer
from gdfo.bench.tasks import TEMPLATE
from gdfo.blackbox import BlackBoxHandle, InferenceResponse, InProcessHandle, Status, TeacherService
from gdfo.errors import BudgetError, ConfigError, ContractError, ServiceError
from gdfo.models import init_params, pooled_token_embeddings
from gdfo.trainer import EpisodeConfig, PromptGenerator

from gradcheck import check


class StubTeacher(BlackBoxHandle):
    """Metered stand-in: ``fn(request) -> logits``; optionally fails on call ``fail_at``."""

    transport = "stub"

    def __init__(self, fn, budget=10_000, fail_at=None):
        self.fn, self._budget, self.used, self.fail_at = fn, budget, 0, fail_at

    def query(self, request):
        if self.used >= self._budget:
            raise BudgetError("stub budget exhausted")
        if self.fail_at is not None and self.used == self.fail_at:
            raise ServiceError("stub failure")
        self.used += 1
        return InferenceResponse(self.fn(request), self._budget - self.used, request.request_id)

    def status(self):
        return Status(self.used, self._budget, "stub")


class Shifted(BlackBoxHandle):
    """Real teacher with a constant added to every logit."""

    def __init__(self, inner, shift):
        self.inner, self.shift = inner, shift

    def query(self, request):
        r = self.inner.query(request)
        return InferenceResponse(r.logits + self.shift, r.calls_remaining, r.request_id)

    def status(self):
        return self.inner.status()


def cfg_for(arts, **kw):
    base = arts.config.episode
    return EpisodeConfig(**{**base.__dict__, **kw})


def fresh(arts, **kw):
    return trainer.init_state(cfg_for(arts, **kw), arts.p0)


def handle(arts, budget=10_000):
    return InProcessHandle(TeacherService(arts.teacher, budget=budget))


def train_data(arts):
    t = arts.bundle.split.train
    return t.instances, t.labels


# generator

def test_zero_generator_gives_zero_prompt():
    student = init_params(30, 4, 3, 5, (1, 2), seed=0)
    gen = PromptGenerator.zeros(4, 12)
    for x in [(5, 6, 7), (9,), (10, 11, 12, 13, 14)]:
        p = trainer.generate_prompt(gen, x, student)
        assert p.role == "p_gd" and np.array_equal(p.values, np.zeros(12))


def test_generated_prompt_ignores_token_order():
    student = init_params(64, 6, 3, 5, (1, 2), seed=1)
    rng = np.random.default_rng(0)
    gen = PromptGenerator(dc.Tensor(rng.normal(size=(6, 18))), dc.Tensor(rng.normal(size=18)))
    for _ in range(50):
        x = rng.integers(3, 64, size=rng.integers(2, 20)).tolist()
        a = trainer.generate_prompt(gen, x, student).values
        b = trainer.generate_prompt(gen, rng.permutation(x).tolist(), student).values
        assert a.tobytes() == b.tobytes()


def test_generator_gradient_matches_finite_differences():
    student = init_params(64, 6, 3, 5, (1, 2), seed=1)
    pooled = pooled_token_embeddings(student, [(4, 9, 9, 30), (7, 8)])
    bias = np.random.default_rng(1).normal(size=18)

    def build(w):
        p = PromptGenerator(w, dc.Tensor(bias))(pooled)
        return dc.sum(p * p)

    check(build, [np.random.default_rng(2).normal(size=(6, 18))])


def test_generate_prompt_contract():
    student = init_params(30, 4, 3, 5, (1, 2))
    with pytest.raises(ContractError):
        trainer.generate_prompt(PromptGenerator.zeros(4, 12), (), student)
    with pytest.raises(ContractError):
        trainer.generate_prompt(PromptGenerator.zeros(5, 12), (3,), student)


def test_episode_config_validation():
    for bad in (EpisodeConfig(alpha=1.2), EpisodeConfig(popsize=1), EpisodeConfig(proj_dim=200),
                EpisodeConfig(batch_size=0)):
        with pytest.raises(ConfigError):
            bad.validate()


# joint step

def test_one_step_costs_one_call_per_candidate(seed0):
    state, h = fresh(seed0), handle(seed0)
    x, y = train_data(seed0)
    before = seed0.student_kd.checksum()
    best = []
    for k in range(1, 6):
        m = trainer.joint_train_step(state, x, y, h, seed0.student_kd, TEMPLATE)
        assert state.api_calls_used == h.calls_used == k * state.config.popsize
        assert m["api_calls_used"] == state.api_calls_used
        best.append(m["best_teacher_ce"])
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert state.best_loss == min(best) == state.cma.best_f
    assert seed0.student_kd.checksum() == before


def test_minibatches_multiply_the_cost(seed0):
    state, h = fresh(seed0, batch_size=10), handle(seed0)
    x, y = train_data(seed0)
    trainer.joint_train_step(state, x, y, h, seed0.student_kd, TEMPLATE)
    assert h.calls_used == state.config.popsize * math.ceil(len(x) / 10)


def test_alpha_one_gives_constant_fitness_and_moves_generator(seed0):
    state = fresh(seed0, alpha=1.0)
    x, y = train_data(seed0)
    m = trainer.joint_train_step(state, x, y, handle(seed0), seed0.student_kd, TEMPLATE)
    assert m["pop_min_ce"] == m["pop_mean_ce"]
    assert np.any(state.generator.weight.data != 0)


def test_alpha_zero_leaves_generator_unchanged(seed0):
    state = fresh(seed0, alpha=0.0)
    rng = np.random.default_rng(0)
    state.generator = PromptGenerator(dc.Tensor(rng.normal(size=state.generator.weight.shape)),
                                      dc.Tensor(rng.normal(size=state.generator.bias.shape)))
    w, b = state.generator.weight.data.copy(), state.generator.bias.data.copy()
    x, y = train_data(seed0)
    for _ in range(3):
        trainer.joint_train_step(state, x, y, handle(seed0), seed0.student_kd, TEMPLATE)
    assert state.generator.weight.data.tobytes() == w.tobytes()
    assert state.generator.bias.data.tobytes() == b.tobytes()


def test_generator_update_never_sees_teacher_outputs(seed0):
    x, y = train_data(seed0)
    weights = []
    for k in range(3):
        rng = np.random.default_rng(k)
        state = fresh(seed0)
        state.best_loss = -math.inf  # pin best_z so the student path is the same in every run
        stub = StubTeacher(lambda r, rng=rng: rng.normal(size=(len(r.token_ids), 2)) * 10)
        trainer.joint_train_step(state, x, y, stub, seed0.student_kd, TEMPLATE)
        weights.append((state.generator.weight.data.tobytes(), state.generator.bias.data.tobytes()))
    assert weights[0] == weights[1] == weights[2]


def test_student_must_be_frozen(seed0):
    student = seed0.student_kd.copy()
    student.set_trainable(True)
    x, y = train_data(seed0)
    with pytest.raises(ContractError):
        trainer.joint_train_step(fresh(seed0), x, y, handle(seed0), student, TEMPLATE)


def _cma_fingerprint(cma):
    return (cma.mean.tobytes(), cma.C.tobytes(), cma.sigma, cma.generation,
            repr(cma.rng.bit_generator.state), cma.awaiting_tell)


def test_budget_shortfall_is_atomic(seed0):
    x, y = train_data(seed0)
    state = fresh(seed0)
    h = handle(seed0, budget=state.config.popsize - 1)
    before = _cma_fingerprint(state.cma)
    with pytest.raises(BudgetError):
        trainer.joint_train_step(state, x, y, h, seed0.student_kd, TEMPLATE)
    assert h.calls_used == 0 and state.api_calls_used == 0
    assert _cma_fingerprint(state.cma) == before

    state = fresh(seed0, budget=5)
    with pytest.raises(BudgetError):
        trainer.joint_train_step(state, x, y, handle(seed0), seed0.student_kd, TEMPLATE)


def test_teacher_failure_mid_population_leaves_state_unchanged(seed0):
    x, y = train_data(seed0)
    state = fresh(seed0)
    ref = fresh(seed0)
    before = _cma_fingerprint(state.cma)
    w = state.generator.weight.data.tobytes()
    flaky = StubTeacher(lambda r: np.zeros((len(r.token_ids), 2)), fail_at=3)
    with pytest.raises(ServiceError):
        trainer.joint_train_step(state, x, y, flaky, seed0.student_kd, TEMPLATE)
    assert _cma_fingerprint(state.cma) == before
    assert state.api_calls_used == 0 and state.step == 0
    assert state.generator.weight.data.tobytes() == w
    # the retried step is the step that would have happened
    h1, h2 = handle(seed0), handle(seed0)
    a = trainer.joint_train_step(state, x, y, h1, seed0.student_kd, TEMPLATE)
    b = trainer.joint_train_step(ref, x, y, h2, seed0.student_kd, TEMPLATE)
    assert a == b


# inference

def test_argmax_ignores_constant_logit_shift(seed0):
    state = fresh(seed0)
    x, y = train_data(seed0)
    trainer.joint_train_step(state, x, y, handle(seed0), seed0.student_kd, TEMPLATE)
    test = seed0.bundle.split.test
    inst = test.instances[:40]
    _, base = trainer.evaluate(state, inst, test.labels[:40], handle(seed0), seed0.student_kd, TEMPLATE)
    for shift in (-1e3, 3.7, 1e6):
        _, shifted = trainer.evaluate(state, inst, test.labels[:40], Shifted(handle(seed0), shift),
                                      seed0.student_kd, TEMPLATE)
        assert np.array_equal(base, shifted)
    _, again = trainer.evaluate(state, inst, test.labels[:40], handle(seed0), seed0.student_kd, TEMPLATE)
    assert np.array_equal(base, again)


def test_constant_logits_tie_break_to_lowest_class(seed0):
    stub = StubTeacher(lambda r: np.full((len(r.token_ids), 2), 0.25))
    state = fresh(seed0)
    for inst in seed0.bundle.split.test.instances[:10]:
        assert trainer.infer(state, inst, stub, seed0.student_kd, TEMPLATE) == 0
    assert stub.used == 10


def test_budget_exactness_closed_form(seed0, tmp_path):
    x, y = train_data(seed0)
    state = fresh(seed0, budget=80)
    test = seed0.bundle.split.test
    service = TeacherService(seed0.teacher, budget=80 + 25)
    h = InProcessHandle(service)
    trainer.train(state, x, y, h, seed0.student_kd, TEMPLATE, csv_path=tmp_path / "train.csv")
    trainer.evaluate(state, test.instances[:25], test.labels[:25], h, seed0.student_kd, TEMPLATE)
    G = state.cma.generation
    assert G == trainer.steps_for_budget(state.config, len(x)) == 10
    assert service.calls_used == G * state.config.popsize * 1 + 25
    with open(tmp_path / "train.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == trainer.TRAIN_CSV_FIELDS and len(rows) == G
    assert int(rows[-1]["api_calls_used"]) == 80


def test_snapshot_resume_is_deterministic(seed0, tmp_path):
    x, y = train_data(seed0)
    test = seed0.bundle.split.test
    straight = fresh(seed0, budget=64)
    trainer.train(straight, x, y, handle(seed0), seed0.student_kd, TEMPLATE)

    first = fresh(seed0, budget=64)
    for _ in range(3):
        trainer.joint_train_step(first, x, y, handle(seed0), seed0.student_kd, TEMPLATE)
    d1 = trainer.save_state(first, tmp_path / "s.ckpt")
    resumed = trainer.load_state(tmp_path / "s.ckpt")
    assert trainer.save_state(resumed, tmp_path / "s2.ckpt") == d1
    trainer.train(resumed, x, y, handle(seed0), seed0.student_kd, TEMPLATE)

    assert resumed.step == straight.step and resumed.api_calls_used == straight.api_calls_used
    assert resumed.best_z.tobytes() == straight.best_z.tobytes()
    assert resumed.generator.weight.data.tobytes() == straight.generator.weight.data.tobytes()
    _, a = trainer.evaluate(straight, test.instances[:30], test.labels[:30], handle(seed0), seed0.student_kd,
                            TEMPLATE)
    _, b = trainer.evaluate(resumed, test.instances[:30], test.labels[:30], handle(seed0), seed0.student_kd,
                            TEMPLATE)
    assert np.array_equal(a, b)


def test_generator_only_training_makes_no_calls(seed0):
    x, y = train_data(seed0)
    state = fresh(seed0)
    mean0 = state.cma.mean.copy()
    trainer.train_generator_only(state, x, y, seed0.student_kd, TEMPLATE, steps=5)
    assert state.api_calls_used == 0 and state.step == 5
    assert np.array_equal(state.cma.mean, mean0) and np.array_equal(state.best_z, np.zeros_like(mean0))
    ce = [h["student_ce"] for h in state.history]
    assert ce[-1] < ce[0]
