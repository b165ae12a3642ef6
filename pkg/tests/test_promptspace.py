import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdfo.errors import ConfigError, ContractError, DimensionError, NumericError
from gdfo.models import init_params
from gdfo.promptspace import (PromptVector, ProjectionMatrix, combine, combine_values, make_projection,
                              prompt_from_table, sample_initial_prompt)


def pv(values, role="p_gd"):
    return PromptVector(np.asarray(values, dtype=float), role)


def fixed_projection(M):
    return ProjectionMatrix(np.asarray(M, dtype=float), 1.0, 0)


def test_half_alpha_example():
    A = fixed_projection(np.eye(2))
    out = combine(pv([2.0, 0.0]), pv([0.0, 0.0], "p0"), A, [0.0, 4.0], 0.5)
    assert out.role == "combined"
    assert np.array_equal(out.values, [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_endpoints_are_bitwise_exact(seed):
    rng = np.random.default_rng(seed)
    D, d = 12, 3
    scale = 10.0 ** rng.uniform(-8, 8)
    p_gd = rng.normal(size=D) * scale
    p0 = rng.normal(size=D)
    A = make_projection(D, d, seed)
    z = rng.normal(size=d) * scale
    assert combine_values(p_gd, p0, A, z, 1.0).tobytes() == p_gd.tobytes()
    assert combine_values(p_gd, p0, A, z, 0.0).tobytes() == (p0 + A.project(z)).tobytes()


def test_endpoint_keeps_negative_zero():
    A = fixed_projection(np.ones((2, 1)))
    out = combine_values(np.array([-0.0, 1.0]), np.zeros(2), A, [0.0], 1.0)
    assert np.signbit(out[0])


def test_linearity():
    rng = np.random.default_rng(3)
    D, d = 10, 4
    A = make_projection(D, d, 1)
    A0 = fixed_projection(np.zeros((D, d)))
    for _ in range(20):
        p, q, p0 = rng.normal(size=(3, D))
        z = rng.normal(size=d)
        a = rng.uniform()
        lhs = combine_values(p, p0, A, z, a) + combine_values(q, p0 * 0, A0, np.zeros(d), a)
        np.testing.assert_allclose(lhs, combine_values(p + q, p0, A, z, a), rtol=1e-12, atol=1e-12)


def test_batched_combine_matches_rows():
    rng = np.random.default_rng(4)
    A = make_projection(6, 2, 0)
    p_gd, p0, z = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=2)
    batched = combine_values(p_gd, p0, A, z, 0.3)
    for i in range(3):
        assert batched[i].tobytes() == combine_values(p_gd[i], p0, A, z, 0.3).tobytes()


@pytest.mark.parametrize("alpha", [-0.1, 1.5, float("nan")])
def test_alpha_out_of_range(alpha):
    with pytest.raises(ConfigError):
        combine_values(np.zeros(4), np.zeros(4), make_projection(4, 2, 0), np.zeros(2), alpha)


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        combine_values(np.zeros(5), np.zeros(4), make_projection(4, 2, 0), np.zeros(2), 0.5)
    with pytest.raises(DimensionError):
        make_projection(4, 2, 0).project(np.zeros(3))


def test_prompt_vector_invariants():
    with pytest.raises(NumericError):
        pv([1.0, np.nan])
    with pytest.raises(DimensionError):
        pv(np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        pv([1.0], role="other")
    with pytest.raises(ValueError):
        pv([1.0, 2.0]).values[0] = 5.0


def test_projection_properties():
    assert make_projection(20, 5, 9).values.tobytes() == make_projection(20, 5, 9).values.tobytes()
    A = make_projection(20, 5, 9)
    assert np.array_equal(A.project(np.zeros(5)), np.zeros(20))
    assert A.scale == pytest.approx(1 / np.sqrt(5))
    with pytest.raises(ConfigError):
        make_projection(4, 5, 0)
    with pytest.raises(ValueError):
        A.values[0, 0] = 1.0
    A.verify()


@pytest.mark.parametrize("D,scale", [(64, 0.125), (128, 1.0), (1600, 0.05)])
def test_projection_column_norms_concentrate(D, scale):
    ratio = np.linalg.norm(make_projection(D, D, seed=D, scale=scale).values, axis=0) / (scale * np.sqrt(D))
    assert abs(ratio.mean() - 1) < 0.02
    # a single column's relative spread is about 1/sqrt(2D), so the 10% band holds for every column only when D is large
    if D >= 1600:
        assert np.all(np.abs(ratio - 1) < 0.10)
    else:
        assert np.median(np.abs(ratio - 1)) < 0.10


def test_initial_prompt_from_zero_embeddings():
    params = init_params(16, 3, 4, 2, (1, 2))
    params.weights["embed"].data[:] = 0.0
    p0 = sample_initial_prompt(params, 4, seed=5)
    assert p0.role == "p0" and np.array_equal(p0.values, np.zeros(12))


def test_initial_prompt_determinism_and_checks():
    params = init_params(16, 3, 4, 2, (1, 2), seed=1)
    a, b = sample_initial_prompt(params, 4, 7), sample_initial_prompt(params, 4, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() == prompt_from_table(params.embeddings, 4, 7).values.tobytes()
    with pytest.raises(DimensionError):
        sample_initial_prompt(params, 3, 7)


def test_initial_prompt_norm_matches_table_statistics():
    params = init_params(64, 6, 5, 2, (1, 2), seed=2)
    table = params.embeddings
    norms = [np.linalg.norm(sample_initial_prompt(params, 5, s).values) for s in range(1000)]
    # E||p0||^2 = n * mean row norm^2; compare on the squared scale, then on the norm scale
    row_sq = np.sum(table**2, axis=1)
    assert abs(np.mean(np.square(norms)) / (5 * row_sq.mean()) - 1) < 0.05
    mc = np.random.default_rng(0).integers(64, size=(200_000, 5))
    direct = np.sqrt(row_sq[mc].sum(axis=1)).mean()
    assert abs(np.mean(norms) / direct - 1) < 0.05
