import json
import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from boundary_lq.errors import ValidationError
from boundary_lq.fixtures import random_bounded_model
from boundary_lq.io_utils import dumps
from boundary_lq.model import (
    StateSpaceModel,
    adjoint_apply,
    choose_horizon,
    fit_exponential_envelope,
    fractional_power,
    fractional_power_apply,
    gram_operator_norm,
    load_model,
    save_model,
    semigroup_apply,
    semigroup_decay_fit,
    spectral_abscissa,
)


def inner(M, a, b):
    return float(a @ M @ b)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), dims=st.tuples(st.integers(1, 6), st.integers(1, 3), st.integers(1, 4)))
def test_gram_adjoints_are_exact(seed, dims):
    n, m, p = dims
    model = random_bounded_model(seed, dim_y=n, dim_u=m, dim_z=p)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    u = rng.standard_normal(m)
    z = rng.standard_normal(p)
    assert math.isclose(inner(model.M_Y, model.A @ x, y), inner(model.M_Y, x, model.A_adj @ y), rel_tol=1e-9, abs_tol=1e-12)
    assert math.isclose(inner(model.M_Y, model.B @ u, y), inner(model.M_U, u, model.B_adj @ y), rel_tol=1e-9, abs_tol=1e-12)
    assert math.isclose(inner(model.M_Z, model.R @ x, z), inner(model.M_Y, x, model.R_adj @ z), rel_tol=1e-9, abs_tol=1e-12)


def test_euclidean_adjoint_is_transpose():
    model = StateSpaceModel(A=[[-1.0, 0.0], [0.0, -2.0]], B=[[2.0], [0.0]], R=np.eye(2))
    np.testing.assert_allclose(adjoint_apply(model, "B", np.array([1.0, 1.0])), [2.0])


def test_semigroup_adjoint_matches_flow(random5, rng):
    x, y = rng.standard_normal(5), rng.standard_normal(5)
    lhs = inner(random5.M_Y, semigroup_apply(random5, 0.7, x), y)
    rhs = inner(random5.M_Y, x, semigroup_apply(random5, 0.7, y, adjoint=True))
    assert math.isclose(lhs, rhs, rel_tol=1e-10)


def test_semigroup_at_zero_is_identity(random5, rng):
    x = rng.standard_normal(5)
    np.testing.assert_allclose(semigroup_apply(random5, 0.0, x), x)


def test_gram_operator_norm_matches_definition(random5, rng):
    X = rng.standard_normal((5, 5))
    best = 0.0
    for _ in range(4000):
        v = rng.standard_normal(5)
        best = max(best, math.sqrt(inner(random5.M_Y, X @ v, X @ v) / inner(random5.M_Y, v, v)))
    exact = gram_operator_norm(X, random5.M_Y, random5.M_Y)
    assert best <= exact * (1 + 1e-12)
    assert best >= 0.9 * exact


@pytest.mark.parametrize(
    "bad, field",
    [
        (dict(A=[[1.0]], B=[[1.0]], R=[[1.0]]), "A"),
        (dict(A=[[0.0]], B=[[1.0]], R=[[1.0]]), "A"),
        (dict(A=[[-1.0]], B=[[1.0], [2.0]], R=[[1.0]]), "B"),
        (dict(A=[[-1.0]], B=[[1.0]], R=[[1.0, 2.0]]), "R"),
        (dict(A=[[-1.0]], B=[[1.0]], R=[[1.0]], M_Y=[[-1.0]]), "M_Y"),
        (dict(A=[[-1.0]], B=[[1.0]], R=[[1.0]], M_U=[[1.0, 0.0]]), "M_U"),
        (dict(A=[[-1.0, 0.0], [0.0, -1.0]], B=[[1.0], [0.0]], R=np.eye(2), M_Y=[[1.0, 2.0], [0.0, 1.0]]), "M_Y"),
        (dict(A=[["x"]], B=[[1.0]], R=[[1.0]]), "A"),
    ],
)
def test_validation_names_the_field(bad, field):
    with pytest.raises(ValidationError) as exc:
        StateSpaceModel(**bad)
    assert exc.value.field == field


def test_check_false_admits_unstable_generator():
    m = StateSpaceModel(A=[[1.0]], B=[[1.0]], R=[[1.0]], check=False)
    assert spectral_abscissa(m.A) == 1.0


def test_json_round_trip(tmp_path, random5):
    path = tmp_path / "m.json"
    save_model(random5, path)
    back = load_model(path)
    for key in ("A", "B", "R", "M_Y", "M_U", "M_Z"):
        np.testing.assert_array_equal(getattr(back, key), getattr(random5, key))
    assert dumps(back.to_json_dict()) == path.read_text()


def test_json_with_A_inv_B(tmp_path):
    doc = {"A": [[-2.0]], "A_inv_B": [[0.5]], "R": [[1.0]]}
    m = StateSpaceModel.from_json_dict(doc)
    np.testing.assert_allclose(m.B, [[-1.0]])


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"B": [[1.0]], "R": [[1.0]]}, "A"),
        ({"A": [[-1.0]], "R": [[1.0]]}, "B"),
        ({"A": [[-1.0]], "B": [[1.0]], "R": [[1.0]], "dim_u": 3}, "dim_u"),
    ],
)
def test_json_validation(doc, field):
    with pytest.raises(ValidationError) as exc:
        StateSpaceModel.from_json_dict(doc)
    assert exc.value.field == field


def test_load_model_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ValidationError) as exc:
        load_model(path)
    assert exc.value.field == "model"


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 5000), a=st.floats(0.1, 0.9), b=st.floats(0.1, 0.9))
def test_fractional_powers_compose(seed, a, b):
    model = random_bounded_model(seed, dim_y=4, dim_u=1, dim_z=1)
    Pa = fractional_power(model, -a / 2)
    Pb = fractional_power(model, -b / 2)
    Pab = fractional_power(model, -(a + b) / 2)
    np.testing.assert_allclose(Pa @ Pb, Pab, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(fractional_power(model, a / 2) @ Pa, np.eye(4), atol=1e-8)


def test_fractional_half_power_squares_to_generator(random5):
    H = fractional_power(random5, 0.5)
    np.testing.assert_allclose(H @ H, -random5.A, rtol=1e-8, atol=1e-10)


def test_fractional_power_quadrature_branch(monkeypatch, random5):
    import boundary_lq.model as mdl

    model = random_bounded_model(3)
    expect = fractional_power(model, -0.3)
    fresh = random_bounded_model(3)
    monkeypatch.setattr(mdl, "_EIG_COND_LIMIT", 0.0)
    got = mdl.fractional_power(fresh, -0.3)
    np.testing.assert_allclose(got, expect, rtol=1e-8, atol=1e-10)


def test_fractional_power_rejects_large_exponent(random5):
    with pytest.raises(ValidationError):
        fractional_power(random5, 1.5)


def test_fractional_power_apply_matches_matrix(random5, rng):
    x = rng.standard_normal(5)
    np.testing.assert_allclose(fractional_power_apply(random5, 0.25, -1, x), fractional_power(random5, -0.25) @ x)


def test_envelope_fit_recovers_exact_exponential():
    t = np.linspace(0.1, 5.0, 40)
    fit = fit_exponential_envelope(t, 3.0 * np.exp(-2.0 * t))
    assert abs(fit.amplitude - 3.0) <= 1e-6 and abs(fit.rate - 2.0) <= 1e-6


def test_envelope_dominates_samples(rng):
    t = np.linspace(0.1, 5.0, 40)
    n = np.exp(-t) * (1 + 0.3 * rng.random(40))
    fit = fit_exponential_envelope(t, n)
    assert np.all(fit.envelope(t) >= n * (1 - 1e-12))


def test_semigroup_decay_and_horizon(scalar):
    fit = semigroup_decay_fit(scalar)
    assert abs(fit.rate - 1.0) < 1e-9
    T = choose_horizon(scalar)
    assert math.isclose(T, math.log(fit.amplitude / 1e-8), rel_tol=1e-9)


def test_semigroup_envelope_dominates_random(random5):
    fit = semigroup_decay_fit(random5)
    for t in (0.5, 2.0, 7.0):
        assert gram_operator_norm(sla.expm(random5.A * t), random5.M_Y, random5.M_Y) <= fit.envelope(t) * (1 + 1e-9)


def test_dumps_is_deterministic():
    doc = {"b": np.float64(0.1), "a": [np.int64(1), np.array([1.5, np.inf])]}
    assert dumps(doc) == dumps(json.loads(dumps(doc)))
    assert list(json.loads(dumps(doc))) == ["a", "b"]
