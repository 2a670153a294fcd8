import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from dataclasses import replace

from boundary_lq.errors import RiccatiError, ValidationError
from boundary_lq.fixtures import build_fixture, random_bounded_model
from boundary_lq.lq import (
    are_residual,
    closed_loop_decay_fit,
    cost_identity_defect,
    derivative_check,
    direct_minimization_oracle,
    feedback_check,
    finalize_riccati,
    gain_on_smooth_domain,
    newton_kleinman_oracle,
    optimal_pair,
    phi_apply,
    relative_frobenius,
    riccati_alternative,
    riccati_assemble,
    riccati_identity_defect,
    riccati_newton_kleinman,
    scalar_riccati_exact,
)
from boundary_lq.model import StateSpaceModel, choose_horizon
from boundary_lq.trajectory import build_grid


@pytest.fixture(scope="module")
def r5_grid(random5):
    return build_grid(choose_horizon(random5), 512)


@pytest.fixture(scope="module")
def r5_riccati(random5, r5_grid):
    return riccati_assemble(random5, r5_grid)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, -0.05), b=st.floats(0.1, 3), r=st.floats(0.1, 3))
def test_scalar_root_solves_the_quadratic(a, b, r):
    p = scalar_riccati_exact(a, b, r)
    assert p > 0
    assert abs(2 * a * p - b * b * p * p + r * r) <= 1e-9 * max(1.0, r * r)


def test_scalar_closed_form(scalar):
    sol = riccati_assemble(scalar, build_grid(20.0, 1024))
    assert abs(sol.P[0, 0] - (math.sqrt(2) - 1)) <= 1e-4
    assert sol.cost_identity_defect <= 1e-12


def test_zero_observation_gives_zero_operator(random5):
    model = replace(random5, R=np.zeros_like(random5.R))
    sol = riccati_assemble(model, build_grid(10.0, 64))
    assert not np.any(sol.P) and not np.any(sol.K)
    np.testing.assert_array_equal(sol.A_P, model.A)
    assert not np.any(riccati_alternative(model, build_grid(10.0, 64), sol))
    assert not np.any(newton_kleinman_oracle(model))


def test_optimal_pair_matches_dense_oracle(random5, rng):
    grid = build_grid(12.0, 128)
    Y0 = rng.standard_normal((5, 3))
    a = optimal_pair(random5, grid, Y0)
    b = direct_minimization_oracle(random5, grid, Y0)
    np.testing.assert_allclose(a.u.values, b.u.values, atol=1e-10)
    np.testing.assert_allclose(a.cost, b.cost, rtol=1e-10)


def test_oracle_size_guard(random5):
    with pytest.raises(ValidationError):
        direct_minimization_oracle(random5, build_grid(1.0, 64), np.ones(5), max_unknowns=10)


def test_initial_state_validation(random5):
    grid = build_grid(1.0, 16)
    with pytest.raises(ValidationError) as exc:
        optimal_pair(random5, grid, np.ones(3))
    assert exc.value.field == "y0"
    with pytest.raises(ValidationError):
        optimal_pair(random5, grid, np.full(5, np.nan))


def test_phi_at_zero_and_without_observation(random5, rng):
    grid = build_grid(6.0, 64)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(phi_apply(random5, grid, 0, x), x)
    free = replace(random5, R=np.zeros_like(random5.R))
    np.testing.assert_allclose(phi_apply(free, grid, 40, x), sla.expm(random5.A * grid.nodes[40]) @ x, atol=1e-12)
    with pytest.raises(ValidationError):
        phi_apply(random5, grid, 65, x)


def test_optimal_cost_beats_perturbations(random5, r5_grid, rng):
    x = rng.standard_normal(5)
    best = optimal_pair(random5, r5_grid, x)
    from boundary_lq.trajectory import discretize

    its = discretize(random5, r5_grid)
    for _ in range(5):
        u = best.u.values + 1e-2 * rng.standard_normal(best.u.values.shape)
        y = its.free(x) + its.apply(u)
        J = r5_grid.integrate(np.einsum("ki,ij,kj->k", y, random5.Q, y) + np.einsum("ki,ij,kj->k", u, random5.M_U, u))
        assert J > best.cost


def test_riccati_structure_and_identity(random5, r5_grid, r5_riccati):
    assert r5_riccati.symmetry_defect <= 1e-9
    assert r5_riccati.min_eigenvalue >= 0
    assert cost_identity_defect(random5, r5_grid, r5_riccati.P) <= 1e-10
    MP = random5.M_Y @ r5_riccati.P
    np.testing.assert_allclose(MP, MP.T, atol=1e-12)


def test_newton_kleinman_against_scipy_are():
    model = random_bounded_model(4, dim_y=4, dim_u=2, dim_z=2)
    euclid = StateSpaceModel(A=model.A, B=model.B, R=model.R)
    P = newton_kleinman_oracle(euclid)
    X = sla.solve_continuous_are(euclid.A, euclid.B, euclid.Q, np.eye(2))
    assert relative_frobenius(P, X) <= 1e-10


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000))
def test_newton_kleinman_residual(seed):
    model = random_bounded_model(seed)
    P = newton_kleinman_oracle(model)
    assert are_residual(model, P) <= 1e-10
    assert riccati_identity_defect(model, P) <= 1e-10


def test_variational_converges_to_newton_kleinman(random5):
    ref = riccati_newton_kleinman(random5).P
    T = choose_horizon(random5)
    errs = [relative_frobenius(riccati_assemble(random5, build_grid(T, n), probes=0).P, ref) for n in (256, 512, 1024)]
    assert errs[0] / errs[1] >= 3.0 and errs[1] / errs[2] >= 3.0


def test_alternative_route_at_default_grid():
    fx = build_fixture("random5")
    sol = riccati_assemble(fx.model, fx.grid, probes=0)
    alt = riccati_alternative(fx.model, fx.grid, sol)
    assert relative_frobenius(alt, sol.P) <= 1e-6
    M = fx.model.M_Y @ alt  # no symmetrization applied
    assert np.linalg.norm(M - M.T) <= 1e-8 * np.linalg.norm(M)


def test_finalize_rejects_bad_operators(random5):
    with pytest.raises(RiccatiError):
        finalize_riccati(random5, np.triu(np.ones((5, 5))), "test")
    with pytest.raises(RiccatiError):
        finalize_riccati(random5, -np.eye(5), "test")


def test_feedback_and_closed_loop(random5, r5_grid, r5_riccati, rng):
    rep = feedback_check(random5, r5_grid, r5_riccati, rng.standard_normal(5))
    assert rep.feedback_defect <= 1e-4 and rep.closed_loop_defect <= 1e-4


def test_derivative_formula(random5, r5_grid, r5_riccati):
    rep = derivative_check(random5, r5_grid, r5_riccati)
    assert rep.max_defect <= 1e-6
    assert rep.omega1_fit.stable


def test_closed_loop_decays_faster_than_margin(random5, r5_grid, r5_riccati):
    fit = closed_loop_decay_fit(random5, r5_riccati.A_P, r5_grid.horizon)
    assert fit.rate > 0


def test_gain_smoothing_report(random5, r5_riccati):
    rep = gain_on_smooth_domain([random5, random5], [r5_riccati, r5_riccati], epsilon=0.1)
    assert rep.bounded and rep.smoothed_norms[0] == rep.smoothed_norms[1]
    with pytest.raises(ValidationError):
        gain_on_smooth_domain([random5], [], epsilon=0.1)
