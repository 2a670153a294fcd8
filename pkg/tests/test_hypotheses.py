import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boundary_lq.errors import ConditioningError, ValidationError
from boundary_lq.fixtures import build_fixture, scalar_model
from boundary_lq.hypotheses import (
    DecompositionSupplier,
    adjoint_kernel,
    check_decomposition,
    check_G_conditions,
    check_Lq_extension,
    check_R_smoothing,
    fit_singular_envelope,
    fit_singular_estimate,
    hypothesis_report,
    kernel_lp_norm,
    kernel_norms,
    refinement_verdict,
    singular_estimate_passed,
    trivial_supplier,
)
from boundary_lq.model import DecayFit, choose_horizon
from boundary_lq.trajectory import build_grid


def test_envelope_fit_recovers_synthetic_singularity():
    t = np.geomspace(1e-3, 10.0, 200)
    fit = fit_singular_envelope(t, 5.0 * t**-0.8 * np.exp(-0.5 * t))
    assert abs(fit.singularity_exponent - 0.8) <= 0.02 * 0.8
    assert abs(fit.rate - 0.5) <= 0.02 * 0.5
    assert abs(fit.amplitude - 5.0) <= 0.02 * 5.0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 3.0), st.floats(0.1, 10.0))
def test_envelope_dominates_samples(gamma, eta, N):
    t = np.geomspace(1e-2, 5.0, 60)
    noisy = N * t**-gamma * np.exp(-eta * t) * (1 + 0.1 * np.sin(7 * t))
    fit = fit_singular_envelope(t, noisy)
    assert np.all(fit.envelope(t) >= noisy * (1 - 1e-12))


def test_envelope_fit_rejects_degenerate_samples():
    with pytest.raises(ValidationError):
        fit_singular_envelope([1.0, 2.0], [1.0, 1.0])
    with pytest.raises(ConditioningError):
        fit_singular_envelope([1.0, 1.0, 1.0, 1.0], [1.0, 2.0, 3.0, 4.0])


@pytest.mark.parametrize(
    "gamma, eta, expected", [(0.5, 1.0, True), (-0.04, 0.5, True), (1.0, 1.0, False), (0.5, -0.1, False)]
)
def test_singular_estimate_rule(gamma, eta, expected):
    assert singular_estimate_passed(DecayFit(1.0, eta, gamma)) is expected


@pytest.mark.parametrize(
    "values, expected",
    [([1, 2, 4], True), ([1, 2.1], False), ([5, 1, 0.5], True), ([0, 0, 0], True), ([1, np.nan], False), ([3], True)],
)
def test_refinement_verdict(values, expected):
    assert refinement_verdict(values) is expected


def test_trivial_supplier_label_and_kernel(random5):
    sup = trivial_supplier(random5)
    assert sup.label == "F=B#exp(A#t), G=0"
    F, G = sup.stack([0.0, 0.5])
    assert not np.any(G)
    np.testing.assert_allclose(F[0], random5.solve_MU(random5.B.T @ random5.M_Y), atol=1e-13)


def test_adjoint_kernel_is_gram_adjoint(random5, rng):
    t = 0.7
    y, u = rng.standard_normal(random5.dim_y), rng.standard_normal(random5.dim_u)
    from scipy.linalg import expm

    lhs = (adjoint_kernel(random5, t) @ y) @ random5.M_U @ u
    rhs = y @ random5.M_Y @ (expm(random5.A * t) @ random5.B @ u)
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_kernel_lp_norm_exact_at_p2(random5, rng):
    stack = rng.standard_normal((6, random5.dim_u, random5.dim_y))
    w = rng.uniform(0.1, 1.0, 6)
    # assemble the operator y -> (sqrt(w_k) K_k y)_k between Gram-orthonormal coordinates
    LU = np.linalg.cholesky(random5.M_U)
    LY = np.linalg.cholesky(random5.M_Y)
    big = np.vstack([np.sqrt(wk) * LU.T @ K @ np.linalg.inv(LY.T) for wk, K in zip(w, stack)])
    assert np.isclose(kernel_lp_norm(random5, stack, w, 2.0), np.linalg.norm(big, 2), rtol=1e-12)


def test_kernel_lp_norm_lower_bounds_and_validates(random5, rng):
    stack = rng.standard_normal((5, random5.dim_u, random5.dim_y))
    w = np.full(5, 0.2)
    # every dual-power-iteration value is attained by some vector, so it never exceeds the sum of pointwise norms
    upper = float(np.sum(w * kernel_norms(random5, stack)))
    assert 0 < kernel_lp_norm(random5, stack, w, 1.0) <= upper * (1 + 1e-12)
    assert kernel_lp_norm(random5, np.zeros_like(stack), w, 3.0) == 0.0
    with pytest.raises(ValidationError):
        kernel_lp_norm(random5, stack, w, 0.5)


def test_scalar_kernel_norm_closed_form():
    model = scalar_model()
    t = np.linspace(0.1, 2.0, 5)
    F, _ = trivial_supplier(model).stack(t)
    np.testing.assert_allclose(kernel_norms(model, F), np.exp(-t), rtol=1e-13)


def test_decomposition_passes_on_thermo(thermo8):
    model, ops = thermo8
    from boundary_lq.thermoplate import thermo_decomposition_supplier

    rep = check_decomposition(model, thermo_decomposition_supplier(ops, model), build_grid(choose_horizon(model), 256))
    assert rep.passed and rep.max_defect <= 1e-8


def test_decomposition_rejects_foreign_supplier(random5, thermo8):
    with pytest.raises(ValidationError) as exc:
        check_decomposition(thermo8[0], trivial_supplier(random5), build_grid(1.0, 16))
    assert exc.value.field == "supplier"


def test_fault_decomposition_is_detected():
    fx = build_fixture("thermo1d-faultG", mesh_size=8)
    rep = check_decomposition(fx.model, fx.supplier, build_grid(fx.grid.horizon, 256))
    assert not rep.passed and rep.max_defect > 1e-3


def test_thermo_singular_exponent_below_one():
    fx = build_fixture("thermo1d", mesh_size=16)
    fit = fit_singular_estimate(fx.supplier, build_grid(fx.grid.horizon, 512))
    assert 0 < fit.singularity_exponent < 1 and fit.rate > 0


def test_synthetic_G_breaks_smoothing():
    values = []
    for n in (64, 128, 256):
        fx = build_fixture("random5-synthG", nodes=n)
        values.append(check_G_conditions(fx.model, fx.supplier, build_grid(1.0, n), 0.1, (1.0,)).K_T)
    assert not refinement_verdict(values)
    assert values[-1] / values[-2] == pytest.approx(math.sqrt(8), rel=0.05)


def test_rough_observation_breaks_R_smoothing():
    values = [check_R_smoothing(build_fixture("thermo1d-roughR", mesh_size=m).model, 0.1) for m in (8, 16, 32)]
    assert not refinement_verdict(values)


def test_smooth_observation_keeps_R_smoothing():
    values = [check_R_smoothing(build_fixture("thermo1d", mesh_size=m).model, 0.1) for m in (8, 16, 32)]
    assert refinement_verdict(values)


def test_Lq_extension_validates_q(random5):
    with pytest.raises(ValidationError) as exc:
        check_Lq_extension(random5, build_grid(1.0, 16), 0.1, (2.0,))
    assert exc.value.field == "q"


def test_bounded_report_passes(random5):
    sup = trivial_supplier(random5)
    grids = [build_grid(1.0, n) for n in (64, 128)]
    rep = hypothesis_report([(random5, sup), (random5, sup)], grids, build_grid(choose_horizon(random5), 256))
    assert rep.passed, [v.item for v in rep.verdicts if v.gating and not v.passed]
    items = {v.item for v in rep.verdicts}
    assert {"stability", "bounded_composite", "decomposition", "singular_estimate", "smoothing_epsilon"} <= items
    assert rep.to_json_dict()["passed"] is True


def test_report_validates_family(random5):
    with pytest.raises(ValidationError):
        hypothesis_report([], [])
    with pytest.raises(ValidationError):
        hypothesis_report([(random5, trivial_supplier(random5))], [])


def test_zero_singular_part_is_accepted(random5):
    zero = np.zeros((random5.dim_u, random5.dim_y))
    sup = DecompositionSupplier(random5, lambda t: (zero, adjoint_kernel(random5, t)), "F=0")
    rep = hypothesis_report([(random5, sup)], [build_grid(1.0, 32)], build_grid(5.0, 64))
    v = next(v for v in rep.verdicts if v.item == "singular_estimate")
    assert v.passed and v.threshold == "F = 0"
