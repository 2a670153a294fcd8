import math

import pytest

from boundary_lq.errors import ValidationError
from boundary_lq.fixtures import BOUNDED, FAULTS, SHIPPED, build_fixture, refinement_family
from boundary_lq.verification import scalar_quadrature_error, statement_suite


def test_unknown_fixture():
    with pytest.raises(ValidationError) as exc:
        build_fixture("random6")
    assert exc.value.field == "fixture"


@pytest.mark.parametrize("name", ["scalar", "zero-R", "random5"])
def test_bounded_fixtures_are_bounded(name):
    fx = build_fixture(name, nodes=64)
    assert fx.bounded and fx.ops is None and name in BOUNDED
    assert fx.grid.size == 64


def test_registry_is_disjoint():
    assert not set(SHIPPED) & set(FAULTS)


def test_refinement_family_sizes():
    assert [f.grid.size for f in refinement_family("random5", 3, nodes=256)] == [64, 128, 256]
    assert [f.ops.n for f in refinement_family("thermo1d", 3)] == [8, 16, 32]
    assert [f.ops.n for f in refinement_family("thermo1d", 4)] == [8, 16, 32, 64]
    with pytest.raises(ValidationError):
        refinement_family("scalar", 1)


def test_scalar_quadrature_error_is_small_and_positive():
    err = scalar_quadrature_error()
    assert 0 < err < 1e-4
    assert scalar_quadrature_error() is err or math.isclose(scalar_quadrature_error(), err)


def test_suite_passes_on_scalar():
    fx = build_fixture("scalar")
    suite = statement_suite(fx.model, fx.grid, bounded=True)
    assert suite.passed, [v.item for v in suite.verdicts if v.gating and not v.passed]
    items = {v.item for v in suite.verdicts}
    for prefix in ("S1.", "S2.", "S3.", "S4.", "S5.", "S6.", "S7.", "S8.", "S9."):
        assert any(i.startswith(prefix) for i in items), prefix
    doc = suite.to_json_dict()
    assert doc["passed"] is True and doc["model"] == "scalar"


def test_suite_zero_R_has_zero_riccati():
    fx = build_fixture("zero-R", nodes=512)
    suite = statement_suite(fx.model, fx.grid, bounded=True)
    assert suite.passed
