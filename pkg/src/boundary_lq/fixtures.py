"""Named models with their default time grids and decomposition suppliers."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .hypotheses import DecompositionSupplier, adjoint_kernel, trivial_supplier
from .model import StateSpaceModel, choose_horizon, spectral_abscissa
from .thermoplate import ThermoOperators, ThermoPlateParams, assemble_thermo_model, thermo_decomposition_supplier
from .trajectory import TimeGrid, build_grid

SHIPPED = ("scalar", "random5", "zero-R", "thermo1d", "thermo2d-small")
FAULTS = ("thermo1d-faultG", "thermo1d-roughR", "random5-synthG")
BOUNDED = ("scalar", "random5", "zero-R", "random5-synthG")

# (horizon or None for the decay-based choice, subintervals)
_GRID_DEFAULTS = {
    "scalar": (20.0, 4096),
    "random5": (None, 8192),
    "zero-R": (None, 1024),
    "random5-synthG": (None, 8192),
    "thermo1d": (None, 1024),
    "thermo1d-faultG": (None, 1024),
    "thermo1d-roughR": (None, 1024),
    "thermo2d-small": (None, 256),
}
_THERMO_MESH = {"thermo1d": (1, 32), "thermo1d-faultG": (1, 32), "thermo1d-roughR": (1, 32), "thermo2d-small": (2, 8)}


@dataclass(frozen=True, eq=False)
class Fixture:
    name: str
    model: StateSpaceModel
    grid: TimeGrid
    supplier: DecompositionSupplier
    ops: ThermoOperators | None = None

    @property
    def bounded(self) -> bool:
        """True for finite-dimensional models whose ``B`` is a genuine bounded operator."""
        return self.ops is None


def random_bounded_model(seed: int = 0, dim_y: int = 5, dim_u: int = 2, dim_z: int = 3, margin: float = 0.5):
    """Random stable model with random SPD Gram matrices; spectral abscissa ``-margin``."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((dim_y, dim_y)) / np.sqrt(dim_y)
    A = G - (spectral_abscissa(G) + margin) * np.eye(dim_y)

    def spd(k):
        X = rng.standard_normal((k, k)) / np.sqrt(k)
        return X @ X.T + np.eye(k)

    B = rng.standard_normal((dim_y, dim_u)) / np.sqrt(dim_y)
    R = rng.standard_normal((dim_z, dim_y)) / np.sqrt(dim_y)
    return StateSpaceModel(
        A=A, B=B, R=R, M_Y=spd(dim_y), M_U=spd(dim_u), M_Z=spd(dim_z), name=f"random{dim_y}-s{seed}"
    )


def scalar_model() -> StateSpaceModel:
    return StateSpaceModel(A=[[-1.0]], B=[[1.0]], R=[[1.0]], name="scalar")


def synthetic_G_supplier(model: StateSpaceModel, power: float = 0.5) -> DecompositionSupplier:
    """``G(t) = t^{-power}`` times a fixed rank-one map, ``F`` the remainder; ``G(0)`` is left at zero."""
    rng = np.random.default_rng(12345)
    a = rng.standard_normal(model.dim_u)
    b = rng.standard_normal(model.dim_y)
    rank1 = np.outer(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))

    def matrices(t: float):
        G = rank1 * t ** (-power) if t > 0 else np.zeros_like(rank1)
        return adjoint_kernel(model, t) - G, G

    return DecompositionSupplier(model, matrices, f"F=B#exp(A#t)-G, G=t^-{power:g} rank-one")


def rough_observation(ops: ThermoOperators, node: int | None = None) -> np.ndarray:
    """Row picking the difference quotient of the temperature at one interior node."""
    n = ops.n
    i = n // 2 if node is None else node
    R = np.zeros((1, 3 * n))
    R[0, 2 * n + i] = 1.0 / ops.spacing
    R[0, 2 * n + i + 1] = -1.0 / ops.spacing
    return R


def _thermo(name: str, dim: int, mesh: int):
    model, ops = assemble_thermo_model(ThermoPlateParams(spatial_dim=dim, mesh_size=mesh), name=f"{name}-{mesh}")
    supplier = thermo_decomposition_supplier(ops, model)
    if name == "thermo1d-faultG":
        supplier = supplier.scaled_G(1.01)
    elif name == "thermo1d-roughR":
        model = replace(model, R=rough_observation(ops), M_Z=np.eye(1), name=f"{name}-{mesh}")
        supplier = thermo_decomposition_supplier(ops, model)
    return model, ops, supplier


def build_fixture(
    name: str,
    horizon: float | None = None,
    nodes: int | None = None,
    grading: float = 3.0,
    mesh_size: int | None = None,
) -> Fixture:
    """Build a registered fixture; ``horizon``/``nodes``/``grading``/``mesh_size`` override the defaults."""
    if name not in _GRID_DEFAULTS:
        raise ValidationError(f"unknown fixture {name!r}; choose from {sorted(_GRID_DEFAULTS)}", field="fixture")
    ops = None
    if name == "scalar":
        model = scalar_model()
        supplier = trivial_supplier(model)
    elif name in ("random5", "random5-synthG"):
        model = random_bounded_model(0)
        supplier = trivial_supplier(model) if name == "random5" else synthetic_G_supplier(model)
    elif name == "zero-R":
        base = random_bounded_model(0)
        model = replace(base, R=np.zeros_like(base.R), name="zero-R")
        supplier = trivial_supplier(model)
    else:
        dim, mesh = _THERMO_MESH[name]
        model, ops, supplier = _thermo(name, dim, mesh_size or mesh)
    default_T, default_n = _GRID_DEFAULTS[name]
    T = horizon or default_T or choose_horizon(model)
    grid = build_grid(float(T), int(nodes or default_n), grading)
    return Fixture(name=name, model=model, grid=grid, supplier=supplier, ops=ops)


def refinement_family(name: str, count: int = 3, nodes: int | None = None, grading: float = 3.0) -> list[Fixture]:
    """Coarse-to-fine sequence: mesh doubling for thermo fixtures, node doubling otherwise.

    One-dimensional thermo families end at the fixture's default mesh and
    extend finer when there are not enough coarser levels above the minimum
    mesh of 8.  Two-dimensional families grow the mesh by 4 per level from
    the default, since doubling a plate mesh quadruples the state size.
    """
    if count < 2:
        raise ValidationError("a refinement family needs at least two members", field="refinements")
    if name in _THERMO_MESH:
        dim, mesh = _THERMO_MESH[name]
        if dim == 2:
            meshes = [mesh + 4 * k for k in range(count)]
        else:
            meshes = [mesh // 2**k for k in range(count - 1, -1, -1)]
            while meshes[0] < 8:
                meshes = meshes[1:] + [meshes[-1] * 2]
        return [build_fixture(name, nodes=nodes, grading=grading, mesh_size=m) for m in meshes]
    base_n = nodes or _GRID_DEFAULTS[name][1]
    counts = [max(base_n // 2 ** k, 16) for k in range(count - 1, -1, -1)]
    return [build_fixture(name, nodes=c, grading=grading) for c in counts]
