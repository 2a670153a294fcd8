"""Finite-difference thermoelastic beam/plate with Dirichlet thermal boundary control.

Unknowns live on interior nodes of a uniform grid on ``(0, l)`` or a rectangle.
The state is ``(w, w_t, theta)``; the control is the boundary temperature.

Discrete operators (all symmetric positive definite on interior nodes):

* ``A_D``   Dirichlet ``-Laplacian`` (3- or 5-point stencil)
* ``calA``  clamped bi-Laplacian ``A_D^2 + (A_D D) Gamma_lap``, where
  ``Gamma_lap`` is the boundary Laplacian obtained from ghost-point reflection
* ``calM``  ``I + rho A_D``

``D`` is the discrete harmonic (Dirichlet) lift of boundary data and
``trace_op = D^# A_D`` its Gram adjoint composed with ``A_D``; on a node next
to the boundary it returns the one-sided normal difference.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import ValidationError
from .hypotheses import DecompositionSupplier
from .io_utils import write_text_atomic
from .lq import RiccatiSolution
from .model import DecayFit, StateSpaceModel, fit_exponential_envelope
from .trajectory import TimeGrid, Trajectory


@dataclass(frozen=True)
class ThermoPlateParams:
    rho: float = 1.0
    spatial_dim: int = 1
    mesh_size: int = 32
    length: float = 1.0

    def __post_init__(self):
        if self.spatial_dim not in (1, 2):
            raise ValidationError("spatial_dim must be 1 or 2", field="spatial_dim")
        if not (isinstance(self.mesh_size, (int, np.integer)) and self.mesh_size >= 8):
            raise ValidationError("mesh_size must be an integer >= 8", field="mesh_size")
        if not self.rho > 0:
            raise ValidationError("rho must be positive", field="rho")
        if not self.length > 0:
            raise ValidationError("length must be positive", field="length")


@dataclass(frozen=True, eq=False)
class ThermoOperators:
    params: ThermoPlateParams
    A_D: np.ndarray
    calA: np.ndarray
    calM: np.ndarray
    ADD: np.ndarray  # A_D D: boundary data -> interior load
    D: np.ndarray
    gamma_lap: np.ndarray  # interior w -> boundary Laplacian of w
    trace_op: np.ndarray
    M_H: np.ndarray
    M_U: np.ndarray
    cell: float
    spacing: float

    @property
    def n(self) -> int:
        return self.A_D.shape[0]

    @property
    def m(self) -> int:
        return self.ADD.shape[1]

    def split(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        return y[:n], y[n : 2 * n], y[2 * n :]


def _laplacian_1d(n: int, h: float) -> np.ndarray:
    return (2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / h**2


def assemble_operators(params: ThermoPlateParams) -> ThermoOperators:
    N, l = params.mesh_size, params.length
    h = l / (N + 1)
    if params.spatial_dim == 1:
        A_D = _laplacian_1d(N, h)
        # boundary nodes x=0 and x=l, adjacent to interior nodes 0 and N-1
        adjacent = [0, N - 1]
        bweights = np.ones(2)
        cell = h
    else:
        T = _laplacian_1d(N, h)
        I = np.eye(N)
        A_D = np.kron(I, T) + np.kron(T, I)
        idx = np.arange(N * N).reshape(N, N)  # idx[j, i]: row j (y), column i (x)
        # non-corner boundary nodes in counter-clockwise order
        adjacent = list(idx[0, :]) + list(idx[:, N - 1]) + list(idx[N - 1, ::-1]) + list(idx[::-1, 0])
        bweights = np.full(len(adjacent), h)
        cell = h * h
    n, m = A_D.shape[0], len(adjacent)
    ADD = np.zeros((n, m))
    gamma_lap = np.zeros((m, n))
    for b, i in enumerate(adjacent):
        ADD[i, b] = 1.0 / h**2
        gamma_lap[b, i] = 2.0 / h**2
    calA = A_D @ A_D + ADD @ gamma_lap
    calA = 0.5 * (calA + calA.T)
    calM = np.eye(n) + params.rho * A_D
    D = np.linalg.solve(A_D, ADD)
    M_H = cell * np.eye(n)
    M_U = np.diag(bweights)
    trace_op = np.linalg.solve(M_U, ADD.T @ M_H)
    return ThermoOperators(
        params=params,
        A_D=A_D,
        calA=calA,
        calM=calM,
        ADD=ADD,
        D=D,
        gamma_lap=gamma_lap,
        trace_op=trace_op,
        M_H=M_H,
        M_U=M_U,
        cell=cell,
        spacing=h,
    )


def assemble_thermo_model(params: ThermoPlateParams, name: str | None = None) -> tuple[StateSpaceModel, ThermoOperators]:
    """Build ``(A, B, R)`` with energy Gram ``cell * diag(calA, calM, I)``.

    ``B`` is formed as ``A (A^{-1} B)`` with ``A^{-1} B u = -(0, 0, D u)``.
    """
    ops = assemble_operators(params)
    n, m = ops.n, ops.m
    Z = np.zeros((n, n))
    Minv = np.linalg.inv(ops.calM)
    A = np.block(
        [
            [Z, np.eye(n), Z],
            [-Minv @ ops.calA, Z, Minv @ ops.A_D],
            [Z, -ops.A_D, -ops.A_D],
        ]
    )
    A_inv_B = np.vstack([np.zeros((2 * n, m)), -ops.D])
    B = A @ A_inv_B
    M_Y = ops.cell * np.block(
        [
            [ops.calA, Z, Z],
            [Z, ops.calM, Z],
            [Z, Z, np.eye(n)],
        ]
    )
    M_Y = 0.5 * (M_Y + M_Y.T)
    model = StateSpaceModel(
        A=A,
        B=B,
        R=np.eye(3 * n),
        M_Y=M_Y,
        M_U=ops.M_U,
        M_Z=M_Y,
        name=name or f"thermo{params.spatial_dim}d-{params.mesh_size}",
    )
    return model, ops


def energy(model: StateSpaceModel, y: np.ndarray) -> np.ndarray:
    """``0.5 ||y||_Y^2`` for one state or a stack of states (last axis = state)."""
    y = np.asarray(y)
    return 0.5 * np.einsum("...i,ij,...j->...", y, model.M_Y, y, optimize=True)


def _conv_factor(mu: np.ndarray, lam: np.ndarray, t: float) -> np.ndarray:
    """``int_0^t e^{-mu (t-s)} e^{lam s} ds`` for every pair ``(mu_i, lam_j)``."""
    z = mu[:, None] + lam[None, :]
    zt = z * t
    small = zt == 0
    zs = np.where(small, 1.0, z)
    with np.errstate(over="ignore", invalid="ignore"):
        left = np.exp(-mu[:, None] * t) * np.expm1(zt) / zs
        right = np.exp(lam[None, :] * t) * (-np.expm1(-zt)) / zs
    out = np.where(z.real <= 0, left, right)
    return np.where(small, t * np.exp(-mu[:, None] * t), out)


class ThermoDecomposition:
    """Splits ``B^# e^{A^# t} y0`` into singular parts ``F1..F4`` and a regular part ``G``.

    The adjoint flow equals ``S e^{At} S`` with ``S = diag(I, -I, I)``; writing
    ``(w, v, theta)(t) = e^{At} S y0`` one has ``B^# e^{A^# t} y0 = trace(theta + v)``.
    Integrating the heat equation by parts gives

    * ``F1 = trace e^{-A_D t} theta0``
    * ``F2 = trace e^{-A_D t} v(0)``
    * ``F3 = trace int e^{-A_D(t-s)} calM^{-1} A_D theta(s) ds``
    * ``F4 = -trace int e^{-A_D(t-s)} calM^{-1} A_D A_D w(s) ds``
    * ``G  = -trace int e^{-A_D(t-s)} calM^{-1} A_D D Gamma_lap w(s) ds``

    Each convolution is evaluated in closed form from the spectral
    decompositions of ``A_D`` (orthogonal) and ``A``.
    """

    labels = ("F1", "F2", "F3", "F4", "G")

    def __init__(self, model: StateSpaceModel, ops: ThermoOperators):
        self.model, self.ops = model, ops
        n = ops.n
        mu, W = np.linalg.eigh(ops.A_D)
        lam, V = np.linalg.eig(model.A)
        Vinv = np.linalg.inv(V)
        S = np.ones(3 * n)
        S[n : 2 * n] = -1.0
        self._mu, self._lam = mu, lam
        self._TW = ops.trace_op @ W
        MinvAD = np.linalg.solve(ops.calM, ops.A_D)
        Pw = np.zeros((n, 3 * n))
        Pw[:, :n] = np.eye(n)
        Pv = np.zeros((n, 3 * n))
        Pv[:, n : 2 * n] = np.eye(n)
        Pth = np.zeros((n, 3 * n))
        Pth[:, 2 * n :] = np.eye(n)
        drivers = {
            "F3": MinvAD @ Pth,
            "F4": -MinvAD @ ops.A_D @ Pw,
            "G": -MinvAD @ ops.D @ ops.gamma_lap @ Pw,
        }
        # hat(C) = W^T C V; the trailing factor V^{-1} S is applied per evaluation
        self._Chat = {k: W.T @ C @ V for k, C in drivers.items()}
        self._right = Vinv * S[None, :]
        self._WTtheta = W.T @ Pth
        self._WTv = -W.T @ Pv  # the reflected flow starts from minus the velocity of y0

    def component_matrices(self, t: float) -> dict[str, np.ndarray]:
        """Matrices (m x dim_y) of every component at time ``t > 0``."""
        decay = np.exp(-self._mu * t)
        out = {
            "F1": (self._TW * decay) @ self._WTtheta,
            "F2": (self._TW * decay) @ self._WTv,
        }
        phi = _conv_factor(self._mu, self._lam, t)
        for key, Chat in self._Chat.items():
            out[key] = ((self._TW @ (Chat * phi)) @ self._right).real
        return out

    def evaluate(self, times, Y0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        F, G = [], []
        for t in times:
            comp = self.component_matrices(t)
            F.append((comp["F1"] + comp["F2"] + comp["F3"] + comp["F4"]) @ Y0)
            G.append(comp["G"] @ Y0)
        return np.array(F), np.array(G)


def thermo_decomposition_supplier(ops: ThermoOperators, model: StateSpaceModel) -> DecompositionSupplier:
    """Supplier returning ``F = F1 + F2 + F3 + F4`` and ``G`` from :class:`ThermoDecomposition`."""
    dec = ThermoDecomposition(model, ops)

    def matrices(t: float):
        c = dec.component_matrices(t)
        return c["F1"] + c["F2"] + c["F3"] + c["F4"], c["G"]

    return DecompositionSupplier(model, matrices, "thermoelastic F1+F2+F3+F4, G")


# ---------------------------------------------------------------------------
# closed-loop simulation


@dataclass
class ClosedLoopRun:
    open_loop: Trajectory
    closed_loop: Trajectory
    E_open: np.ndarray
    E_closed: np.ndarray
    omega_open: DecayFit
    omega1: DecayFit
    cost: float

    def energy_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "E_open", "E_closed"])
        for t, a, b in zip(self.open_loop.grid.nodes, self.E_open, self.E_closed):
            writer.writerow([f"{t:.17g}", f"{a:.17g}", f"{b:.17g}"])
        return buf.getvalue()

    def write_energy_csv(self, path: str | Path) -> None:
        write_text_atomic(path, self.energy_csv())

    def summary(self) -> dict:
        return {
            "omega_open": self.omega_open.to_json_dict(),
            "omega1": self.omega1.to_json_dict(),
            "cost": self.cost,
            "initial_energy": float(self.E_closed[0]),
            "final_energy_closed": float(self.E_closed[-1]),
            "final_energy_open": float(self.E_open[-1]),
        }


def _flow(A: np.ndarray, grid: TimeGrid, y0: np.ndarray, weight: np.ndarray | None = None):
    """Node values of ``e^{At} y0`` and, if ``weight`` is given, ``int_0^T y^T weight y dt`` exactly.

    For stable ``A`` the integral is ``y0^T X y0 - y(T)^T X y(T)`` with
    ``A^T X + X A = -weight``, so it carries no quadrature error.
    """
    values = np.empty((grid.size + 1, A.shape[0]))
    values[0] = y0
    cache: dict[float, np.ndarray] = {}
    for k, h in enumerate(grid.steps):
        key = float(h)
        if key not in cache:
            cache[key] = sla.expm(A * h)
        values[k + 1] = cache[key] @ values[k]
    total = 0.0
    if weight is not None:
        X = sla.solve_continuous_lyapunov(A.T, -weight)
        total = float(values[0] @ X @ values[0] - values[-1] @ X @ values[-1])
    return values, total


def _trajectory_rate(grid: TimeGrid, norms: np.ndarray) -> DecayFit:
    keep = (grid.nodes > 0) & (norms > 0) & np.isfinite(norms)
    if np.count_nonzero(keep) < 2:
        return DecayFit(amplitude=0.0, rate=math.inf)
    return fit_exponential_envelope(grid.nodes[keep], norms[keep], semigroup=False)


def simulate_closed_loop(
    ops: ThermoOperators | None,
    model: StateSpaceModel,
    riccati: RiccatiSolution | None,
    y0,
    grid: TimeGrid,
) -> ClosedLoopRun:
    """Open- and closed-loop flows from ``y0`` with energies ``0.5 ||y||_Y^2`` and decay fits.

    ``riccati = None`` means ``K = 0``.  ``cost`` is the closed-loop value of
    the quadratic cost on ``[0, T]``, integrated exactly step by step.
    ``ops`` is accepted for symmetry with the other thermoplate entry points
    and is not needed by the computation.
    """
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.shape != (model.dim_y,):
        raise ValidationError(f"y0 must have length {model.dim_y}", field="y0")
    K = np.zeros((model.dim_u, model.dim_y)) if riccati is None else riccati.K
    A_P = model.A - model.B @ K
    weight = model.Q + K.T @ model.M_U @ K
    weight = 0.5 * (weight + weight.T)
    open_vals, _ = _flow(model.A, grid, y0)
    closed_vals, cost = _flow(A_P, grid, y0, weight)
    E_open = energy(model, open_vals)
    E_closed = energy(model, closed_vals)
    return ClosedLoopRun(
        open_loop=Trajectory(grid, open_vals, "Y", model.M_Y),
        closed_loop=Trajectory(grid, closed_vals, "Y", model.M_Y),
        E_open=E_open,
        E_closed=E_closed,
        omega_open=_trajectory_rate(grid, np.sqrt(2 * E_open)),
        omega1=_trajectory_rate(grid, np.sqrt(2 * E_closed)),
        cost=cost,
    )
