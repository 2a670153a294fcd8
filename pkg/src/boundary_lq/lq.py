"""Discrete infinite-horizon LQ problem: optimal pair, Riccati operator and checks.

Cost ``J(u) = int_0^T |R y|_Z^2 + |u|_U^2 dt`` is discretized by the grid's
trapezoid weights.  The optimal control solves ``Lambda u = -L^* R^* R e^{A.} y0``
and the Riccati operator is

    P x = sum_k w_k (e^{A t_k})^# R^# R Phi(t_k) x,

which satisfies ``<P y0, y0>_Y = J(u_opt)`` exactly at the discrete level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConvergenceError, RiccatiError, ValidationError
from .model import (
    DecayFit,
    StateSpaceModel,
    fit_exponential_envelope,
    fractional_power,
    gram_operator_norm,
)
from .trajectory import TimeGrid, Trajectory, _stack_propagators, discretize, lambda_solver


@dataclass
class OptimalPair:
    u: Trajectory
    y: Trajectory
    cost: np.ndarray | float


def _as_columns(model: StateSpaceModel, y0) -> tuple[np.ndarray, bool]:
    y0 = np.asarray(y0, dtype=float)
    single = y0.ndim == 1
    Y0 = y0[:, None] if single else y0
    if Y0.ndim != 2 or Y0.shape[0] != model.dim_y:
        raise ValidationError(f"initial state must have {model.dim_y} rows, got shape {y0.shape}", field="y0")
    if not np.all(np.isfinite(Y0)):
        raise ValidationError("initial state contains non-finite values", field="y0")
    return Y0, single


def _discrete_cost(model: StateSpaceModel, grid: TimeGrid, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    zq = np.einsum("ki...,ij,kj...->k...", y, model.Q, y, optimize=True)
    uu = np.einsum("ki...,ij,kj...->k...", u, model.M_U, u, optimize=True)
    return grid.integrate(zq + uu)


def optimal_pair(model: StateSpaceModel, grid: TimeGrid, y0) -> OptimalPair:
    """Discrete optimum ``(u, y)`` for one initial state or a column batch."""
    Y0, single = _as_columns(model, y0)
    its = discretize(model, grid)
    free = its.free(Y0)
    rhs = -its.adjoint(its.rstar_r(free))
    u = lambda_solver(model, grid).solve(rhs)
    y = free + its.apply(u)
    cost = _discrete_cost(model, grid, u, y)
    if single:
        u, y, cost = u[..., 0], y[..., 0], float(cost[0])
    return OptimalPair(Trajectory(grid, u, "U", model.M_U), Trajectory(grid, y, "Y", model.M_Y), cost)


def direct_minimization_oracle(model: StateSpaceModel, grid: TimeGrid, y0, max_unknowns: int = 20000) -> OptimalPair:
    """Minimize the discrete cost by dense normal equations (small problems only)."""
    Y0, single = _as_columns(model, y0)
    n1, m = grid.size + 1, model.dim_u
    if n1 * m > max_unknowns:
        raise ValidationError(f"oracle limited to {max_unknowns} unknowns, got {n1 * m}", field="nodes")
    its = discretize(model, grid)
    basis = np.eye(n1 * m).reshape(n1, m, n1 * m)
    Lmat = its.apply(basis)  # (n1, N, n1*m)
    w = grid.weights
    QL = np.einsum("ij,kjb->kib", model.Q, Lmat)
    H = np.einsum("kia,kib->ab", w[:, None, None] * Lmat, QL, optimize=True)
    H += np.kron(np.diag(w), model.M_U)
    free = its.free(Y0)
    g = np.einsum("kia,kic->ac", w[:, None, None] * Lmat, np.einsum("ij,kjc->kic", model.Q, free), optimize=True)
    u = -sla.cho_solve(sla.cho_factor(0.5 * (H + H.T)), g).reshape(n1, m, -1)
    y = free + its.apply(u)
    cost = _discrete_cost(model, grid, u, y)
    if single:
        u, y, cost = u[..., 0], y[..., 0], float(cost[0])
    return OptimalPair(Trajectory(grid, u, "U", model.M_U), Trajectory(grid, y, "Y", model.M_Y), cost)


def phi_apply(model: StateSpaceModel, grid: TimeGrid, t_index: int, x) -> np.ndarray:
    """``Phi(t_k) x`` for the optimal evolution."""
    if not 0 <= t_index <= grid.size:
        raise ValidationError("time index outside the grid", field="t_index")
    return optimal_pair(model, grid, x).y.values[t_index]


# ---------------------------------------------------------------------------
# Riccati operator


@dataclass
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    A_P: np.ndarray
    symmetry_defect: float
    min_eigenvalue: float
    residual_DA: float | None = None
    omega1_fit: DecayFit | None = None
    cost_identity_defect: float | None = None
    method: str = "variational"

    def to_json_dict(self) -> dict:
        return {
            "P": self.P,
            "K": self.K,
            "A_P": self.A_P,
            "residual_DA": self.residual_DA,
            "symmetry_defect": self.symmetry_defect,
            "min_eigenvalue": self.min_eigenvalue,
            "omega1_fit": None if self.omega1_fit is None else self.omega1_fit.to_json_dict(),
            "cost_identity_defect": self.cost_identity_defect,
            "method": self.method,
        }


def _accumulate_left(its, Z: np.ndarray) -> np.ndarray:
    """``sum_k E(t_k)^T Z_k`` by a backward sweep (``E(t_k)`` = free propagator)."""
    lam = Z[-1].copy()
    for k in range(its.n - 1, -1, -1):
        lam = Z[k] + its.E[k].T @ lam
    return lam


def finalize_riccati(model: StateSpaceModel, P: np.ndarray, method: str, sym_tol: float = 1e-6) -> RiccatiSolution:
    """Symmetrize in the ``Y`` metric, check definiteness and build ``K`` and ``A_P``."""
    P_adj = model.solve_MY(P.T @ model.M_Y)
    scale = max(gram_operator_norm(P, model.M_Y, model.M_Y), 1e-300)
    sym = gram_operator_norm(P - P_adj, model.M_Y, model.M_Y) / scale
    if sym > sym_tol:
        raise RiccatiError("Riccati operator is not self-adjoint", {"symmetry_defect": sym})
    P = 0.5 * (P + P_adj)
    MP = model.M_Y @ P
    evals = sla.eigh(0.5 * (MP + MP.T), model.M_Y, eigvals_only=True)
    min_eig = float(evals[0])
    if min_eig < -1e-9 * scale:
        raise RiccatiError("Riccati operator is not non-negative", {"min_eigenvalue": min_eig})
    K = model.B_adj @ P
    return RiccatiSolution(
        P=P, K=K, A_P=model.A - model.B @ K, symmetry_defect=sym, min_eigenvalue=min_eig, method=method
    )


def riccati_assemble(
    model: StateSpaceModel, grid: TimeGrid, probes: int = 10, seed: int = 0, block: int = 32
) -> RiccatiSolution:
    """Variational Riccati operator on ``grid``, plus the cost-identity defect on random probes."""
    its = discretize(model, grid)
    solver = lambda_solver(model, grid)
    N = model.dim_y
    P = np.empty((N, N))
    w = grid.weights[:, None, None]
    for start in range(0, N, block):
        cols = np.eye(N)[:, start : start + block]
        free = its.free(cols)
        u = solver.solve(-its.adjoint(its.rstar_r(free)))
        Phi = free + its.apply(u)
        P[:, start : start + block] = model.solve_MY(_accumulate_left(its, w * np.einsum("ij,kjc->kic", model.Q, Phi)))
    sol = finalize_riccati(model, P, "variational")
    if probes:
        sol.cost_identity_defect = cost_identity_defect(model, grid, sol.P, probes, seed)
    return sol


def cost_identity_defect(model: StateSpaceModel, grid: TimeGrid, P: np.ndarray, probes: int = 10, seed: int = 0) -> float:
    """``max |<P y0, y0> - J(u_opt)| / J(u_opt)`` over random ``y0``."""
    Y0 = np.random.default_rng(seed).standard_normal((model.dim_y, probes))
    J = np.atleast_1d(optimal_pair(model, grid, Y0).cost)
    quad = np.einsum("ic,ij,jk,kc->c", Y0, model.M_Y, P, Y0, optimize=True)
    return float(np.max(np.abs(quad - J) / np.maximum(np.abs(J), 1e-300)))


def riccati_alternative(model: StateSpaceModel, grid: TimeGrid, riccati: RiccatiSolution) -> np.ndarray:
    """``sum_k w_k (e^{A_P t_k})^# R^# R e^{A t_k}`` on the same grid."""
    E_open = _stack_propagators(model.A, grid.steps)
    E_closed = _stack_propagators(riccati.A_P, grid.steps)
    N = model.dim_y
    X, Y = np.eye(N), np.eye(N)
    acc = grid.weights[0] * model.Q
    for k in range(grid.size):
        X = E_open[k] @ X
        Y = E_closed[k] @ Y
        acc = acc + grid.weights[k + 1] * (Y.T @ model.Q @ X)
    return model.solve_MY(acc)


def newton_kleinman_oracle(
    model: StateSpaceModel, tol: float = 1e-14, max_iter: int = 80, K0: np.ndarray | None = None
) -> np.ndarray:
    """Stabilizing ARE solution by Newton-Kleinman (Lyapunov solves), returned in ``Y`` coordinates.

    The iteration runs in coordinates orthonormal for ``M_Y`` and ``M_U``, where
    the equation reads ``A'^T X + X A' - X B' B'^T X + C'^T C' = 0`` with ``X`` the
    matrix of ``P``.  Iterates are monotone; the loop stops at ``tol`` or when
    the update stagnates at rounding level.
    """
    LY = np.linalg.cholesky(model.M_Y)
    LU = np.linalg.cholesky(model.M_U)
    At = LY.T @ model.A @ np.linalg.inv(LY.T)
    Bt = LY.T @ model.B @ np.linalg.inv(LU.T)
    Qt = sla.solve_triangular(LY, sla.solve_triangular(LY, model.Q, lower=True).T, lower=True).T
    Qt = 0.5 * (Qt + Qt.T)
    Kt = np.zeros((model.dim_u, model.dim_y)) if K0 is None else LU.T @ np.asarray(K0, dtype=float) @ np.linalg.inv(LY.T)
    X_prev, history = None, []
    for it in range(max_iter):
        Acl = At - Bt @ Kt
        if np.max(np.linalg.eigvals(Acl).real) >= 0:
            raise ConvergenceError("Newton-Kleinman iterate is not stabilizing", {"iteration": it})
        X = sla.solve_continuous_lyapunov(Acl.T, -(Qt + Kt.T @ Kt))
        X = 0.5 * (X + X.T)
        Kt = Bt.T @ X
        if X_prev is not None:
            change = float(np.linalg.norm(X - X_prev) / max(np.linalg.norm(X), 1e-300))
            history.append(change)
            if change <= tol:
                break
            if change < 1e-8 and len(history) >= 2 and change >= 0.5 * history[-2]:
                break
        X_prev = X
    else:
        raise ConvergenceError("Newton-Kleinman did not converge", {"history": history})
    return np.linalg.inv(LY.T) @ X @ LY.T


def riccati_newton_kleinman(model: StateSpaceModel) -> RiccatiSolution:
    return finalize_riccati(model, newton_kleinman_oracle(model), "newton-kleinman", sym_tol=1e-9)


# ---------------------------------------------------------------------------
# residuals


def _norm_scale(model: StateSpaceModel, P: np.ndarray) -> float:
    nA = gram_operator_norm(model.A, model.M_Y, model.M_Y)
    nP = gram_operator_norm(P, model.M_Y, model.M_Y)
    nK = gram_operator_norm(model.B_adj @ P, model.M_Y, model.M_U)
    nR = gram_operator_norm(model.R, model.M_Y, model.M_Z)
    return max(nA * nP + nK**2 + nR**2, 1e-300)  # R = 0 gives P = 0 and a zero scale


def are_residual(model: StateSpaceModel, P: np.ndarray, probe_count: int = 20, seed: int = 0) -> float:
    """Normalized weak ARE residual on random probe pairs ``(x, z)``.

    ``|<Px, Az> + <Ax, Pz> - <B^#Px, B^#Pz> + <Rx, Rz>| / (|x||z| (|A||P| + |K|^2 + |R|^2))``
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((model.dim_y, probe_count))
    Z = rng.standard_normal((model.dim_y, probe_count))
    MY = model.M_Y
    PX, PZ = P @ X, P @ Z
    t1 = np.einsum("ic,ij,jc->c", PX, MY, model.A @ Z, optimize=True)
    t2 = np.einsum("ic,ij,jc->c", model.A @ X, MY, PZ, optimize=True)
    t3 = np.einsum("ic,ij,jc->c", model.B_adj @ PX, model.M_U, model.B_adj @ PZ, optimize=True)
    t4 = np.einsum("ic,ij,jc->c", X, model.Q, Z, optimize=True)
    res = np.abs(t1 + t2 - t3 + t4) / (model.norm_Y(X) * model.norm_Y(Z) * _norm_scale(model, P))
    return float(np.max(res))


def riccati_identity_defect(model: StateSpaceModel, P: np.ndarray) -> float:
    """Relative size of ``A^# P + R^# R + P A_P`` as an operator on ``Y``."""
    A_P = model.A - model.B @ (model.B_adj @ P)
    D = model.A_adj @ P + model.RstarR + P @ A_P
    return gram_operator_norm(D, model.M_Y, model.M_Y) / _norm_scale(model, P)


def relative_frobenius(X: np.ndarray, ref: np.ndarray) -> float:
    den = np.linalg.norm(ref)
    if den == 0:
        return float(np.linalg.norm(X))
    return float(np.linalg.norm(X - ref) / den)


# ---------------------------------------------------------------------------
# feedback, derivative and gain checks


@dataclass
class FeedbackReport:
    feedback_defect: float
    closed_loop_defect: float

    def to_json_dict(self) -> dict:
        return {"feedback_defect": self.feedback_defect, "closed_loop_defect": self.closed_loop_defect}


def feedback_check(model: StateSpaceModel, grid: TimeGrid, riccati: RiccatiSolution, y0) -> FeedbackReport:
    """Compare ``u_opt(t_k)`` with ``-K y_opt(t_k)`` and ``y_opt`` with ``e^{A_P t} y0``."""
    Y0, _ = _as_columns(model, y0)
    pair = optimal_pair(model, grid, Y0)
    u, y = pair.u.values, pair.y.values
    Ky = np.einsum("ij,kjc->kic", riccati.K, y)
    un = np.sqrt(np.einsum("kic,ij,kjc->kc", u, model.M_U, u, optimize=True))
    dn = np.sqrt(np.einsum("kic,ij,kjc->kc", u + Ky, model.M_U, u + Ky, optimize=True))
    fb = float(np.max(dn.max(axis=0) / np.maximum(un.max(axis=0), 1e-300)))
    E = _stack_propagators(riccati.A_P, grid.steps)
    cl = np.empty_like(y)
    cl[0] = Y0
    for k in range(grid.size):
        cl[k + 1] = E[k] @ cl[k]
    yn = model.norm_Y(np.moveaxis(y, 0, 1))
    cn = model.norm_Y(np.moveaxis(cl - y, 0, 1))
    cd = float(np.max(cn.max(axis=0) / np.maximum(yn.max(axis=0), 1e-300)))
    return FeedbackReport(feedback_defect=fb, closed_loop_defect=cd)


@dataclass
class DerivativeReport:
    max_defect: float
    times: list[float]
    omega1_fit: DecayFit

    def to_json_dict(self) -> dict:
        return {"max_defect": self.max_defect, "times": self.times, "omega1_fit": self.omega1_fit.to_json_dict()}


def closed_loop_decay_fit(model: StateSpaceModel, A_P: np.ndarray, horizon: float, samples: int = 48) -> DecayFit:
    times = np.linspace(horizon / samples, horizon, samples)
    step = sla.expm(A_P * (times[1] - times[0]))
    E = sla.expm(A_P * times[0])
    norms = []
    for _ in times:
        norms.append(gram_operator_norm(E, model.M_Y, model.M_Y))
        E = step @ E
    return fit_exponential_envelope(times, np.maximum(norms, 1e-300))


def derivative_check(
    model: StateSpaceModel,
    grid: TimeGrid,
    riccati: RiccatiSolution,
    x=None,
    fd_step: float | None = None,
    seed: int = 0,
) -> DerivativeReport:
    """Central differences of ``t -> e^{A_P t} x`` against ``e^{A_P t}(A x - B K x)``.

    The default ``x`` is the smooth state ``(-A)^{-1} z`` for a random ``z``.
    """
    if x is None:
        z = np.random.default_rng(seed).standard_normal(model.dim_y)
        x = -np.linalg.solve(model.A, z)
    x = np.asarray(x, dtype=float)
    A_P = riccati.A_P
    rate = max(np.abs(np.linalg.eigvals(A_P)).max(), 1e-12)
    h = fd_step if fd_step is not None else min(1e-5, 1e-2 / rate)
    T = grid.horizon
    times = [T * j / 11 * 0.5 for j in range(1, 11)]
    rhs_vec = model.A @ x - model.B @ (riccati.K @ x)
    worst = 0.0
    for t in times:
        Ep, Em, E0 = sla.expm(A_P * (t + h)), sla.expm(A_P * (t - h)), sla.expm(A_P * t)
        fd = (Ep @ x - Em @ x) / (2 * h)
        exact = E0 @ rhs_vec
        scale = max(float(model.norm_Y(exact)), 1e-300)
        worst = max(worst, float(model.norm_Y(fd - exact)) / scale)
    fit = closed_loop_decay_fit(model, A_P, grid.horizon)
    return DerivativeReport(max_defect=worst, times=times, omega1_fit=fit)


@dataclass
class GainSmoothingReport:
    epsilon: float
    smoothed_norms: list[float]
    raw_norms: list[float]
    bounded: bool
    factor: float

    def to_json_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "smoothed_norms": self.smoothed_norms,
            "raw_norms": self.raw_norms,
            "bounded": self.bounded,
            "factor": self.factor,
        }


def gain_on_smooth_domain(
    models: Sequence[StateSpaceModel],
    riccatis: Sequence[RiccatiSolution],
    epsilon: float = 0.1,
    factor: float = 2.0,
) -> GainSmoothingReport:
    """``||K (-A)^{-epsilon}||`` and raw ``||K||`` (``Y -> U``) along a refinement family."""
    if len(models) != len(riccatis) or not models:
        raise ValidationError("need one Riccati solution per model", field="riccatis")
    smooth, raw = [], []
    for mdl, ric in zip(models, riccatis):
        smooth.append(gram_operator_norm(ric.K @ fractional_power(mdl, -epsilon), mdl.M_Y, mdl.M_U))
        raw.append(gram_operator_norm(ric.K, mdl.M_Y, mdl.M_U))
    lo, hi = min(smooth), max(smooth)
    bounded = bool(hi == 0 or (lo > 0 and hi / lo <= factor))
    return GainSmoothingReport(epsilon=epsilon, smoothed_norms=smooth, raw_norms=raw, bounded=bounded, factor=factor)


def scalar_riccati_exact(a: float, b: float, r: float) -> float:
    """Closed-form stabilizing root of ``2 a p - b^2 p^2 + r^2 = 0``."""
    return (a + math.sqrt(a * a + b * b * r * r)) / (b * b)
