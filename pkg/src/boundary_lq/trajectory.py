"""Time grids, trajectories and the discrete input-to-state map.

The half-line is truncated to ``[0, T]`` and sampled on graded nodes
``t_k = T (k/n)^g`` carrying composite trapezoid weights.  The input-to-state
map is a one-step recursion

    y_0 = 0,    y_k = E_k y_{k-1} + Ga_k u_{k-1} + Gb_k u_k,    E_k = exp(A h_k).

Two step rules are available.  ``"trapezoid"`` uses ``Ga_k = (h_k/2) E_k B`` and
``Gb_k = (h_k/2) B``, i.e. the trapezoid rule on each ``[0, t_k]``.  ``"foh"``
(the default) integrates the flow exactly against the piecewise-linear
interpolant of ``u``; it has the same order on smooth problems and stays
accurate when ``h_k`` is much longer than the fastest time scale of ``A``.
Adjoints are exact transposes in the weighted inner products
``<f, g> = sum_k w_k f_k^T M g_k``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError, ConvergenceError, ValidationError
from .io_utils import write_text_atomic
from .model import StateSpaceModel

MIN_NODES = 16
SCHEMES = ("foh", "trapezoid")


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Nodes ``0 = t_0 < ... < t_n = T`` with trapezoid weights."""

    nodes: np.ndarray
    weights: np.ndarray
    grading: float = 1.0
    tail_rate: float = 0.0
    scheme: str = "foh"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}", field="scheme")

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def size(self) -> int:
        """Number of subintervals ``n`` (the grid has ``n + 1`` nodes)."""
        return len(self.nodes) - 1

    @cached_property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def integrate(self, values, skip_origin: bool = False) -> np.ndarray:
        """Trapezoid integral of node values along axis 0.

        ``skip_origin`` drops the ``t = 0`` sample, which is the usual
        treatment of an integrable singularity at the origin.
        """
        v = np.asarray(values, dtype=float)
        w = self.weights.copy()
        if skip_origin:
            w[0] = 0.0
            v = np.where(np.isfinite(v), v, 0.0)
        return np.tensordot(w, v, axes=(0, 0))

    def tail_bound(self, amplitude: float = 1.0, power: float = 2.0) -> float:
        """Bound on ``int_T^inf (M e^{-omega t})^p dt`` using ``tail_rate``."""
        if self.tail_rate <= 0:
            return math.inf
        return amplitude**power * math.exp(-power * self.tail_rate * self.horizon) / (power * self.tail_rate)


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    h = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def build_grid(
    horizon: float, node_count: int, grading: float = 3.0, tail_rate: float = 0.0, scheme: str = "foh"
) -> TimeGrid:
    """Graded grid ``t_k = T (k/n)^grading`` with ``n = node_count`` subintervals."""
    if not (isinstance(node_count, (int, np.integer)) and node_count >= MIN_NODES):
        raise ValidationError(f"node_count must be an integer >= {MIN_NODES}", field="nodes")
    if not (np.isfinite(horizon) and horizon > 0):
        raise ValidationError("horizon must be positive and finite", field="horizon")
    if not (np.isfinite(grading) and grading >= 1.0):
        raise ValidationError("grading exponent must be >= 1", field="grading")
    s = np.arange(node_count + 1) / node_count
    nodes = horizon * s**grading
    nodes[-1] = horizon
    if np.any(np.diff(nodes) <= 0):
        raise ValidationError("grid nodes are not strictly increasing (grading too strong)", field="grading")
    return TimeGrid(
        nodes=nodes, weights=trapezoid_weights(nodes), grading=float(grading), tail_rate=float(tail_rate), scheme=scheme
    )


def grid_from_nodes(nodes, tail_rate: float = 0.0, scheme: str = "foh") -> TimeGrid:
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2 or nodes[0] != 0 or np.any(np.diff(nodes) <= 0):
        raise ValidationError("nodes must start at 0 and increase strictly", field="nodes")
    return TimeGrid(nodes=nodes, weights=trapezoid_weights(nodes), tail_rate=tail_rate, scheme=scheme)


# ---------------------------------------------------------------------------
# trajectories and weighted norms


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Node values ``values[k]`` of a U-, Y- or Z-valued function on ``grid``.

    ``values`` has shape ``(n+1, d)`` or ``(n+1, d, batch)``.
    """

    grid: TimeGrid
    values: np.ndarray
    space: str = "Y"
    gram: np.ndarray | None = None

    def __post_init__(self):
        if self.values.shape[0] != len(self.grid.nodes):
            raise ValidationError("trajectory length does not match the grid", field="values")
        if self.space not in ("U", "Y", "Z"):
            raise ValidationError(f"unknown space tag {self.space!r}", field="space")

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WeightedNorm:
    """``(sum_k w_k (e^{delta t_k} |f_k|)^p)^{1/p}``, or the weighted sup for ``p = inf``."""

    p: float = 2.0
    delta: float = 0.0

    def __post_init__(self):
        if not (self.p >= 1):
            raise ValidationError("norm exponent must be >= 1", field="p")


def _pointwise_norms(values: np.ndarray, gram: np.ndarray | None) -> np.ndarray:
    if gram is None:
        sq = np.einsum("ki...,ki...->k...", values, values)
    else:
        sq = np.einsum("ki...,ij,kj...->k...", values, gram, values, optimize=True)
    return np.sqrt(np.maximum(sq, 0.0))


def lp_norm(values: np.ndarray, grid: TimeGrid, norm: WeightedNorm, gram: np.ndarray | None = None) -> np.ndarray:
    pw = _pointwise_norms(values, gram)
    scale = np.exp(norm.delta * grid.nodes).reshape((-1,) + (1,) * (pw.ndim - 1))
    pw = pw * scale
    if math.isinf(norm.p):
        return pw.max(axis=0)
    w = grid.weights.reshape(scale.shape)
    return np.sum(w * pw**norm.p, axis=0) ** (1.0 / norm.p)


def weighted_norm(traj: Trajectory, norm: WeightedNorm = WeightedNorm()) -> np.ndarray | float:
    out = lp_norm(traj.values, traj.grid, norm, traj.gram)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# the discrete input-to-state map


def _stack_propagators(A: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """``exp(A h_k)`` for each step; a unitary Schur form is reused when ``A`` is normal."""
    n = A.shape[0]
    scale = max(np.linalg.norm(A), 1e-300)
    if np.linalg.norm(A @ A.T - A.T @ A) <= 1e-12 * scale**2:
        T, Z = sla.schur(A, output="complex")
        lam = np.diag(T)
        E = np.einsum("ij,kj,lj->kil", Z, np.exp(np.outer(steps, lam)), Z.conj(), optimize=True)
        return np.ascontiguousarray(E.real)
    out = np.empty((len(steps), n, n))
    cache: dict[float, np.ndarray] = {}
    for k, h in enumerate(steps):
        key = float(h)
        if key not in cache:
            cache[key] = sla.expm(A * h)
        out[k] = cache[key]
    return out


def _foh_coefficients(A: np.ndarray, B: np.ndarray, steps: np.ndarray):
    """Exact step maps for a control that is linear between nodes.

    ``expm([[A, B, 0], [0, 0, I], [0, 0, 0]] h)`` carries ``int_0^h e^{As} ds B``
    and ``int_0^h e^{As} (h - s) ds B`` in its first block row.
    """
    N, m = B.shape
    C = np.zeros((N + 2 * m, N + 2 * m))
    C[:N, :N] = A
    C[:N, N : N + m] = B
    C[N : N + m, N + m :] = np.eye(m)
    E = np.empty((len(steps), N, N))
    Ga = np.empty((len(steps), N, m))
    Gb = np.empty((len(steps), N, m))
    cache: dict[float, tuple] = {}
    for k, h in enumerate(steps):
        key = float(h)
        if key not in cache:
            X = sla.expm(C * h)
            first, second = X[:N, N : N + m], X[:N, N + m :] / h
            cache[key] = (X[:N, :N], first - second, second)
        E[k], Ga[k], Gb[k] = cache[key]
    return E, Ga, Gb


class InputToState:
    """Discrete ``L`` and its adjoints for one model on one grid.

    ``generator`` overrides the model's ``A`` (used for shifted or closed-loop flows).
    """

    def __init__(self, model: StateSpaceModel, grid: TimeGrid, generator: np.ndarray | None = None):
        self.model, self.grid = model, grid
        scheme = grid.scheme
        A = model.A if generator is None else np.asarray(generator, dtype=float)
        h = grid.steps
        B = model.B
        if scheme == "trapezoid":
            self.E = _stack_propagators(A, h)
            self.Ga = 0.5 * h[:, None, None] * (self.E @ B)  # coefficient of u_{k-1} in y_k
            self.Gb = 0.5 * h[:, None, None] * B[None, :, :]  # coefficient of u_k in y_k
        else:
            self.E, self.Ga, self.Gb = _foh_coefficients(A, B, h)
        self.w = grid.weights

    @property
    def n(self) -> int:
        return self.grid.size

    # forward maps ---------------------------------------------------------
    def free(self, x0: np.ndarray) -> np.ndarray:
        """``e^{A t_k} x0`` at every node by stepping."""
        x0 = np.asarray(x0, dtype=float)
        out = np.empty((self.n + 1,) + x0.shape)
        out[0] = x0
        for k in range(self.n):
            out[k + 1] = self.E[k] @ out[k]
        return out

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.empty((self.n + 1, self.model.dim_y) + u.shape[2:])
        out[0] = 0.0
        for k in range(1, self.n + 1):
            out[k] = self.E[k - 1] @ out[k - 1] + self.Ga[k - 1] @ u[k - 1] + self.Gb[k - 1] @ u[k]
        return out

    def apply_T(self, v: np.ndarray) -> np.ndarray:
        """Euclidean transpose of ``apply`` (no weights, no Gram matrices)."""
        v = np.asarray(v, dtype=float)
        n = self.n
        out = np.empty((n + 1, self.model.dim_u) + v.shape[2:])
        lam = v[n].copy()
        out[n] = self.Gb[n - 1].T @ lam
        for j in range(n - 1, -1, -1):
            ga = self.Ga[j].T @ lam
            lam = v[j] + self.E[j].T @ lam
            out[j] = ga if j == 0 else ga + self.Gb[j - 1].T @ lam
        return out

    # weighted adjoints ----------------------------------------------------------
    def _wshape(self, arr: np.ndarray) -> np.ndarray:
        return self.w.reshape((-1,) + (1,) * (arr.ndim - 1))

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        """``L^* v = W_U^{-1} L^T W_Y v``."""
        Wv = self._wshape(v) * _matvec_first_axis(self.model.M_Y, v)
        z = self.apply_T(Wv)
        return _matvec_first_axis(self._MU_inv, z) / self._wshape(z)

    @cached_property
    def _MU_inv(self) -> np.ndarray:
        return np.linalg.inv(self.model.M_U)

    def rstar_r(self, y: np.ndarray) -> np.ndarray:
        return np.einsum("ij,kj...->ki...", self.model.RstarR, y)

    def gramian_apply(self, g: np.ndarray) -> np.ndarray:
        """``L^* R^* R L g``."""
        return self.adjoint(self.rstar_r(self.apply(g)))

    def lambda_apply(self, g: np.ndarray) -> np.ndarray:
        return g + self.gramian_apply(g)

    @cached_property
    def lambda_solver(self) -> "LambdaSolver":
        return LambdaSolver(self)


def _matvec_first_axis(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,kj...->ki...", M, x)


class LambdaSolver:
    """Exact direct solver for ``(I + L^* R^* R L) g = h``.

    ``Lambda g = h`` is the optimality condition of the strictly convex
    quadratic ``1/2 <Lambda g, g>_W - <h, g>_W``.  Its stage structure (state
    recursion of ``L``) admits a backward Riccati sweep over the nodes, so the
    factorization costs ``O(n N^3)`` and each solve ``O(n N^2)``.
    """

    def __init__(self, its: InputToState):
        self.its = its
        mdl = its.model
        n, w = its.n, its.w
        Q, M_U = mdl.Q, mdl.M_U
        N = mdl.dim_y
        Gb = np.concatenate([np.zeros((1, N, mdl.dim_u)), its.Gb], axis=0)  # Gb[k] multiplies u_k in y_k
        # xi_{k+1} = E_{k+1} xi_k + Gnext_k g_k
        Gnext = its.E @ Gb[:-1] + its.Ga
        self._Gb, self._Gnext = Gb, Gnext
        self._chol = [None] * (n + 1)
        self._K = np.empty((n + 1, mdl.dim_u, N))
        self._Hgx = np.empty((n + 1, mdl.dim_u, N))
        S = np.zeros((N, N))
        for k in range(n, -1, -1):
            QGb = Q @ Gb[k]
            Hgg = w[k] * (Gb[k].T @ QGb + M_U)
            Hgx = w[k] * QGb.T
            Hxx = w[k] * Q
            if k < n:
                F, G = its.E[k], Gnext[k]
                SF, SG = S @ F, S @ G
                Hgg = Hgg + G.T @ SG
                Hgx = Hgx + G.T @ SF
                Hxx = Hxx + F.T @ SF
            Hgg = 0.5 * (Hgg + Hgg.T)
            try:
                chol = sla.cho_factor(Hgg, lower=True)
            except np.linalg.LinAlgError:
                raise ConditioningError("stage matrix lost positive definiteness", {"node": k}) from None
            K = sla.cho_solve(chol, Hgx)
            S = Hxx - Hgx.T @ K
            S = 0.5 * (S + S.T)
            self._chol[k], self._K[k], self._Hgx[k] = chol, K, Hgx

    def solve(self, h: np.ndarray) -> np.ndarray:
        its = self.its
        mdl, n, w = its.model, its.n, its.w
        h = np.asarray(h, dtype=float)
        tail = h.shape[2:]
        ff = np.empty(h.shape)
        s = np.zeros((mdl.dim_y,) + tail)
        for k in range(n, -1, -1):
            lin_g = -w[k] * _matvec_first_axis(mdl.M_U, h[k][None])[0]
            if k < n:
                lin_g = lin_g + self._Gnext[k].T @ s
                lin_x = its.E[k].T @ s
            else:
                lin_x = 0.0
            ff[k] = sla.cho_solve(self._chol[k], lin_g)
            s = lin_x - self._Hgx[k].T @ ff[k]
        g = np.empty(h.shape)
        xi = np.zeros((mdl.dim_y,) + tail)
        for k in range(n + 1):
            g[k] = -(self._K[k] @ xi + ff[k])
            if k < n:
                xi = its.E[k] @ xi + self._Gnext[k] @ g[k]
        return g

    @cached_property
    def max_eigenvalue(self) -> float:
        """Largest eigenvalue of ``Lambda`` (self-adjoint in ``W_U``) by power iteration."""
        its = self.its
        rng = np.random.default_rng(12345)
        g = rng.standard_normal((its.n + 1, its.model.dim_u))
        lam = 1.0
        for _ in range(40):
            nrm = _wnorm(its, g)
            g = g / nrm
            Lg = its.lambda_apply(g)
            new = float(np.sum(its.w[:, None] * np.einsum("ki,ij,kj->ki", g, its.model.M_U, Lg, optimize=True)))
            g = Lg
            if abs(new - lam) <= 1e-3 * new:  # a magnitude is all the conditioning guard needs
                lam = new
                break
            lam = new
        return lam

    @property
    def condition_estimate(self) -> float:
        return self.max_eigenvalue  # the smallest eigenvalue is at least one


def _wnorm(its: InputToState, g: np.ndarray) -> float:
    return float(np.sqrt(np.sum(its.w[:, None] * np.einsum("ki,ij,kj->ki", g, its.model.M_U, g, optimize=True))))


# ---------------------------------------------------------------------------
# module-level API with a small cache of discretizations

_CACHE: "OrderedDict[tuple[int, int, int], tuple]" = OrderedDict()
_CACHE_SIZE = 6


def discretize(model: StateSpaceModel, grid: TimeGrid, generator: np.ndarray | None = None) -> InputToState:
    key = (id(model), id(grid), id(generator))
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is model and hit[1] is grid and hit[2] is generator:
        _CACHE.move_to_end(key)
        return hit[3]
    its = InputToState(model, grid, generator)
    _CACHE[key] = (model, grid, generator, its)
    while len(_CACHE) > _CACHE_SIZE:
        _CACHE.popitem(last=False)
    return its


def clear_cache() -> None:
    _CACHE.clear()


def _values(traj_or_array) -> np.ndarray:
    return traj_or_array.values if isinstance(traj_or_array, Trajectory) else np.asarray(traj_or_array, dtype=float)


def _check_shape(values: np.ndarray, grid: TimeGrid, dim: int, name: str) -> None:
    if values.ndim < 2 or values.shape[0] != grid.size + 1 or values.shape[1] != dim:
        raise ValidationError(
            f"{name}: expected node values of shape ({grid.size + 1}, {dim}, ...), got {values.shape}", field=name
        )
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name}: contains non-finite values", field=name)


def apply_L(model: StateSpaceModel, grid: TimeGrid, u) -> Trajectory:
    vals = _values(u)
    _check_shape(vals, grid, model.dim_u, "u")
    return Trajectory(grid, discretize(model, grid).apply(vals), "Y", model.M_Y)


def apply_Lstar(model: StateSpaceModel, grid: TimeGrid, v) -> Trajectory:
    vals = _values(v)
    _check_shape(vals, grid, model.dim_y, "v")
    return Trajectory(grid, discretize(model, grid).adjoint(vals), "U", model.M_U)


def apply_Lambda(model: StateSpaceModel, grid: TimeGrid, g) -> Trajectory:
    vals = _values(g)
    _check_shape(vals, grid, model.dim_u, "g")
    return Trajectory(grid, discretize(model, grid).lambda_apply(vals), "U", model.M_U)


def lambda_solver(model: StateSpaceModel, grid: TimeGrid, check_conditioning: bool = True) -> LambdaSolver:
    solver = discretize(model, grid).lambda_solver
    if check_conditioning and solver.condition_estimate > 1e14:
        raise ConditioningError("Lambda is numerically singular", {"condition_estimate": solver.condition_estimate})
    return solver


def invert_Lambda_direct(model: StateSpaceModel, grid: TimeGrid, h, tol: float = 1e-10) -> Trajectory:
    """Solve ``Lambda g = h`` exactly by the structured sweep; ``tol`` bounds the checked residual."""
    vals = _values(h)
    _check_shape(vals, grid, model.dim_u, "h")
    its = discretize(model, grid)
    g = lambda_solver(model, grid).solve(vals)
    res = its.lambda_apply(g) - vals
    scale = max(float(np.max(lp_norm(vals, grid, WeightedNorm(), model.M_U))), 1e-300)
    rel = float(np.max(lp_norm(res, grid, WeightedNorm(), model.M_U))) / scale
    if rel > tol:
        raise ConditioningError("direct Lambda solve residual above tolerance", {"relative_residual": rel})
    return Trajectory(grid, g, "U", model.M_U)


class NeumannGrowthWarning(RuntimeWarning):
    pass


@dataclass
class NeumannResult:
    g: Trajectory
    n0: int
    term_norms: list[float] = field(default_factory=list)
    growth_index: int | None = None


def invert_Lambda_neumann(
    model: StateSpaceModel, grid: TimeGrid, h, n0: int | None = None, q: float = 2.0
) -> NeumannResult:
    """``g = sum_{j<n0} (-T)^j h + v`` with ``Lambda v = (-T)^{n0} h`` and ``T = L^* R^* R L``.

    With ``n0=None`` the number of explicit terms is the first ``j`` at which
    the weighted ``q``-norm of ``T^j h`` stops decreasing, capped at 4.
    """
    vals = _values(h)
    _check_shape(vals, grid, model.dim_u, "h")
    if n0 is not None and (int(n0) != n0 or n0 < 0):
        raise ValidationError("n0 must be a non-negative integer", field="n0")
    its = discretize(model, grid)
    wn = WeightedNorm(p=q)
    term = vals.copy()
    total = np.zeros_like(vals)
    norms = [float(np.max(lp_norm(term, grid, wn, model.M_U)))]
    growth = None
    j = 0
    while True:
        if n0 is not None and j >= n0:
            break
        if n0 is None and (j >= 4 or (j >= 1 and norms[-1] >= norms[-2])):
            break
        total += term
        term = -its.gramian_apply(term)
        j += 1
        norms.append(float(np.max(lp_norm(term, grid, wn, model.M_U))))
        if growth is None and norms[-1] > norms[-2]:
            growth = j
    if growth is not None and n0 is not None:
        warnings.warn(NeumannGrowthWarning(f"Neumann terms grow at j={growth}"), stacklevel=2)
    v = lambda_solver(model, grid).solve(term)
    g = Trajectory(grid, total + v, "U", model.M_U)
    return NeumannResult(g=g, n0=j, term_norms=norms, growth_index=growth)


# ---------------------------------------------------------------------------
# mixed-norm probes


@dataclass(frozen=True)
class _LpSpace:
    grid: TimeGrid
    gram: np.ndarray
    p: float
    delta: float = 0.0

    @cached_property
    def scale(self) -> np.ndarray:
        return np.exp(self.delta * self.grid.nodes)

    def norm(self, f: np.ndarray) -> float:
        return float(lp_norm(f, self.grid, WeightedNorm(self.p, self.delta), self.gram))

    def gradient(self, f: np.ndarray) -> np.ndarray:
        """Euclidean gradient of the norm at ``f`` (a norming functional)."""
        Mf = np.einsum("ij,kj->ki", self.gram, f)
        pw = np.sqrt(np.maximum(np.einsum("ki,ki->k", f, Mf), 0.0)) * self.scale
        nrm = self.norm(f)
        out = np.zeros_like(f)
        if nrm == 0:
            return out
        if math.isinf(self.p):
            k = int(np.argmax(pw))
            out[k] = self.scale[k] ** 2 * Mf[k] / pw[k]
            return out
        w = self.grid.weights
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(pw > 0, w * self.scale**2 * pw ** (self.p - 2) / nrm ** (self.p - 1), 0.0)
        return coef[:, None] * Mf

    def maximizer(self, z: np.ndarray) -> np.ndarray:
        """Unit-norm ``x`` maximizing the Euclidean pairing with ``z``."""
        w = self.grid.weights
        zeta = np.linalg.solve(self.gram, z.T).T / (w * self.scale)[:, None]
        mag = np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", zeta, self.gram, zeta, optimize=True), 0.0))
        g = np.zeros_like(zeta)
        if self.p == 1:
            score = mag
            k = int(np.argmax(score))
            if mag[k] > 0:
                g[k] = zeta[k] / mag[k] / w[k]
        elif math.isinf(self.p):
            nz = mag > 0
            g[nz] = zeta[nz] / mag[nz, None]
        else:
            pp = self.p / (self.p - 1)
            with np.errstate(divide="ignore", invalid="ignore"):
                g = np.where(mag[:, None] > 0, zeta * (mag ** (pp - 2))[:, None], 0.0)
        x = g / self.scale[:, None]
        nrm = self.norm(x)
        return x / nrm if nrm > 0 else x


def mixed_norm_estimate(
    apply: Callable[[np.ndarray], np.ndarray],
    apply_T: Callable[[np.ndarray], np.ndarray],
    dom: _LpSpace,
    cod: _LpSpace,
    dim_in: int,
    iterations: int = 30,
    restarts: int = 3,
    seed: int = 0,
) -> tuple[float, bool]:
    """Lower bound on ``||X||_{L^p -> L^r}`` by the dual power iteration.

    Returns the estimate and whether successive values settled to 1e-6.
    """
    rng = np.random.default_rng(seed)
    best, converged_any = 0.0, False
    n1 = dom.grid.size + 1
    for _ in range(restarts):
        x = rng.standard_normal((n1, dim_in))
        x /= dom.norm(x)
        est, converged = 0.0, False
        for _ in range(iterations):
            y = apply(x)
            new = cod.norm(y)
            if not np.isfinite(new):
                raise ConvergenceError("operator norm estimate is not finite")
            if new == 0.0:
                est, converged = 0.0, True
                break
            if abs(new - est) <= 1e-6 * new:
                est, converged = max(est, new), True
                break
            est = max(est, new)
            x = dom.maximizer(apply_T(cod.gradient(y)))
            if dom.norm(x) == 0:
                converged = True
                break
        best = max(best, est)
        converged_any = converged_any or converged
    return best, converged_any


@dataclass
class RegularityReport:
    which: str
    p: float
    r: float
    horizons: list[float]
    node_counts: list[int]
    norms: list[float]
    converged: list[bool]
    bounded: bool
    factor: float

    def to_json_dict(self) -> dict:
        return {
            "which": self.which,
            "p": self.p,
            "r": self.r,
            "horizons": self.horizons,
            "node_counts": self.node_counts,
            "norms": self.norms,
            "converged": self.converged,
            "bounded": self.bounded,
            "factor": self.factor,
        }


def _probe_operator(model: StateSpaceModel, grid: TimeGrid, which: str):
    """Forward map, Euclidean transpose and (domain, codomain) space tags."""
    its = discretize(model, grid)
    w = grid.weights[:, None]

    def weigh(arr, M):
        return w * np.einsum("ij,kj->ki", M, arr)

    def unweigh_U(arr):
        return np.linalg.solve(model.M_U, arr.T).T / w

    if which == "L":
        return its.apply, its.apply_T, "U", "Y"
    if which == "Lstar":
        return its.adjoint, lambda z: weigh(its.apply(unweigh_U(z)), model.M_Y), "Y", "U"
    if which == "LstarRRL_smoothing":
        return its.gramian_apply, lambda z: its.apply_T(weigh(its.apply(unweigh_U(z)), model.Q)), "U", "U"
    raise ValidationError(f"unknown probe target {which!r}", field="which")


def regularity_probe(
    model: StateSpaceModel,
    grids: list[TimeGrid],
    which: str = "L",
    p: float = 2.0,
    r: float = 2.0,
    delta: float = 0.0,
    factor: float = 2.0,
    seed: int = 0,
) -> RegularityReport:
    """Discrete ``L^p -> L^r`` norms of ``L``, ``L^*`` or ``L^* R^* R L`` along a grid sequence."""
    if len(grids) < 2:
        raise ValidationError("regularity probe needs at least two grids", field="grids")
    for a, b in zip(grids, grids[1:]):
        if b.size <= a.size or b.horizon < a.horizon:
            raise ValidationError("grid sequence must refine (more nodes, no shorter horizon)", field="grids")
    grams = {"U": model.M_U, "Y": model.M_Y}
    dims = {"U": model.dim_u, "Y": model.dim_y}
    norms, conv = [], []
    for grid in grids:
        apply, apply_T, din, dout = _probe_operator(model, grid, which)
        dom = _LpSpace(grid, grams[din], p, delta)
        cod = _LpSpace(grid, grams[dout], r, delta)
        est, ok = mixed_norm_estimate(apply, apply_T, dom, cod, dims[din], seed=seed)
        norms.append(est)
        conv.append(ok)
    top, bottom = max(norms), min(norms)
    bounded = bool(top == 0 or (bottom > 0 and top / bottom <= factor))
    return RegularityReport(
        which=which,
        p=p,
        r=r,
        horizons=[g.horizon for g in grids],
        node_counts=[g.size for g in grids],
        norms=norms,
        converged=conv,
        bounded=bounded,
        factor=factor,
    )


@dataclass
class PerturbationReport:
    deltas: list[float]
    norms: list[float]
    converged: list[bool]
    order: float

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.norms) > 0))

    @property
    def vanishing(self) -> bool:
        """Ratio test: the norms shrink at least like ``delta^{1/2}`` as ``delta`` decreases."""
        return bool(self.order > 0.5)

    def to_json_dict(self) -> dict:
        return {
            "deltas": self.deltas,
            "norms": self.norms,
            "converged": self.converged,
            "order": self.order,
            "monotone": self.monotone,
            "vanishing": self.vanishing,
        }


def perturbation_probe(
    model: StateSpaceModel,
    grid: TimeGrid,
    deltas=None,
    rate: float | None = None,
    seed: int = 0,
) -> PerturbationReport:
    """Norms of ``L^*_{A-d} R^*R L_{A+d} - L^*R^*RL`` on the discrete ``L^2(U)``.

    ``L_{A+d}`` is the input-to-state map of the shifted generator ``A + d I``.
    The default shifts are ``(0.01, 0.02, 0.04) * rate`` with ``rate`` the
    fitted semigroup decay rate (pass ``min(omega, eta)`` when ``eta`` is known).
    """
    if deltas is None:
        if rate is None:
            from .model import semigroup_decay_fit

            rate = semigroup_decay_fit(model).rate
        deltas = [c * rate for c in (0.01, 0.02, 0.04)]
    deltas = [float(d) for d in deltas]
    if len(deltas) < 2 or any(d <= 0 for d in deltas) or np.any(np.diff(deltas) <= 0):
        raise ValidationError("deltas must be positive and increasing", field="deltas")
    base = discretize(model, grid)
    eye = np.eye(model.dim_y)
    w = grid.weights[:, None]
    space = _LpSpace(grid, model.M_U, 2.0)
    norms, conv = [], []
    for d in deltas:
        plus = InputToState(model, grid, model.A + d * eye)
        minus = InputToState(model, grid, model.A - d * eye)

        def apply(g, plus=plus, minus=minus):
            return minus.adjoint(plus.rstar_r(plus.apply(g))) - base.gramian_apply(g)

        def apply_T(z, plus=plus, minus=minus):
            zu = np.linalg.solve(model.M_U, z.T).T / w
            shifted = plus.apply_T(w * np.einsum("ij,kj->ki", model.Q, minus.apply(zu)))
            plain = base.apply_T(w * np.einsum("ij,kj->ki", model.Q, base.apply(zu)))
            return shifted - plain

        est, ok = mixed_norm_estimate(apply, apply_T, space, space, model.dim_u, seed=seed)
        norms.append(est)
        conv.append(ok)
    if norms[0] > 0 and norms[-1] > 0:
        order = math.log(norms[-1] / norms[0]) / math.log(deltas[-1] / deltas[0])
    else:
        order = math.inf if norms[-1] > 0 else 0.0
    return PerturbationReport(deltas=deltas, norms=norms, converged=conv, order=order)


# ---------------------------------------------------------------------------
# CSV interchange


def trajectory_to_csv(traj: Trajectory, tag: str | None = None) -> str:
    tag = tag or traj.space.lower()
    vals = traj.values.reshape(traj.values.shape[0], -1)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + [f"{tag}_{i}" for i in range(vals.shape[1])])
    for t, row in zip(traj.grid.nodes, vals):
        writer.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in row])
    return buf.getvalue()


def write_trajectory_csv(path: str | Path, traj: Trajectory, tag: str | None = None) -> None:
    write_text_atomic(path, trajectory_to_csv(traj, tag))


def read_trajectory_csv(path: str | Path, space: str = "Y") -> Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ValidationError("trajectory CSV must start with a 't' column", field="csv")
    data = np.array([[float(x) for x in row] for row in rows[1:]])
    return Trajectory(grid_from_nodes(data[:, 0]), data[:, 1:], space)
