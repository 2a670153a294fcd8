"""Finite-dimensional state-space models with Gram-matrix inner products.

Every space carries an inner product ``<x, y> = x^T M y`` given by a symmetric
positive definite Gram matrix.  Adjoints are taken with respect to these
metrics: for ``X: V -> W`` the adjoint is ``X^# = M_V^{-1} X^T M_W``.
"""

from __future__ import annotations

import json
import math
from dataclasses import InitVar, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import FractionalPowerError, ValidationError
from .io_utils import dumps, write_text_atomic

_SYM_TOL = 1e-12


def _as_matrix(name: str, value, shape: tuple[int, int] | None = None) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float, ndmin=2, copy=True)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: not a numeric matrix ({exc})", field=name) from None
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-D array, got ndim={arr.ndim}", field=name)
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}", field=name)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite entries", field=name)
    arr.setflags(write=False)
    return arr


def _check_gram(name: str, M: np.ndarray) -> None:
    scale = max(np.max(np.abs(M)), 1.0)
    if np.max(np.abs(M - M.T)) > _SYM_TOL * scale:
        raise ValidationError(f"{name}: Gram matrix is not symmetric", field=name)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValidationError(f"{name}: Gram matrix is not positive definite", field=name) from None


def spectral_abscissa(A: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(A).real))


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Linear system ``y' = A y + B u`` observed through ``z = R y``.

    ``M_Y``, ``M_U`` and ``M_Z`` are the Gram matrices of the state, control
    and observation spaces.  With ``check=True`` (the default) the generator
    must be invertible with negative spectral abscissa.
    """

    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    M_Y: np.ndarray | None = None
    M_U: np.ndarray | None = None
    M_Z: np.ndarray | None = None
    name: str = "model"
    check: InitVar[bool] = True
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self, check: bool) -> None:
        A = _as_matrix("A", self.A)
        n = A.shape[0]
        if A.shape != (n, n) or n == 0:
            raise ValidationError(f"A: must be square and non-empty, got {A.shape}", field="A")
        B = _as_matrix("B", self.B)
        if B.shape[0] != n or B.shape[1] == 0:
            raise ValidationError(f"B: expected {n} rows and at least one column, got {B.shape}", field="B")
        R = _as_matrix("R", self.R)
        if R.shape[1] != n or R.shape[0] == 0:
            raise ValidationError(f"R: expected {n} columns, got {R.shape}", field="R")
        m, p = B.shape[1], R.shape[0]
        grams = {}
        for key, dim in (("M_Y", n), ("M_U", m), ("M_Z", p)):
            value = getattr(self, key)
            M = np.eye(dim) if value is None else _as_matrix(key, value, (dim, dim))
            _check_gram(key, M)
            grams[key] = M
        for key, value in (("A", A), ("B", B), ("R", R), *grams.items()):
            object.__setattr__(self, key, value)
        if check:
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > 1e14:
                raise ValidationError(f"A: generator is not invertible (condition number {cond:.3e})", field="A")
            alpha = spectral_abscissa(A)
            if not alpha < 0:
                raise ValidationError(
                    f"A: generator is not exponentially stable (spectral abscissa {alpha:.6g})", field="A"
                )

    # dimensions -------------------------------------------------------
    @property
    def dim_y(self) -> int:
        return self.A.shape[0]

    @property
    def dim_u(self) -> int:
        return self.B.shape[1]

    @property
    def dim_z(self) -> int:
        return self.R.shape[0]

    # Gram factorizations and adjoints ----------------------------------
    @cached_property
    def chol_Y(self):
        return sla.cho_factor(self.M_Y, lower=True)

    @cached_property
    def chol_U(self):
        return sla.cho_factor(self.M_U, lower=True)

    def solve_MY(self, x: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.chol_Y, x)

    def solve_MU(self, x: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.chol_U, x)

    @cached_property
    def A_adj(self) -> np.ndarray:
        return self.solve_MY(self.A.T @ self.M_Y)

    @cached_property
    def B_adj(self) -> np.ndarray:
        """``B^#: Y -> U``."""
        return self.solve_MU(self.B.T @ self.M_Y)

    @cached_property
    def R_adj(self) -> np.ndarray:
        """``R^#: Z -> Y``."""
        return self.solve_MY(self.R.T @ self.M_Z)

    @cached_property
    def Q(self) -> np.ndarray:
        """Euclidean matrix of the observation energy: ``<Ry, Ry>_Z = y^T Q y``."""
        Q = self.R.T @ self.M_Z @ self.R
        return 0.5 * (Q + Q.T)

    @cached_property
    def RstarR(self) -> np.ndarray:
        return self.solve_MY(self.Q)

    @cached_property
    def A_inv_B(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.B)

    def adjoint_of(self, X: np.ndarray, M_dom: np.ndarray, M_cod: np.ndarray) -> np.ndarray:
        return np.linalg.solve(M_dom, X.T @ M_cod)

    # norms ---------------------------------------------------------------
    def norm_Y(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(np.einsum("i...,ij,j...->...", x, self.M_Y, x, optimize=True), 0.0))

    def operator_norm(self, X: np.ndarray, dom: str = "Y", cod: str = "Y") -> float:
        grams = {"Y": self.M_Y, "U": self.M_U, "Z": self.M_Z}
        return gram_operator_norm(X, grams[dom], grams[cod])

    # serialization -------------------------------------------------------
    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "dim_y": self.dim_y,
            "dim_u": self.dim_u,
            "dim_z": self.dim_z,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "R": self.R.tolist(),
            "M_Y": self.M_Y.tolist(),
            "M_U": self.M_U.tolist(),
            "M_Z": self.M_Z.tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict, check: bool = True) -> "StateSpaceModel":
        if not isinstance(data, dict):
            raise ValidationError("model document must be a JSON object", field="model")
        for key in ("A", "R"):
            if key not in data:
                raise ValidationError(f"missing field {key!r}", field=key)
        A = _as_matrix("A", data["A"])
        if "B" in data:
            B = _as_matrix("B", data["B"])
        elif "A_inv_B" in data:
            B = A @ _as_matrix("A_inv_B", data["A_inv_B"])
        else:
            raise ValidationError("missing field 'B' (or 'A_inv_B')", field="B")
        model = cls(
            A=A,
            B=B,
            R=data["R"],
            M_Y=data.get("M_Y"),
            M_U=data.get("M_U"),
            M_Z=data.get("M_Z"),
            name=str(data.get("name", "model")),
            check=check,
        )
        for key, actual in (("dim_y", model.dim_y), ("dim_u", model.dim_u), ("dim_z", model.dim_z)):
            if key in data and int(data[key]) != actual:
                raise ValidationError(f"{key}={data[key]} disagrees with matrix shapes ({actual})", field=key)
        return model


def load_model(path: str | Path, check: bool = True) -> StateSpaceModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"model file is not valid JSON: {exc}", field="model") from None
    return StateSpaceModel.from_json_dict(data, check=check)


def save_model(model: StateSpaceModel, path: str | Path) -> None:
    write_text_atomic(path, dumps(model.to_json_dict()))


# ---------------------------------------------------------------------------
# operator norms


def gram_operator_norm(X: np.ndarray, M_dom: np.ndarray, M_cod: np.ndarray) -> float:
    """Exact norm of ``X`` from ``(R^n, M_dom)`` to ``(R^m, M_cod)``."""
    X = np.atleast_2d(X)
    L_dom = np.linalg.cholesky(M_dom)
    L_cod = np.linalg.cholesky(M_cod)
    core = L_cod.T @ sla.solve_triangular(L_dom, X.T, lower=True).T
    return float(np.linalg.norm(core, 2)) if core.size else 0.0


# ---------------------------------------------------------------------------
# semigroup and adjoint actions


def semigroup_apply(model: StateSpaceModel, t: float, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """``e^{At} x`` (or ``e^{A^# t} x``) by scaling-and-squaring."""
    if t < 0:
        raise ValidationError("semigroup time must be non-negative", field="t")
    gen = model.A_adj if adjoint else model.A
    return sla.expm(gen * t) @ x


def adjoint_apply(model: StateSpaceModel, op: str, v: np.ndarray, t: float | None = None) -> np.ndarray:
    """Apply the Gram adjoint of ``A``, ``B``, ``R`` or ``e^{At}`` to ``v``."""
    if op == "A":
        return model.A_adj @ v
    if op == "B":
        return model.B_adj @ v
    if op == "R":
        return model.R_adj @ v
    if op == "semigroup":
        if t is None:
            raise ValidationError("semigroup adjoint needs a time", field="t")
        return semigroup_apply(model, t, v, adjoint=True)
    raise ValidationError(f"unknown operator tag {op!r}", field="op")


# ---------------------------------------------------------------------------
# fractional powers

_EIG_COND_LIMIT = 1e8


def _neg_power_eig(X: np.ndarray, exponent: float) -> np.ndarray | None:
    mu, V = np.linalg.eig(X)
    if np.linalg.cond(V) > _EIG_COND_LIMIT:
        return None
    out = (V * mu**exponent) @ np.linalg.inv(V)
    return out.real


def _neg_power_quadrature(X: np.ndarray, alpha: float, rhs: np.ndarray) -> np.ndarray:
    """``X^{-alpha} rhs`` for ``0 < alpha < 1`` by a resolvent integral.

    Uses ``X^{-a} = sin(pi a)/pi * int_R e^{(1-a) s} (e^s + X)^{-1} ds``.  The
    window is wide enough that the integrand is below 1e-16 of its peak at both
    ends, where the trapezoid rule converges geometrically in the step.
    """
    n = X.shape[0]
    I = np.eye(n)
    upper = math.log(np.linalg.norm(X, 2)) + 37.0 / alpha
    lower = -math.log(np.linalg.norm(np.linalg.inv(X), 2)) - 37.0 / (1.0 - alpha)
    prev = None
    nodes = 256
    while nodes <= 65536:
        s, h = np.linspace(lower, upper, nodes, retstep=True)
        acc = np.zeros_like(rhs, dtype=float)
        for sk in s[1:-1]:
            if sk > 0:  # e^{-a s} (I + e^{-s} X)^{-1}, free of overflow
                acc += math.exp(-alpha * sk) * np.linalg.solve(I + math.exp(-sk) * X, rhs)
            else:
                acc += math.exp((1 - alpha) * sk) * np.linalg.solve(math.exp(sk) * I + X, rhs)
        est = math.sin(math.pi * alpha) / math.pi * h * acc
        if prev is not None:
            scale = max(np.linalg.norm(est), 1e-300)
            if np.linalg.norm(est - prev) <= 1e-11 * scale:
                return est
        prev = est
        nodes *= 2
    raise FractionalPowerError(
        "resolvent quadrature for the fractional power did not converge",
        {"exponent": alpha, "max_nodes": nodes // 2},
    )


def fractional_power(model: StateSpaceModel, exponent: float, adjoint: bool = False) -> np.ndarray:
    """Matrix of ``(-A)^{exponent}`` (or ``(-A^#)^{exponent}``), ``|exponent| < 1``."""
    if not -1.0 < exponent < 1.0:
        raise ValidationError("fractional exponent must lie in (-1, 1)", field="exponent")
    key = ("frac", float(exponent), bool(adjoint))
    cache = model._cache
    if key in cache:
        return cache[key]
    X = -(model.A_adj if adjoint else model.A)
    n = X.shape[0]
    if exponent == 0.0:
        out = np.eye(n)
    else:
        out = _neg_power_eig(X, exponent)
        if out is None:
            alpha = abs(exponent)
            neg = _neg_power_quadrature(X, alpha, np.eye(n))
            out = neg if exponent < 0 else np.linalg.inv(neg)
    out.setflags(write=False)
    cache[key] = out
    return out


def fractional_power_apply(
    model: StateSpaceModel, epsilon: float, sign: int, x: np.ndarray, adjoint: bool = False
) -> np.ndarray:
    """``(-A)^{sign*epsilon} x`` with ``sign`` in {+1, -1}."""
    if sign not in (1, -1):
        raise ValidationError("sign must be +1 or -1", field="sign")
    return fractional_power(model, sign * epsilon, adjoint=adjoint) @ x


# ---------------------------------------------------------------------------
# exponential envelopes


@dataclass(frozen=True)
class DecayFit:
    """Envelope ``M t^{-gamma} e^{-omega t}`` dominating sampled norms.

    ``residual`` is the relative inflation that was needed to lift the
    least-squares fit above every sample.
    """

    amplitude: float
    rate: float
    singularity_exponent: float = 0.0
    residual: float = 0.0

    @property
    def stable(self) -> bool:
        return self.rate > 1e-10

    def envelope(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return self.amplitude * t ** (-self.singularity_exponent) * np.exp(-self.rate * t)

    def to_json_dict(self) -> dict:
        return {
            "amplitude": self.amplitude,
            "rate": self.rate,
            "singularity_exponent": self.singularity_exponent,
            "residual": self.residual,
            "stable": self.stable,
        }


def fit_exponential_envelope(times, norms, semigroup: bool = True) -> DecayFit:
    """Fit ``log n(t) ~ log M - omega t`` and shift it to dominate all samples."""
    t = np.asarray(times, dtype=float)
    n = np.asarray(norms, dtype=float)
    if t.shape != n.shape or t.size < 2:
        raise ValidationError("need at least two (time, norm) samples of equal length", field="samples")
    if np.any(n <= 0) or not np.all(np.isfinite(n)):
        raise ValidationError("norm samples must be positive and finite", field="samples")
    logn = np.log(n)
    slope, intercept = np.polyfit(t, logn, 1)
    rate = -float(slope)
    if abs(rate) < 1e-12 * max(1.0, 1.0 / max(np.ptp(t), 1e-300)):
        rate = 0.0
    shift = float(np.max(logn - (intercept - rate * t)))
    shift = max(shift, 0.0)
    amplitude = math.exp(intercept + shift)
    if semigroup:
        amplitude = max(amplitude, 1.0)
    return DecayFit(amplitude=amplitude, rate=rate, residual=math.expm1(shift))


def semigroup_decay_fit(model: StateSpaceModel, A: np.ndarray | None = None, samples: int = 48) -> DecayFit:
    """Envelope of ``||e^{At}||_Y`` sampled over several decay times."""
    gen = model.A if A is None else A
    alpha = spectral_abscissa(gen)
    if alpha >= 0:
        return DecayFit(amplitude=math.inf, rate=-alpha, residual=math.inf)
    span = 30.0 / -alpha
    times = np.linspace(span / samples, span, samples)
    step = sla.expm(gen * (times[1] - times[0]))
    E = sla.expm(gen * times[0])
    norms = []
    for _ in times:
        norms.append(gram_operator_norm(E, model.M_Y, model.M_Y))
        E = step @ E
    return fit_exponential_envelope(times, np.maximum(norms, 1e-300))


def choose_horizon(model: StateSpaceModel, tol: float = 1e-8, fit: DecayFit | None = None) -> float:
    """Smallest ``T`` with ``M e^{-omega T} <= tol`` for the semigroup envelope."""
    fit = fit or semigroup_decay_fit(model)
    if not fit.stable:
        raise ValidationError("cannot choose a horizon for a non-decaying semigroup", field="A")
    return max(math.log(fit.amplitude / tol) / fit.rate, 1e-12)
