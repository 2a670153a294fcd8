"""Numerical checks of the structural hypotheses behind the boundary-control LQ theory.

A model is probed through a :class:`DecompositionSupplier`, which splits the
observation kernel ``B^# e^{A^# t}`` into a singular part ``F(t)`` and a
regular part ``G(t)``.  Every check returns measured numbers; verdicts compare
them with thresholds that are engineering choices, not proofs.  Statements of
boundedness are judged along a refinement sequence: a quantity counts as
bounded when it grows by at most ``factor`` per refinement step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError, ValidationError
from .model import DecayFit, StateSpaceModel, fractional_power, semigroup_decay_fit
from .trajectory import TimeGrid

KernelPair = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class DecompositionSupplier:
    """Matrices ``(F(t), G(t))`` (each ``dim_u x dim_y``) for one model."""

    model: StateSpaceModel
    matrices: Callable[[float], KernelPair]
    label: str = "custom"

    def __call__(self, t: float, y0: np.ndarray) -> KernelPair:
        F, G = self.matrices(float(t))
        return F @ y0, G @ y0

    def stack(self, times) -> KernelPair:
        pairs = [self.matrices(float(t)) for t in np.atleast_1d(times)]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def scaled_G(self, factor: float) -> "DecompositionSupplier":
        """A deliberately corrupted copy whose regular part is multiplied by ``factor``."""
        base = self.matrices

        def corrupted(t: float) -> KernelPair:
            F, G = base(t)
            return F, factor * G

        return DecompositionSupplier(self.model, corrupted, f"{self.label}*G{factor:g}")


def adjoint_kernel(model: StateSpaceModel, t: float) -> np.ndarray:
    """``B^# e^{A^# t} = M_U^{-1} (e^{At} B)^T M_Y``."""
    return model.solve_MU((sla.expm(model.A * t) @ model.B).T @ model.M_Y)


def trivial_supplier(model: StateSpaceModel) -> DecompositionSupplier:
    """``F = B^# e^{A^# t}``, ``G = 0``; adequate whenever ``B`` is bounded."""
    zero = np.zeros((model.dim_u, model.dim_y))
    return DecompositionSupplier(model, lambda t: (adjoint_kernel(model, t), zero), "F=B#exp(A#t), G=0")


# ---------------------------------------------------------------------------
# helpers


def _y_to_u_core(model: StateSpaceModel, X: np.ndarray) -> np.ndarray:
    """``L_U^T X L_Y^{-T}``: Euclidean matrices whose 2-norms are ``||X||_{Y -> U}`` (works on stacks)."""
    X = np.asarray(X, dtype=float)
    LY = np.tril(model.chol_Y[0])
    LU = np.tril(model.chol_U[0])
    rows = X.reshape(-1, X.shape[-1])
    right = sla.solve_triangular(LY, rows.T, lower=True).T.reshape(X.shape)
    return LU.T @ right


def kernel_norms(model: StateSpaceModel, stack: np.ndarray) -> np.ndarray:
    """``||K_k||_{Y -> U}`` for every matrix of a stack, by exact singular values."""
    core = _y_to_u_core(model, np.asarray(stack))
    return np.linalg.norm(core, 2, axis=(-2, -1))


def kernel_lp_norm(
    model: StateSpaceModel,
    stack: np.ndarray,
    weights: np.ndarray,
    p: float,
    iterations: int = 30,
    restarts: int = 3,
    seed: int = 0,
) -> float:
    """Norm of ``y -> (K_k y)_k`` from ``Y`` into the discrete ``L^p(U)`` with quadrature ``weights``.

    ``p = 2`` is exact; other exponents use the dual power iteration, which
    returns a lower bound that is sharp in practice.
    """
    if not p >= 1:
        raise ValidationError("p must be at least 1", field="p")
    core = _y_to_u_core(model, np.asarray(stack, dtype=float))  # (n, m, N) in orthonormal coordinates
    w = np.asarray(weights, dtype=float)
    if not np.any(core):
        return 0.0
    if p == 2:
        return float(np.linalg.norm((np.sqrt(w)[:, None, None] * core).reshape(-1, core.shape[-1]), 2))

    def value(x):
        pw = np.linalg.norm(core @ x, axis=1)
        return float(np.sum(w * pw**p) ** (1 / p)), pw

    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        x = rng.standard_normal(core.shape[-1])
        x /= np.linalg.norm(x)
        est = 0.0
        for _ in range(iterations):
            nrm, pw = value(x)
            if nrm == 0.0:
                break
            if abs(nrm - est) <= 1e-9 * nrm:
                est = max(est, nrm)
                break
            est = max(est, nrm)
            y = core @ x
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(pw > 0, w * pw ** (p - 2), 0.0) / nrm ** (p - 1)
            z = np.einsum("kmi,km->i", core, coef[:, None] * y)
            zn = np.linalg.norm(z)
            if zn == 0:
                break
            x = z / zn
        best = max(best, est)
    return best


def refinement_verdict(values: Sequence[float], factor: float = 2.0) -> bool:
    """True when no step of the sequence grows by more than ``factor``."""
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        return False
    if v.size < 2 or np.all(v == 0):
        return True
    prev, nxt = v[:-1], v[1:]
    return bool(np.all((nxt <= factor * prev) | (nxt == 0)))


# ---------------------------------------------------------------------------
# individual checks


@dataclass
class DecompositionReport:
    max_defect: float
    worst_time: float
    probe_count: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_defect <= self.tolerance)

    def to_json_dict(self) -> dict:
        return {
            "max_defect": self.max_defect,
            "worst_time": self.worst_time,
            "probe_count": self.probe_count,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def check_decomposition(
    model: StateSpaceModel,
    supplier: DecompositionSupplier,
    grid: TimeGrid,
    probe_count: int = 8,
    seed: int = 0,
    tol: float = 1e-8,
    floor: float = 1e-8,
) -> DecompositionReport:
    """Largest relative defect ``||(F + G)(t)y - B^# e^{A^# t} y||_U / ||B^# e^{A^# t} y||_U``.

    Every positive grid node is visited; the reference kernel is a fresh
    matrix exponential per node.  Far in the tail both sides sit at roundoff
    level, so each denominator is floored at ``floor`` times the largest
    value of that probe over the grid (the same tolerance that sets the
    truncation horizon).
    """
    if supplier.model is not model:
        raise ValidationError("supplier is bound to a different model", field="supplier")
    Y0 = np.random.default_rng(seed).standard_normal((model.dim_y, probe_count))
    diffs, refs = [], []
    for t in grid.nodes[1:]:
        F, G = supplier.matrices(float(t))
        ref = adjoint_kernel(model, t) @ Y0
        diff = (F + G) @ Y0 - ref
        diffs.append(np.sqrt(np.einsum("ic,ij,jc->c", diff, model.M_U, diff, optimize=True)))
        refs.append(np.sqrt(np.einsum("ic,ij,jc->c", ref, model.M_U, ref, optimize=True)))
    diffs, refs = np.array(diffs), np.array(refs)
    den = np.maximum(refs, floor * refs.max(axis=0, initial=0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diffs == 0, 0.0, diffs / den)
    rel = np.where(np.isfinite(rel), rel, math.inf)
    k = int(np.argmax(rel.max(axis=1))) if rel.size else 0
    worst = float(rel.max()) if rel.size else 0.0
    return DecompositionReport(
        max_defect=worst, worst_time=float(grid.nodes[1 + k]), probe_count=probe_count, tolerance=tol
    )


def resolution_time(model: StateSpaceModel, multiple: float = 3.0) -> float:
    """A few multiples of ``1/rho(A)``: below this the discrete kernel stops following its continuum limit."""
    rho = float(np.max(np.abs(np.linalg.eigvals(model.A))))
    return multiple / rho


def fit_singular_envelope(times, norms) -> DecayFit:
    """Least-squares ``log n = log N - gamma log t - eta t``, then ``N`` raised to dominate every sample."""
    t = np.asarray(times, dtype=float)
    n = np.asarray(norms, dtype=float)
    keep = (t > 0) & (n > 0) & np.isfinite(n)
    t, n = t[keep], n[keep]
    if t.size < 3:
        raise ValidationError("need at least three positive samples to fit a singular envelope", field="samples")
    X = np.column_stack([np.ones_like(t), -np.log(t), -t])
    if np.linalg.cond(X) > 1e12:
        raise ConditioningError("singular-envelope fit is degenerate (collinear samples)", {"cond": float(np.linalg.cond(X))})
    coef, *_ = np.linalg.lstsq(X, np.log(n), rcond=None)
    logN, gamma, eta = (float(c) for c in coef)
    shift = max(float(np.max(np.log(n) - X @ coef)), 0.0)
    return DecayFit(amplitude=math.exp(logN + shift), rate=eta, singularity_exponent=gamma, residual=math.expm1(shift))


def singular_estimate_passed(fit: DecayFit) -> bool:
    """``gamma < 1`` and ``eta > 0``.

    A fitted ``gamma <= 0`` means no singularity at all; such a kernel obeys
    the envelope for every ``gamma`` in ``(0, 1)`` after enlarging ``N``.
    """
    return bool(fit.singularity_exponent < 1.0 and fit.rate > 0.0)


def singular_norm_samples(supplier: DecompositionSupplier, grid: TimeGrid, t_min: float | None = None):
    """Times and exact norms ``||F(t)||_{Y -> U}`` at the grid nodes inside the fitting window."""
    t_min = resolution_time(supplier.model) if t_min is None else t_min
    times = grid.nodes[grid.nodes >= max(t_min, 1e-300)]
    F, _ = supplier.stack(times)
    return times, kernel_norms(supplier.model, F)


def fit_singular_estimate(supplier: DecompositionSupplier, grid: TimeGrid, t_min: float | None = None) -> DecayFit:
    """Envelope ``N t^{-gamma} e^{-eta t}`` for ``||F(t)||`` over the nodes with ``t >= t_min``.

    The default window starts at :func:`resolution_time`; earlier nodes see
    the mesh cut-off rather than the singularity.
    """
    times, norms = singular_norm_samples(supplier, grid, t_min)
    return fit_singular_envelope(times, norms)


@dataclass
class GConditionTable:
    epsilon: float
    horizon: float
    Lp_norms: dict[float, float]
    K_T: float

    def to_json_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "horizon": self.horizon,
            "Lp_norms": {f"{p:g}": v for p, v in self.Lp_norms.items()},
            "K_T": self.K_T,
        }


def check_G_conditions(
    model: StateSpaceModel,
    supplier: DecompositionSupplier,
    grid: TimeGrid,
    epsilon: float,
    p_list: Sequence[float] = (1.0, 2.0, 4.0),
    seed: int = 0,
) -> GConditionTable:
    """``L^p(0, T; U)`` norms of ``y -> G(.)y`` and ``K_T = max_k ||G(t_k)(-A^#)^{-eps}||``.

    ``T`` is the grid horizon; nodes with ``t > 0`` are used.
    """
    # the origin sample is dropped, as for any integrable singularity at t = 0
    _, G = supplier.stack(grid.nodes[1:])
    w = grid.weights[1:]
    Lp = {float(p): kernel_lp_norm(model, G, w, float(p), seed=seed) for p in p_list}
    smooth = G @ fractional_power(model, -epsilon, adjoint=True)
    K_T = float(np.max(kernel_norms(model, smooth))) if np.any(G) else 0.0
    return GConditionTable(epsilon=float(epsilon), horizon=grid.horizon, Lp_norms=Lp, K_T=K_T)


def check_Lq_extension(
    model: StateSpaceModel,
    grid: TimeGrid,
    epsilon: float,
    q_list: Sequence[float] = (1.2, 1.5, 1.8),
    seed: int = 0,
) -> dict[float, float]:
    """Discrete ``L^q(0, T; U)`` norms of ``y -> B^# e^{A^# .} (-A^#)^eps y`` for each ``q``."""
    for q in q_list:
        if not 1.0 < q < 2.0:
            raise ValidationError("every q must lie in (1, 2)", field="q")
    frac = fractional_power(model, epsilon, adjoint=True)
    stack = np.array([adjoint_kernel(model, t) @ frac for t in grid.nodes[1:]])
    return {float(q): kernel_lp_norm(model, stack, grid.weights[1:], float(q), seed=seed) for q in q_list}


def check_R_smoothing(model: StateSpaceModel, epsilon: float) -> float:
    """``||(-A^#)^eps R^# R (-A)^{-eps}||_{L(Y)}``."""
    X = fractional_power(model, epsilon, adjoint=True) @ model.RstarR @ fractional_power(model, -epsilon)
    return model.operator_norm(X)


# ---------------------------------------------------------------------------
# aggregated report


@dataclass
class Verdict:
    item: str
    passed: bool
    measured: object
    threshold: str
    note: str = ""
    gating: bool = True

    def to_json_dict(self) -> dict:
        return {
            "item": self.item,
            "passed": bool(self.passed),
            "measured": self.measured,
            "threshold": self.threshold,
            "note": self.note,
            "gating": self.gating,
        }


@dataclass
class HypothesisReport:
    labels: list[str]
    stability_fit: DecayFit
    F_fit: DecayFit | None
    decomposition: DecompositionReport | None
    A_inv_B_norms: list[float]
    K_T: dict[float, list[float]]
    G_Lp_norms: dict[float, list[float]]
    Lq_extension_norms: dict[float, dict[float, list[float]]]
    R_smoothing_norm: dict[float, list[float]]
    verdicts: list[Verdict] = field(default_factory=list)
    F_samples: tuple[list[float], list[float]] | None = None
    decomposition_label: str = ""

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts if v.gating)

    def to_json_dict(self) -> dict:
        def keyed(d):
            return {f"{k:g}": v for k, v in d.items()}

        return {
            "labels": self.labels,
            "decomposition_label": self.decomposition_label,
            "stability_fit": self.stability_fit.to_json_dict(),
            "F_fit": None if self.F_fit is None else self.F_fit.to_json_dict(),
            "decomposition": None if self.decomposition is None else self.decomposition.to_json_dict(),
            "A_inv_B_norms": self.A_inv_B_norms,
            "K_T": keyed(self.K_T),
            "G_Lp_norms": keyed(self.G_Lp_norms),
            "Lq_extension_norms": {f"{e:g}": keyed(v) for e, v in self.Lq_extension_norms.items()},
            "R_smoothing_norm": keyed(self.R_smoothing_norm),
            "verdicts": [v.to_json_dict() for v in self.verdicts],
            "passed": self.passed,
        }


def hypothesis_report(
    family: Sequence[tuple[StateSpaceModel, DecompositionSupplier]],
    short_grids: Sequence[TimeGrid],
    fit_grid: TimeGrid | None = None,
    epsilons: Sequence[float] = (0.02, 0.05, 0.1),
    p_list: Sequence[float] = (1.0, 2.0, 4.0),
    q_list: Sequence[float] = (1.2, 1.5, 1.8),
    factor: float = 2.0,
    probe_count: int = 8,
    seed: int = 0,
) -> HypothesisReport:
    """Run every check on a refinement family and collect verdicts.

    ``family`` lists (model, supplier) pairs from coarse to fine; ``short_grids``
    holds one grid on ``[0, T]`` per member.  The decomposition and singular
    envelope are measured on the finest member using ``fit_grid``.
    """
    if not family:
        raise ValidationError("the refinement family is empty", field="family")
    if len(short_grids) != len(family):
        raise ValidationError("need one short grid per family member", field="grids")
    models = [m for m, _ in family]
    finest, supplier = family[-1]
    labels = [m.name or f"member{i}" for i, m in enumerate(models)]
    verdicts: list[Verdict] = []

    stab = semigroup_decay_fit(finest)
    verdicts.append(Verdict("stability", stab.stable, stab.to_json_dict(), "rate > 0"))

    aib = [m.operator_norm(m.A_inv_B, "U", "Y") for m in models]
    verdicts.append(
        Verdict("bounded_composite", refinement_verdict(aib, factor), aib, f"growth <= {factor:g}x per refinement")
    )

    decomposition = F_fit = samples = None
    if fit_grid is not None:
        decomposition = check_decomposition(finest, supplier, fit_grid, probe_count, seed)
        verdicts.append(
            Verdict("decomposition", decomposition.passed, decomposition.max_defect, f"<= {decomposition.tolerance:g}")
        )
        times, norms = singular_norm_samples(supplier, fit_grid)
        samples = (times.tolist(), norms.tolist())
        if np.all(norms == 0):
            F_fit = DecayFit(amplitude=0.0, rate=math.inf)
            verdicts.append(Verdict("singular_estimate", True, F_fit.to_json_dict(), "F = 0"))
        else:
            F_fit = fit_singular_envelope(times, norms)
            verdicts.append(
                Verdict(
                    "singular_estimate",
                    singular_estimate_passed(F_fit),
                    F_fit.to_json_dict(),
                    "gamma < 1 and eta > 0",
                )
            )

    K_T: dict[float, list[float]] = {}
    G_Lp: dict[float, list[float]] = {float(p): [] for p in p_list}
    Lq: dict[float, dict[float, list[float]]] = {}
    R_s: dict[float, list[float]] = {}
    for i, ((model, sup), grid) in enumerate(zip(family, short_grids)):
        for e_idx, eps in enumerate(epsilons):
            table = check_G_conditions(model, sup, grid, eps, p_list if e_idx == 0 else (), seed)
            K_T.setdefault(float(eps), []).append(table.K_T)
            if e_idx == 0:
                for p, v in table.Lp_norms.items():
                    G_Lp[p].append(v)
            for q, v in check_Lq_extension(model, grid, eps, q_list, seed).items():
                Lq.setdefault(float(eps), {}).setdefault(q, []).append(v)
            R_s.setdefault(float(eps), []).append(check_R_smoothing(model, eps))

    thr = f"growth <= {factor:g}x per refinement"
    for p, vals in G_Lp.items():
        verdicts.append(Verdict(f"G_Lp[p={p:g}]", refinement_verdict(vals, factor), vals, thr))
    # one epsilon has to serve the three smoothing conditions at once; each
    # scanned value is reported, and the gate asks for at least one that works
    serving = []
    for eps in K_T:
        ok_a = refinement_verdict(K_T[eps], factor)
        ok_b = refinement_verdict(R_s[eps], factor)
        ok_q = {q: refinement_verdict(vals, factor) for q, vals in Lq[eps].items()}
        verdicts.append(Verdict(f"G_smoothing[eps={eps:g}]", ok_a, K_T[eps], thr, gating=False))
        verdicts.append(Verdict(f"R_smoothing[eps={eps:g}]", ok_b, R_s[eps], thr, gating=False))
        for q, vals in Lq[eps].items():
            verdicts.append(Verdict(f"Lq_extension[eps={eps:g},q={q:g}]", ok_q[q], vals, thr, gating=False))
        if ok_a and ok_b and any(ok_q.values()):
            serving.append(eps)
    if K_T:
        verdicts.append(
            Verdict(
                "smoothing_epsilon",
                bool(serving),
                serving,
                "some scanned eps passes G_smoothing, R_smoothing and Lq_extension for some q",
            )
        )

    return HypothesisReport(
        labels=labels,
        stability_fit=stab,
        F_fit=F_fit,
        decomposition=decomposition,
        A_inv_B_norms=aib,
        K_T=K_T,
        G_Lp_norms=G_Lp,
        Lq_extension_norms=Lq,
        R_smoothing_norm=R_s,
        verdicts=verdicts,
        F_samples=samples,
        decomposition_label=supplier.label,
    )
