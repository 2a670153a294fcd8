"""Statement-by-statement checks of the optimal control pipeline on one model.

Each statement S1..S9 of the infinite-horizon theory is turned into measured
quantities with explicit thresholds.  Several statements have no content
beyond finiteness in a finite-dimensional discretization; their rows are
marked as informational (``gating=False``) and explain why.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hypotheses import Verdict
from .lq import (
    RiccatiSolution,
    are_residual,
    closed_loop_decay_fit,
    derivative_check,
    direct_minimization_oracle,
    feedback_check,
    gain_on_smooth_domain,
    optimal_pair,
    relative_frobenius,
    riccati_alternative,
    riccati_assemble,
    riccati_identity_defect,
    scalar_riccati_exact,
)
from .model import StateSpaceModel, fractional_power, gram_operator_norm, semigroup_decay_fit
from .trajectory import TimeGrid, _stack_propagators, build_grid, discretize, grid_from_nodes

ORACLE_NODES = 1024


@functools.lru_cache(maxsize=None)
def scalar_quadrature_error(scheme: str = "foh") -> float:
    """``|P - (sqrt 2 - 1)|`` for the scalar model ``(-1, 1, 1)`` on ``n = 1024``, ``T = 20``."""
    model = StateSpaceModel(A=[[-1.0]], B=[[1.0]], R=[[1.0]], name="scalar")
    sol = riccati_assemble(model, build_grid(20.0, 1024, scheme=scheme), probes=0)
    return abs(float(sol.P[0, 0]) - scalar_riccati_exact(-1.0, 1.0, 1.0))


@dataclass
class StatementSuite:
    model_name: str
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts if v.gating)

    def to_json_dict(self) -> dict:
        return {
            "model": self.model_name,
            "passed": self.passed,
            "verdicts": [v.to_json_dict() for v in self.verdicts],
        }


def _unit_probes(model: StateSpaceModel, count: int, rng) -> np.ndarray:
    Y0 = rng.standard_normal((model.dim_y, count))
    return Y0 / model.norm_Y(Y0)


def _lp_of_kernel(model, stack, weights, p, scale=None):
    """Operator norm ``U -> L^p(Y)`` bound: ``(sum_k w_k ||K_k||^p)^{1/p}`` with exact pointwise norms."""
    norms = np.array([gram_operator_norm(K, model.M_U, model.M_Y) for K in stack])
    if scale is not None:
        norms = norms * scale
    return float(np.sum(weights * norms**p) ** (1 / p))


def _transition_defect(model: StateSpaceModel, grid: TimeGrid, y0: np.ndarray, start: int) -> float:
    """``Phi(t_j + s) y0`` against ``Phi(s) Phi(t_j) y0`` on the tail of the same grid."""
    full = optimal_pair(model, grid, y0).y.values
    tail = grid_from_nodes(grid.nodes[start:] - grid.nodes[start], scheme=grid.scheme)
    restarted = optimal_pair(model, tail, full[start]).y.values
    diff = model.norm_Y((restarted - full[start:]).T)
    return float(np.max(diff) / max(float(np.max(model.norm_Y(full.T))), 1e-300))


def statement_suite(
    model: StateSpaceModel,
    grid: TimeGrid,
    riccati: RiccatiSolution | None = None,
    bounded: bool = True,
    epsilon: float = 0.1,
    seed: int = 0,
    family: Sequence[tuple[StateSpaceModel, RiccatiSolution]] | None = None,
    are_tol: float = 1e-5,
    probes: int = 10,
) -> StatementSuite:
    """Run the S1..S9 checks.

    ``bounded`` selects the tighter symmetry and derivative tolerances for
    finite-dimensional models with a genuinely bounded ``B``.  ``family`` is an
    optional refinement sequence used for the gain-smoothing verdict.
    """
    rng = np.random.default_rng(seed)
    ric = riccati or riccati_assemble(model, grid, probes=probes, seed=seed)
    out = StatementSuite(model.name)
    add = out.verdicts.append
    Y0 = _unit_probes(model, probes, rng)
    pair = optimal_pair(model, grid, Y0)
    its = discretize(model, grid)
    w = grid.weights

    # S1: existence and uniqueness of the optimum --------------------------
    g = rng.standard_normal((grid.size + 1, model.dim_u, 4))
    gg = np.einsum("k,kic,ij,kjc->c", w, g, model.M_U, g, optimize=True)
    Lg = np.einsum("k,kic,ij,kjc->c", w, g, model.M_U, its.lambda_apply(g), optimize=True)
    coercive = float(np.min((Lg - gg) / gg))
    add(Verdict("S1.coercivity", coercive >= -1e-10, coercive, "(<Lambda g, g> - |g|^2)/|g|^2 >= -1e-10"))

    y0 = Y0[:, 0]
    single = optimal_pair(model, grid, y0)
    worst_gain = math.inf
    for _ in range(10):
        d = rng.standard_normal(single.u.values.shape)
        u = single.u.values + 1e-3 * d
        y = its.free(y0[:, None])[..., 0] + its.apply(u)
        J = float(grid.integrate(np.einsum("ki,ij,kj->k", y, model.Q, y, optimize=True) + np.einsum("ki,ij,kj->k", u, model.M_U, u, optimize=True)))
        worst_gain = min(worst_gain, J - single.cost)
    add(Verdict("S1.strict_optimality", worst_gain > 0, worst_gain, "J(u_opt + 1e-3 d) - J(u_opt) > 0 for 10 d"))

    if bounded:
        n = min(grid.size, ORACLE_NODES)
        small = grid if n == grid.size else build_grid(grid.horizon, n, grid.grading, scheme=grid.scheme)
        a = optimal_pair(model, small, y0).u
        b = direct_minimization_oracle(model, small, y0).u
        den = float(np.sqrt(a.grid.integrate(np.einsum("ki,ij,kj->k", a.values, model.M_U, a.values, optimize=True))))
        diff = a.values - b.values
        num = float(np.sqrt(a.grid.integrate(np.einsum("ki,ij,kj->k", diff, model.M_U, diff, optimize=True))))
        rel = num / den if den > 0 else num
        add(Verdict("S1.oracle_agreement", rel <= 1e-8, rel, f"rel. L2 distance to dense minimizer <= 1e-8 (n={n})"))

    u_norm = np.sqrt(np.einsum("kic,ij,kjc->kc", pair.u.values, model.M_U, pair.u.values, optimize=True))
    Lp = {p: float(np.max(grid.integrate(u_norm**p) ** (1 / p))) for p in (2.0, 4.0)}
    y_sup = float(np.max(model.norm_Y(np.moveaxis(pair.y.values, 0, 1))))
    finite = all(np.isfinite(v) for v in Lp.values()) and np.isfinite(y_sup)
    add(
        Verdict(
            "S1.regularity",
            finite,
            {"u_L2": Lp[2.0], "u_L4": Lp[4.0], "y_sup": y_sup},
            "finite",
            "unit initial states; finiteness is all a discretization can show",
            gating=False,
        )
    )

    # S2: exponential stability of the optimal evolution ----------------------
    fit = closed_loop_decay_fit(model, ric.A_P, grid.horizon)
    add(Verdict("S2.closed_loop_decay", fit.stable, fit.to_json_dict(), "omega1 > 0"))
    restarts = sorted({int(np.searchsorted(grid.nodes, grid.horizon / d)) for d in (64, 16, 8)})
    trans = {float(grid.nodes[j]): _transition_defect(model, grid, y0, j) for j in restarts}
    worst_t = max(trans, key=trans.get)
    add(
        Verdict(
            "S2.transition",
            trans[worst_t] <= 5e-4,
            {"max_defect": trans[worst_t], "restart_time": worst_t, "restart_times": list(trans)},
            "<= 5e-4",
            "restarts at T/64, T/16 and T/8 on the tail of the grid",
        )
    )

    # S3: optimal cost operator ------------------------------------------------
    quad = np.einsum("ic,ij,jk,kc->c", Y0, model.M_Y, ric.P, Y0, optimize=True)
    J = np.atleast_1d(pair.cost)
    s3 = float(np.max(np.abs(quad - J) / np.maximum(np.abs(J), 1e-300)))
    s3 = 0.0 if np.all(J == 0) and np.all(quad == 0) else s3
    add(Verdict("S3.cost_identity", s3 <= 1e-6, s3, "|<P y0, y0> - J(u_opt)| <= 1e-6 J(u_opt)"))
    sym_tol = 1e-9 if bounded else 1e-6
    add(Verdict("S3.symmetry", ric.symmetry_defect <= sym_tol, ric.symmetry_defect, f"<= {sym_tol:g} |P|"))
    pnorm = gram_operator_norm(ric.P, model.M_Y, model.M_Y)
    add(
        Verdict(
            "S3.nonnegative",
            ric.min_eigenvalue >= -1e-9 * pnorm,
            ric.min_eigenvalue,
            f">= -1e-9 |P| = {-1e-9 * pnorm:.3g}",
        )
    )
    alt = riccati_alternative(model, grid, ric)
    route = relative_frobenius(alt, ric.P)
    add(Verdict("S3.alternative_route", route <= 1e-6, route, "rel. Frobenius distance <= 1e-6"))
    values = np.einsum("kic,ij,jl,klc->kc", pair.y.values, model.M_Y, ric.P, pair.y.values, optimize=True)
    rise = float(np.max(np.diff(values, axis=0) / np.maximum(values[0], 1e-300)))
    add(Verdict("S3.cost_to_go_monotone", rise <= 1e-8, rise, "<P y(t), y(t)> non-increasing, slack 1e-8"))

    # S4: gain bounded on the smooth domain -------------------------------------
    smooth = gram_operator_norm(ric.K @ fractional_power(model, -epsilon), model.M_Y, model.M_U)
    raw = gram_operator_norm(ric.K, model.M_Y, model.M_U)
    if family:
        rep = gain_on_smooth_domain([m for m, _ in family], [r for _, r in family], epsilon)
        add(Verdict("S4.gain_smoothing", rep.bounded, rep.to_json_dict(), f"max/min ratio <= {rep.factor:g}"))
    else:
        add(
            Verdict(
                "S4.gain_smoothing",
                bool(np.isfinite(smooth)),
                {"smoothed": smooth, "raw": raw, "epsilon": epsilon},
                "finite",
                "no refinement family supplied",
                gating=False,
            )
        )

    # S5: closed-loop generator formula -------------------------------------------
    formula = model.A @ (np.eye(model.dim_y) - model.A_inv_B @ ric.K)
    s5 = gram_operator_norm(formula - ric.A_P, model.M_Y, model.M_Y) / max(
        gram_operator_norm(ric.A_P, model.M_Y, model.M_Y), 1e-300
    )
    add(
        Verdict(
            "S5.generator_formula",
            s5 <= 1e-10,
            s5,
            "<= 1e-10",
            "in finite dimensions the domain inclusion is automatic; only the formula is checked",
            gating=False,
        )
    )

    # S6: weighted integrability of the input kernels -------------------------------
    delta = 0.5 * min(semigroup_decay_fit(model).rate, fit.rate)
    smooth_dual = fractional_power(model, -epsilon)
    times = grid.nodes[1:]
    weights = w[1:]
    closed_steps = _stack_propagators(ric.A_P, grid.steps)
    open_stack, closed_stack = [], []
    cur_open = cur_closed = model.B
    for k in range(grid.size):
        cur_open = its.E[k] @ cur_open
        cur_closed = closed_steps[k] @ cur_closed
        open_stack.append(smooth_dual @ cur_open)
        closed_stack.append(smooth_dual @ cur_closed)
    scale = np.exp(delta * times)
    s6_open = _lp_of_kernel(model, open_stack, weights, 1.0, scale)
    s6_closed = _lp_of_kernel(model, closed_stack, weights, 1.0, scale)
    add(
        Verdict(
            "S6.input_kernels",
            bool(np.isfinite(s6_open) and np.isfinite(s6_closed)),
            {"open": s6_open, "closed": s6_closed, "delta": delta, "p": 1.0},
            "finite",
            "weighted L^1 norms of (-A)^-eps e^{At}B and (-A)^-eps Phi(t)B",
            gating=False,
        )
    )

    # S7: algebraic Riccati equation ---------------------------------------------------
    res = are_residual(model, ric.P, probe_count=20, seed=seed)
    ident = riccati_identity_defect(model, ric.P)
    add(Verdict("S7.are_residual", res <= are_tol, res, f"normalized probe residual <= {are_tol:g}"))
    add(Verdict("S7.riccati_identity", ident <= are_tol, ident, f"normalized operator defect <= {are_tol:g}"))

    # S8: improved regularity from smooth initial states ----------------------------------
    z = rng.standard_normal(model.dim_y)
    x = smooth_dual @ (z / model.norm_Y(z))
    sp = optimal_pair(model, grid, x)
    un = np.sqrt(np.einsum("ki,ij,kj->k", sp.u.values, model.M_U, sp.u.values, optimize=True))
    lifted = fractional_power(model, epsilon) @ sp.y.values.T
    s8 = {
        "u_L1": float(grid.integrate(un)),
        "u_sup": float(np.max(un)),
        "y_smooth_sup": float(np.max(model.norm_Y(lifted))),
    }
    add(
        Verdict(
            "S8.smooth_regularity",
            all(np.isfinite(v) for v in s8.values()),
            s8,
            "finite",
            "initial state (-A)^-eps z with |z| = 1",
            gating=False,
        )
    )

    # S9: pointwise feedback ------------------------------------------------------------
    q_err = scalar_quadrature_error(grid.scheme)
    fb = feedback_check(model, grid, ric, y0)
    add(
        Verdict(
            "S9.feedback",
            fb.feedback_defect <= 5 * q_err,
            fb.to_json_dict(),
            f"max node defect <= 5 x scalar quadrature error = {5 * q_err:.3g}",
        )
    )

    # closed-loop derivative formula ---------------------------------------------------
    d_tol = 1e-6 if bounded else 1e-4
    der = derivative_check(model, grid, ric, seed=seed)
    add(Verdict("derivative_formula", der.max_defect <= d_tol, der.max_defect, f"<= {d_tol:g}"))
    return out
