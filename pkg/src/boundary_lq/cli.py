"""Command-line entry point: ``boundary-lq {solve,verify,compare,simulate}``.

Reports are deterministic JSON (sorted keys, no timestamps or timings) written
atomically into ``--out``.  Exit codes: 0 success, 1 a verdict or tolerance
failed, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError
from .fixtures import SHIPPED, FAULTS, Fixture, build_fixture, refinement_family
from .hypotheses import (
    DecompositionSupplier,
    HypothesisReport,
    Verdict,
    fit_singular_estimate,
    hypothesis_report,
    singular_estimate_passed,
    trivial_supplier,
)
from .io_utils import dumps, write_json_atomic, write_text_atomic
from .lq import (
    are_residual,
    direct_minimization_oracle,
    feedback_check,
    optimal_pair,
    relative_frobenius,
    riccati_alternative,
    riccati_assemble,
    riccati_newton_kleinman,
)
from .model import StateSpaceModel, choose_horizon, load_model
from .thermoplate import simulate_closed_loop
from .trajectory import build_grid, perturbation_probe, write_trajectory_csv
from .verification import ORACLE_NODES, statement_suite

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3
HYPOTHESIS_HORIZON = 1.0
HYPOTHESIS_NODES = 256
FIT_NODES = 512


@dataclass
class RunConfig:
    command: str
    fixture: str | None = None
    model_path: str | None = None
    horizon: float | None = None
    nodes: int | None = None
    grading: float = 3.0
    eps: list[float] = field(default_factory=lambda: [0.02, 0.05, 0.1])
    q: list[float] = field(default_factory=lambda: [1.2, 1.5, 1.8])
    tol: float | None = None
    seed: int = 0
    out: Path = Path("out")
    refinements: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "command": self.command,
            "fixture": self.fixture,
            "model": self.model_path,
            "horizon": self.horizon,
            "nodes": self.nodes,
            "grading": self.grading,
            "eps": self.eps,
            "q": self.q,
            "tol": self.tol,
            "seed": self.seed,
            "refinements": self.refinements,
        }


def _positive(kind, name):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a {kind.__name__}, got {text!r}") from None
        if not value > 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {text!r}")
        return value

    return parse


class _Parser(argparse.ArgumentParser):
    """Turns usage errors into :class:`ValidationError` so they share the JSON error path."""

    def error(self, message: str):
        m = re.search(r"argument (--[\w-]+)", message)
        raise ValidationError(message, field=m.group(1).lstrip("-") if m else "arguments")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="boundary-lq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("solve", "optimal pair, Riccati operator and feedback gain"),
        ("verify", "hypothesis checks and the S1..S9 statement suite"),
        ("compare", "pairwise agreement of the Riccati routes"),
        ("simulate", "open- and closed-loop energy decay"),
    ):
        p = sub.add_parser(name, help=text)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--fixture", choices=SHIPPED + FAULTS)
        src.add_argument("--model", dest="model_path", metavar="JSON")
        p.add_argument("--horizon", type=_positive(float, "horizon"))
        p.add_argument("--nodes", type=_positive(int, "nodes"), help="number of subintervals")
        p.add_argument("--grading", type=_positive(float, "grading"), default=3.0)
        p.add_argument("--eps", type=_positive(float, "eps"), action="append")
        p.add_argument("--q", type=_positive(float, "q"), action="append")
        p.add_argument("--tol", type=_positive(float, "tol"))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--refinements", type=_positive(int, "refinements"))
    return parser


def parse_config(argv: list[str] | None = None) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = RunConfig(
        command=ns.command,
        fixture=ns.fixture,
        model_path=ns.model_path,
        horizon=ns.horizon,
        nodes=ns.nodes,
        grading=ns.grading,
        tol=ns.tol,
        seed=ns.seed,
        out=ns.out,
        refinements=ns.refinements,
    )
    if ns.eps:
        cfg.eps = sorted(set(ns.eps))
    if ns.q:
        cfg.q = sorted(set(ns.q))
    for q in cfg.q:
        if not 1.0 < q < 2.0:
            raise ValidationError(f"q must lie in (1, 2), got {q:g}", field="q")
    if cfg.refinements is not None and cfg.refinements < 2:
        raise ValidationError("refinements must be at least 2", field="refinements")
    return cfg


# ---------------------------------------------------------------------------
# model source


def load_fixture(cfg: RunConfig) -> Fixture:
    if cfg.fixture is not None:
        return build_fixture(cfg.fixture, horizon=cfg.horizon, nodes=cfg.nodes, grading=cfg.grading)
    path = Path(cfg.model_path)
    if not path.is_file():
        raise ValidationError(f"model file {str(path)!r} not found", field="model")
    model = load_model(path)
    T = cfg.horizon or choose_horizon(model)
    grid = build_grid(float(T), cfg.nodes or 1024, cfg.grading)
    return Fixture(name=path.stem, model=model, grid=grid, supplier=trivial_supplier(model))


def _grid_info(fx: Fixture) -> dict:
    g = fx.grid
    return {"horizon": g.horizon, "subintervals": g.size, "grading": g.grading, "scheme": g.scheme}


def _table(rows: list[tuple[str, str, str]]) -> str:
    width = max(len(r[0]) for r in rows) if rows else 0
    return "\n".join(f"{a:<{width}}  {b:<5}  {c}" for a, b, c in rows)


def _verdict_rows(verdicts: list[Verdict]) -> list[tuple[str, str, str]]:
    rows = []
    for v in verdicts:
        status = ("PASS" if v.passed else "FAIL") if v.gating else ("info" if v.passed else "warn")
        measured = v.measured
        if isinstance(measured, float):
            measured = f"{measured:.3e}"
        rows.append((v.item, status, f"{measured}  [{v.threshold}]"))
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig) -> int:
    fx = load_fixture(cfg)
    model, grid = fx.model, fx.grid
    tol = cfg.tol if cfg.tol is not None else 1e-5
    ric = riccati_assemble(model, grid, probes=10, seed=cfg.seed)
    ric.residual_DA = are_residual(model, ric.P, seed=cfg.seed)
    y0 = np.random.default_rng(cfg.seed).standard_normal(model.dim_y)
    y0 = y0 / model.norm_Y(y0)
    pair = optimal_pair(model, grid, y0)
    fb = feedback_check(model, grid, ric, y0)
    sym_tol = 1e-9 if fx.bounded else 1e-6
    checks = [
        Verdict("cost_identity", ric.cost_identity_defect <= 1e-6, ric.cost_identity_defect, "<= 1e-6"),
        Verdict("symmetry", ric.symmetry_defect <= sym_tol, ric.symmetry_defect, f"<= {sym_tol:g}"),
        Verdict("are_residual", ric.residual_DA <= tol, ric.residual_DA, f"<= {tol:g}"),
        Verdict("feedback", True, fb.to_json_dict(), "reported", "see verify for the gated check", gating=False),
    ]
    passed = all(v.passed for v in checks if v.gating)
    report = {
        "command": "solve",
        "config": cfg.to_json_dict(),
        "model": model.name,
        "grid": _grid_info(fx),
        "riccati": ric.to_json_dict(),
        "optimal_cost": pair.cost,
        "checks": [v.to_json_dict() for v in checks],
        "passed": passed,
    }
    if model.dim_y == 1:
        report["P_scalar"] = float(ric.P[0, 0])
    write_json_atomic(cfg.out / "solve.json", report)
    write_trajectory_csv(cfg.out / "u_hat.csv", pair.u, "u")
    write_trajectory_csv(cfg.out / "y_hat.csv", pair.y, "y")
    print(_table(_verdict_rows(checks)))
    return EXIT_OK if passed else EXIT_FAIL


def _hypothesis_family(cfg: RunConfig, fx: Fixture) -> tuple[list[Fixture], list[tuple[StateSpaceModel, DecompositionSupplier]]]:
    if cfg.fixture is None:
        return [fx], [(fx.model, fx.supplier)]
    members = refinement_family(cfg.fixture, count=cfg.refinements or 3, nodes=cfg.nodes, grading=cfg.grading)
    return members, [(m.model, m.supplier) for m in members]


def _short_grids(members: list[Fixture], cfg: RunConfig):
    """Grids on ``[0, 1]`` for the hypothesis checks.

    A PDE family refines in space and keeps the time grid.  A bounded family
    is one model refined in time, so its short grids refine with it.
    """
    count = len(members)
    if count > 1 and all(m.bounded for m in members):
        sizes = [max(HYPOTHESIS_NODES // 2 ** (count - 1 - i), 16) for i in range(count)]
    else:
        sizes = [HYPOTHESIS_NODES] * count
    return [build_grid(HYPOTHESIS_HORIZON, n, cfg.grading) for n in sizes]


def cmd_verify(cfg: RunConfig) -> int:
    fx = load_fixture(cfg)
    members, family = _hypothesis_family(cfg, fx)
    short = _short_grids(members, cfg)
    finest = members[-1]
    with_decomposition = cfg.fixture is not None
    fit_grid = build_grid(finest.grid.horizon, FIT_NODES, cfg.grading) if with_decomposition else None
    hyp: HypothesisReport = hypothesis_report(
        family, short, fit_grid, epsilons=cfg.eps, q_list=cfg.q, probe_count=8, seed=cfg.seed
    )
    if not with_decomposition:
        hyp.verdicts.append(
            Verdict("decomposition", True, None, "skipped", "no decomposition supplier for a generic model", gating=False)
        )
    probe = perturbation_probe(members[0].model, short[0], seed=cfg.seed)
    hyp.verdicts.append(
        Verdict(
            "perturbation_probe",
            probe.monotone and probe.vanishing,
            probe.to_json_dict(),
            "norms shrink with delta at order > 0.5",
            "|L*_{A-d} R*R L_{A+d} - L*R*RL| on the coarsest member",
            gating=False,
        )
    )

    # S4 uses the exact discrete Riccati operator of every family member
    gain_family = None
    if len(members) > 1:
        gain_family = [(m.model, riccati_newton_kleinman(m.model)) for m in members]
    suite = statement_suite(
        fx.model,
        fx.grid,
        bounded=fx.bounded,
        epsilon=0.1 if 0.1 in cfg.eps else max(cfg.eps),
        seed=cfg.seed,
        family=gain_family,
        are_tol=cfg.tol if cfg.tol is not None else 1e-5,
    )
    passed = hyp.passed and suite.passed
    report = {
        "command": "verify",
        "config": cfg.to_json_dict(),
        "model": fx.model.name,
        "grid": _grid_info(fx),
        "hypotheses": hyp.to_json_dict(),
        "statements": suite.to_json_dict(),
        "passed": passed,
    }
    write_json_atomic(cfg.out / "verify.json", report)
    if hyp.F_samples is not None:
        times, norms = hyp.F_samples
        lines = ["t,F_norm"] + [f"{t:.17g},{n:.17g}" for t, n in zip(times, norms)]
        write_text_atomic(cfg.out / "F_samples.csv", "\n".join(lines) + "\n")
    if cfg.refinements:
        write_json_atomic(cfg.out / "gamma_table.json", gamma_table(members, cfg))
    print(_table(_verdict_rows(hyp.verdicts + suite.verdicts)))
    print(f"overall: {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAIL


def gamma_table(members: list[Fixture], cfg: RunConfig) -> dict:
    """Fitted singular exponent per refinement level and its level-to-level drift."""
    rows = []
    for m in members:
        fit = fit_singular_estimate(m.supplier, build_grid(m.grid.horizon, FIT_NODES, cfg.grading))
        rows.append({"model": m.model.name, "dim_y": m.model.dim_y, "fit": fit.to_json_dict(), "passed": singular_estimate_passed(fit)})
    gammas = [r["fit"]["singularity_exponent"] for r in rows]
    drift = [abs(b - a) for a, b in zip(gammas, gammas[1:])]
    return {"levels": rows, "gamma_drift": drift, "stable_within_0.05": bool(drift and max(drift) <= 0.05)}


def cmd_compare(cfg: RunConfig) -> int:
    fx = load_fixture(cfg)
    model, grid = fx.model, fx.grid
    tol = cfg.tol if cfg.tol is not None else 1e-6
    var = riccati_assemble(model, grid, probes=0)
    routes = {
        "variational": var.P,
        "alternative": riccati_alternative(model, grid, var),
        "newton_kleinman": riccati_newton_kleinman(model).P,
    }
    # the dense minimizer is compared through the optimal cost it attains
    oracle_grid = grid if grid.size <= ORACLE_NODES else build_grid(grid.horizon, ORACLE_NODES, grid.grading)
    Y0 = np.random.default_rng(cfg.seed).standard_normal((model.dim_y, 4))
    dense = np.atleast_1d(direct_minimization_oracle(model, oracle_grid, Y0).cost)
    short = np.atleast_1d(optimal_pair(model, oracle_grid, Y0).cost)
    names = list(routes)
    matrix = {a: {b: relative_frobenius(routes[a], routes[b]) for b in names} for a in names}
    cost_gap = float(np.max(np.abs(dense - short) / np.maximum(np.abs(dense), 1e-300)))
    if np.all(dense == 0) and np.all(short == 0):
        cost_gap = 0.0
    pairs = [(a, b, matrix[a][b]) for i, a in enumerate(names) for b in names[i + 1 :]]
    pairs.append(("variational", "direct_minimization", cost_gap))
    passed = all(d <= tol for *_, d in pairs)
    report = {
        "command": "compare",
        "config": cfg.to_json_dict(),
        "model": model.name,
        "grid": _grid_info(fx),
        "oracle_subintervals": oracle_grid.size,
        "tolerance": tol,
        "relative_frobenius": matrix,
        "pairs": [{"a": a, "b": b, "difference": d, "passed": d <= tol} for a, b, d in pairs],
        "all_zero": bool(all(not np.any(P) for P in routes.values())),
        "passed": passed,
    }
    write_json_atomic(cfg.out / "compare.json", report)
    print(_table([(f"{a} vs {b}", "PASS" if d <= tol else "FAIL", f"{d:.3e}  [<= {tol:g}]") for a, b, d in pairs]))
    return EXIT_OK if passed else EXIT_FAIL


def cmd_simulate(cfg: RunConfig) -> int:
    fx = load_fixture(cfg)
    model, grid = fx.model, fx.grid
    ric = None if not np.any(model.R) else riccati_assemble(model, grid, probes=0)
    y0 = np.random.default_rng(cfg.seed).standard_normal(model.dim_y)
    y0 = y0 / model.norm_Y(y0)
    run = simulate_closed_loop(fx.ops, model, ric, y0, grid)
    summary = run.summary()
    decay_ratio = summary["final_energy_closed"] / summary["initial_energy"]
    checks = [Verdict("omega1_positive", run.omega1.stable, run.omega1.rate, "> 0")]
    if ric is None:
        rises = float(np.max(np.diff(run.E_open)) / run.E_open[0])
        checks.append(Verdict("open_loop_nonincreasing", rises <= 1e-12, rises, "relative rise <= 1e-12"))
    report = {
        "command": "simulate",
        "config": cfg.to_json_dict(),
        "model": model.name,
        "grid": _grid_info(fx),
        "feedback": "none (K = 0)" if ric is None else "variational",
        "summary": summary,
        "final_to_initial_energy": decay_ratio,
        "checks": [v.to_json_dict() for v in checks],
        "passed": all(v.passed for v in checks),
    }
    if cfg.refinements and cfg.fixture is not None:
        members = refinement_family(cfg.fixture, count=cfg.refinements, nodes=cfg.nodes, grading=cfg.grading)
        report["gamma_table"] = gamma_table(members, cfg)
    write_json_atomic(cfg.out / "simulate.json", report)
    run.write_energy_csv(cfg.out / "energy.csv")
    write_trajectory_csv(cfg.out / "y_closed.csv", run.closed_loop, "y")
    rows = _verdict_rows(checks) + [("omega_open", "info", f"{run.omega_open.rate:.4g}"), ("E(T)/E(0)", "info", f"{decay_ratio:.3e}")]
    print(_table(rows))
    return EXIT_OK if report["passed"] else EXIT_FAIL


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "compare": cmd_compare, "simulate": cmd_simulate}


def _error_report(out: Path | None, kind: str, exc: Exception, extra: dict) -> None:
    doc = {"error": kind, "message": str(exc), **extra}
    sys.stderr.write(dumps(doc))
    if out is not None:
        try:
            write_json_atomic(out / "error.json", doc)
        except OSError:
            pass


def _thread_limit():
    raw = os.environ.get("RH_THREADS")
    if raw is None:
        return None
    try:
        count = int(raw)
    except ValueError:
        raise ValidationError(f"RH_THREADS must be an integer, got {raw!r}", field="RH_THREADS") from None
    if count < 1:
        raise ValidationError("RH_THREADS must be at least 1", field="RH_THREADS")
    return count


def main(argv: list[str] | None = None) -> int:
    cfg = None
    try:
        cfg = parse_config(argv)
        threads = _thread_limit()
        if threads is None:
            return COMMANDS[cfg.command](cfg)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[cfg.command](cfg)
    except ValidationError as exc:
        _error_report(cfg.out if cfg else None, "validation", exc, {"field": exc.field})
        return EXIT_INVALID
    except NumericalError as exc:
        _error_report(cfg.out if cfg else None, "numerical", exc, {"diagnostics": exc.diagnostics})
        return EXIT_NUMERICAL
    except np.linalg.LinAlgError as exc:
        _error_report(cfg.out if cfg else None, "numerical", exc, {})
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
