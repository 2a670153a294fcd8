import json
import math

import numpy as np
import pytest

from boundary_lq import cli
from boundary_lq.errors import ConvergenceError
from boundary_lq.fixtures import random_bounded_model
from boundary_lq.io_utils import dumps


def run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr()


def test_solve_scalar(tmp_path, capsys):
    code, out = run(capsys, "solve", "--fixture", "scalar", "--nodes", "1024", "--out", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "solve.json").read_text())
    assert abs(report["P_scalar"] - (math.sqrt(2) - 1)) <= 1e-4
    assert report["passed"] and report["riccati"]["residual_DA"] is not None
    assert (tmp_path / "u_hat.csv").read_text().startswith("t,")
    assert "cost_identity" in out.out


def test_malformed_model_names_field(tmp_path, capsys):
    model = random_bounded_model(0)
    doc = model.to_json_dict()
    doc["R"] = [[1.0, "x"]]
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    code, out = run(capsys, "solve", "--model", str(path), "--out", str(tmp_path))
    assert code == 2
    err = json.loads(out.err)
    assert err["error"] == "validation" and err["field"] == "R"
    assert json.loads((tmp_path / "error.json").read_text())["field"] == "R"


@pytest.mark.parametrize(
    "argv, field",
    [
        (["solve", "--fixture", "scalar", "--nodes", "-3"], "nodes"),
        (["solve", "--fixture", "nope"], "fixture"),
        (["verify", "--fixture", "scalar", "--q", "2.5"], "q"),
        (["verify", "--fixture", "scalar", "--refinements", "1"], "refinements"),
        (["solve", "--model", "/nonexistent.json"], "model"),
        (["solve"], "arguments"),
    ],
)
def test_validation_exit_code(argv, field, tmp_path, capsys):
    code, out = run(capsys, *argv, "--out", str(tmp_path))
    assert code == 2
    assert json.loads(out.err)["field"] == field


def test_thread_variable_validated(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RH_THREADS", "zero")
    code, out = run(capsys, "compare", "--fixture", "zero-R", "--out", str(tmp_path))
    assert code == 2 and json.loads(out.err)["field"] == "RH_THREADS"
    monkeypatch.setenv("RH_THREADS", "1")
    assert run(capsys, "compare", "--fixture", "zero-R", "--out", str(tmp_path))[0] == 0


def test_numerical_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(cfg):
        raise ConvergenceError("did not converge", {"iterations": 50})

    monkeypatch.setitem(cli.COMMANDS, "solve", boom)
    code, out = run(capsys, "solve", "--fixture", "scalar", "--out", str(tmp_path))
    assert code == 3
    err = json.loads(out.err)
    assert err["error"] == "numerical" and err["diagnostics"] == {"iterations": 50}


def test_linalg_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(cfg):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setitem(cli.COMMANDS, "compare", boom)
    assert run(capsys, "compare", "--fixture", "scalar", "--out", str(tmp_path))[0] == 3


def test_compare_zero_R(tmp_path, capsys):
    code, _ = run(capsys, "compare", "--fixture", "zero-R", "--out", str(tmp_path))
    report = json.loads((tmp_path / "compare.json").read_text())
    assert code == 0 and report["all_zero"] and report["passed"]


def test_compare_scalar(tmp_path, capsys):
    code, _ = run(capsys, "compare", "--fixture", "scalar", "--out", str(tmp_path))
    report = json.loads((tmp_path / "compare.json").read_text())
    assert code == 0
    assert all(p["difference"] <= 1e-6 for p in report["pairs"])


def test_simulate_open_loop_for_zero_R(tmp_path, capsys):
    code, _ = run(capsys, "simulate", "--fixture", "zero-R", "--nodes", "512", "--out", str(tmp_path))
    report = json.loads((tmp_path / "simulate.json").read_text())
    assert code == 0 and report["feedback"] == "none (K = 0)"
    assert {c["item"] for c in report["checks"]} == {"omega1_positive", "open_loop_nonincreasing"}
    header = (tmp_path / "energy.csv").read_text().splitlines()[0]
    assert header == "t,E_open,E_closed"


def test_simulate_scalar_summary(tmp_path, capsys):
    code, _ = run(capsys, "simulate", "--fixture", "scalar", "--nodes", "512", "--out", str(tmp_path))
    report = json.loads((tmp_path / "simulate.json").read_text())
    assert code == 0
    assert report["summary"]["omega1"]["rate"] > 0
    # closed loop of the scalar model decays like exp(-2 sqrt(2) t)
    assert report["final_to_initial_energy"] < 1e-20


def test_verify_bounded_json_model_marks_decomposition_skipped(tmp_path, capsys):
    path = tmp_path / "m.json"
    path.write_text(dumps(random_bounded_model(3).to_json_dict()))
    code, _ = run(capsys, "verify", "--model", str(path), "--nodes", "2048", "--out", str(tmp_path))
    report = json.loads((tmp_path / "verify.json").read_text())
    rows = {v["item"]: v for v in report["hypotheses"]["verdicts"]}
    assert rows["decomposition"]["threshold"] == "skipped" and not rows["decomposition"]["gating"]
    assert code == 0, [v["item"] for v in report["hypotheses"]["verdicts"] if not v["passed"]]


def test_verify_zero_R(tmp_path, capsys):
    code, _ = run(capsys, "verify", "--fixture", "zero-R", "--out", str(tmp_path))
    report = json.loads((tmp_path / "verify.json").read_text())
    assert code == 0 and report["passed"]
    assert (tmp_path / "F_samples.csv").exists()


def test_verify_fault_fixture_fails(tmp_path, capsys):
    code, _ = run(capsys, "verify", "--fixture", "random5-synthG", "--nodes", "1024", "--out", str(tmp_path))
    report = json.loads((tmp_path / "verify.json").read_text())
    assert code == 1 and not report["passed"]
