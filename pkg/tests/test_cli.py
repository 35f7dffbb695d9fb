import json
import math

import pytest

from vecspin.cli import main

SK_CONFIG = """
seed: 99
model:
  kappa: 1
  coefficients:
    2: [0.5]
prior:
  atoms:
    - point: [1.0]
      weight: 1.0
    - point: [-1.0]
      weight: 1.0
path:
  x: [1.0]
  gammas:
    - [[1.0]]
lambda: [0.0]
constraint:
  d: [[1.0]]
  epsilon: 0.1
eval:
  backend: quadrature
  nodes_per_level: 16
"""

RPC_CONFIG = """
seed: 7
model:
  kappa: 1
  coefficients:
    2: [0.5]
prior:
  atoms:
    - point: [1.0]
      weight: 1.0
    - point: [-1.0]
      weight: 1.0
path:
  x: [0.5]
  gammas:
    - [[1.0]]
rpc:
  fanout: 64
  replications: 60
  m_sites: 20
"""

FE_CONFIG = """
seed: 3
model:
  kappa: 1
  coefficients:
    2: [0.3]
prior:
  atoms:
    - point: [1.0]
      weight: 0.5
    - point: [-1.0]
      weight: 0.5
constraint:
  d: [[1.0]]
  epsilon: 0.5
system:
  n_sites: 4
  n_disorder: 40
perturbation:
  terms:
    - p: 1
      ns: [1]
      lambdas: [[1.0]]
  u: [1.5]
gg:
  n_replicas: 2
  functional: entry_00
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


class TestValidateAndParisi:
    def test_validate_ok(self, tmp_path, capsys):
        code, report = run(capsys, "validate", "--config", write(tmp_path, SK_CONFIG))
        assert code == 0
        assert report["command"] == "validate"
        assert any("summability" in w for w in report["warnings"])

    def test_parisi_value(self, tmp_path, capsys):
        code, report = run(capsys, "parisi", "--config", write(tmp_path, SK_CONFIG))
        assert code == 0
        assert report["value"] == pytest.approx(math.log(2) + 0.25 - 0.125, abs=1e-9)
        assert report["std_error"] == 0.0
        assert report["components"]["theta_term"] == pytest.approx(0.125, abs=1e-12)

    def test_phi_and_phistar(self, tmp_path, capsys):
        cfg = write(tmp_path, SK_CONFIG)
        code, report = run(capsys, "phi", "--config", cfg)
        assert code == 0
        assert report["value"] == pytest.approx(math.log(2) + 0.25, abs=1e-9)
        code, report = run(capsys, "phistar", "--config", cfg)
        assert code == 0
        # sigma^2 = 1 makes the objective flat in lambda, equal to phi(0) - D
        assert report["value"] == pytest.approx(math.log(2) + 0.25, abs=1e-9)
        assert report["components"]["converged"]


class TestChecksAndReports:
    def test_rpc_check_passes(self, tmp_path, capsys):
        code, report = run(capsys, "rpc-check", "--config", write(tmp_path, RPC_CONFIG))
        assert code == 0
        names = {c["name"] for c in report["checks"]}
        assert names == {"simulate_phi_vs_recursion", "y_functional_vs_closed_form"}
        assert all(c["pass"] for c in report["checks"])

    def test_fe_and_cov_and_gg(self, tmp_path, capsys):
        cfg = write(tmp_path, FE_CONFIG)
        code, report = run(capsys, "fe", "--config", cfg)
        assert code == 0
        assert report["std_error"] > 0
        code, report = run(capsys, "fe-constrained", "--config", cfg)
        assert code == 0
        assert report["components"]["hit_fraction"] == pytest.approx(1.0)
        code, report = run(capsys, "cov-check", "--config", cfg)
        assert code == 0
        assert all(c["pass"] for c in report["checks"])
        code, report = run(capsys, "gg", "--config", cfg)
        assert code == 0
        assert report["value"] >= 0.0

    def test_report_schema(self, tmp_path, capsys):
        code, report = run(capsys, "parisi", "--config", write(tmp_path, SK_CONFIG))
        assert set(report) == {
            "command", "config_digest", "seed", "backend", "value", "std_error",
            "components", "checks", "warnings", "runtime_ms",
        }

    def test_out_file(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["parisi", "--config", write(tmp_path, SK_CONFIG),
                     "--out", str(out)])
        assert code == 0
        assert json.loads(out.read_text())["command"] == "parisi"


class TestDeterminism:
    def test_threads_do_not_change_output(self, tmp_path, capsys):
        cfg = write(tmp_path, FE_CONFIG)
        reports = []
        for threads in ("1", "8"):
            code, report = run(capsys, "fe", "--config", cfg, "--threads", threads)
            assert code == 0
            report.pop("runtime_ms")
            reports.append(report)
        assert reports[0] == reports[1]

    def test_seed_override_changes_digest_not_schema(self, tmp_path, capsys):
        cfg = write(tmp_path, FE_CONFIG)
        _, r1 = run(capsys, "fe", "--config", cfg, "--seed", "123")
        _, r2 = run(capsys, "fe", "--config", cfg, "--seed", "123")
        r1.pop("runtime_ms")
        r2.pop("runtime_ms")
        assert r1 == r2
        assert r1["seed"] == 123


class TestExitCodes:
    def test_missing_file(self, capsys):
        assert main(["validate", "--config", "/no/such/file.yaml"]) == 2

    def test_unparsable(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("model: [unclosed")
        assert main(["validate", "--config", str(p)]) == 2

    def test_validation_failure(self, tmp_path, capsys):
        bad = SK_CONFIG.replace("2: [0.5]", "3: [0.5]")
        assert main(["validate", "--config", write(tmp_path, bad, "bad.yaml")]) == 3

    def test_budget_failure(self, tmp_path, capsys):
        big = FE_CONFIG.replace("n_sites: 4", "n_sites: 28")
        assert main(["fe", "--config", write(tmp_path, big, "big.yaml")]) == 4

    def test_infeasible_constraint(self, tmp_path, capsys):
        bad = FE_CONFIG.replace("d: [[1.0]]", "d: [[0.0]]")
        assert main(["fe-constrained", "--config", write(tmp_path, bad, "inf.yaml")]) == 4
