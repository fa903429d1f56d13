import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from contrastive_dynamics.cli import EXIT_FAIL, EXIT_OK, EXIT_SPEC, main
from contrastive_dynamics.lemma_checks import load_constants


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], float)


def test_train_with_zero_step_keeps_loss(tmp_path):
    assert main(["train", "--preset", "fixed-point", "--eta", "0", "--T2", "5", "--stride", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    header, a = read_csv(tmp_path / "trajectory.csv")
    loss = a[:, header.index("loss")]
    assert len(loss) == 6 and np.all(loss == loss[0])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "ok" and len(summary["spec_hash"]) == 64
    assert (tmp_path / "stage_report.json").exists() and (tmp_path / "final_state.npz").exists()


def test_invalid_spec_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"d": 4, "r": 2, "m": 3}, "schedule": {}, "colour": 1}))
    assert main(["train", str(bad), "--out", str(tmp_path / "o")]) == EXIT_SPEC
    assert "unknown spec fields" in capsys.readouterr().err
    r_gt_d = tmp_path / "rd.json"
    r_gt_d.write_text(json.dumps({"model": {"d": 2, "r": 3, "m": 3}, "schedule": {"T2": 2}}))
    assert main(["train", str(r_gt_d), "--out", str(tmp_path / "o")]) == EXIT_SPEC
    assert main(["train", "--out", str(tmp_path / "o")]) == EXIT_SPEC
    assert main(["train", str(tmp_path / "missing.json")]) == EXIT_SPEC


def test_verify_subset(tmp_path):
    assert main(["verify", "--only", "stage1-q1", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "audit.json").read_text())
    assert doc["passed"] and list(doc["groups"]) == ["stage1-q1"]


def test_verify_with_corrupted_constants(tmp_path):
    doc = load_constants()
    doc["stage1_q1"]["C"] = 1e-9
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert main(["verify", "--only", "stage1-q1", "--constants", str(path),
                 "--out", str(tmp_path)]) == EXIT_FAIL


def test_iw_fixed_point(tmp_path):
    assert main(["iw", "--preset", "fixed-point", "--out", str(tmp_path)]) == EXIT_OK
    header, a = read_csv(tmp_path / "iw_trajectory.csv")
    k = a[:, [i for i, h in enumerate(header) if h.startswith("kappa_sq_")]]
    assert np.max(np.abs(k - 1)) < 1e-12


def test_iw_halving_reports_order(tmp_path):
    assert main(["iw", "--preset", "fixed-point", "--halving", "--out", str(tmp_path)]) == EXIT_OK
    s = json.loads((tmp_path / "iw_summary.json").read_text())
    assert s["convergence"]["diff_h"] == 0 and s["convergence"]["order"] is None


def test_iw_order_on_moving_state(tmp_path):
    spec = {"name": "moving", "model": {"d": 5, "r": 3, "m": 4, "sigma_sq": [1.5, 1.0, 1.0],
                      "sigma_xi_sq": 0.1, "K": 1.0},
            "schedule": {"eta": 0.5, "tau0_sq": 1.0, "T1": 0, "T2": 8, "batch": "population"},
            "iw": {"h": 0.5, "T": 4.0, "kappa_sq": [0.5, 1.0, 2.0], "hat_kappa_sq": [0.2, 0.8, 1.5]}}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    assert main(["iw", str(path), "--halving", "--out", str(tmp_path / "o")]) == EXIT_OK
    order = json.loads((tmp_path / "o" / "iw_summary.json").read_text())["convergence"]["order"]
    assert 3.7 < order < 4.3


def test_output_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("CONTRASTIVE_DYNAMICS_OUT", str(tmp_path))
    assert main(["train", "--preset", "fixed-point", "--T2", "2"]) == EXIT_OK
    assert (tmp_path / "fixed-point" / "trajectory.csv").exists()


def test_figure_bundle_short(tmp_path):
    assert main(["figure", "--T2", "2", "--mc", "128", "--stride", "1",
                 "--only", "figure-noncontrastive", "figure-contrastive-switch",
                 "--out", str(tmp_path)]) == EXIT_OK
    s = json.loads((tmp_path / "figure_summary.json").read_text())
    assert set(s["runs"]) == {"figure-noncontrastive", "figure-contrastive-switch"}
    assert (tmp_path / "figure.csv").exists()
    header, a = read_csv(tmp_path / "figure-contrastive-switch" / "trajectory.csv")
    assert a.shape[0] == 3 and header[0] == "step"


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "contrastive_dynamics", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "verify" in out.stdout
