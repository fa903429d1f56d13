import json
import math

import numpy as np
import pytest

from contrastive_dynamics import lemma_checks as lc
from contrastive_dynamics.model import ContractError, compute_kstate


@pytest.fixture(scope="module")
def stage1():
    cfg, w, enc = lc.stage1_instance(1)
    return cfg, w, enc, compute_kstate(w, enc)


def test_stage1_error_vanishes_at_zero_temperature(stage1):
    cfg, _, _, ks = stage1
    _, _, err = lc.stage1_q1_error(ks, 0.0, cfg.K)
    assert err == 0.0


def test_stage1_error_is_linear_in_tau_sq(stage1):
    cfg, _, _, ks = stage1
    e1 = lc.stage1_q1_error(ks, 1e-4, cfg.K)[2]
    e2 = lc.stage1_q1_error(ks, 2e-4, cfg.K)[2]
    assert 1.9 < e2 / e1 < 2.1


def test_stage1_rejects_large_temperature(stage1):
    cfg, _, _, ks = stage1
    with pytest.raises(ContractError):
        lc.audit_stage1_q1(ks, 0.1, cfg.K)


def test_ideal_state_audits_are_tight():
    ks = lc.ideal_kstate(lc.IDEAL_KAPPA)
    for audit in (lc.audit_stage2_q1_diag, lc.audit_stage2_q0):
        rep = audit(ks, 1.0)
        assert rep.passed and rep.error <= 1e-6
    big = lc.audit_stage2_q1_diag(ks, 1e3)
    assert big.passed and big.detail["S_tilde"] < 0.01


def test_q0_identity_at_zero_temperature():
    rep = lc.audit_stage2_q0(lc.ideal_kstate(lc.IDEAL_KAPPA), 1.0, tau_sq=0.0)
    assert rep.error < 1e-12


def test_non_orthogonal_state_is_inapplicable(medium):
    _, _, _, ks = medium
    rep = lc.audit_stage2_q1_diag(ks, 1.0)
    assert rep.status == "inapplicable" and not rep.passed


def test_noncontrastive_equivalence(stage1):
    cfg, w, enc, _ = stage1
    rep = lc.audit_noncontrastive_equivalence(w, enc, cfg.K)
    assert rep.passed and rep.error < 1e-6


def test_gronwall_analytic_audit():
    assert lc.audit_gronwall_analytic().passed
    assert lc.audit_gronwall_analytic(X0=0.3, Y0=2.0, A=0.5, beta=3.0, T=20.0).passed


def test_audits_are_deterministic(stage1):
    cfg, _, _, ks = stage1
    a = lc.audit_stage1_q1(ks, 1e-3, cfg.K).as_dict()
    b = lc.audit_stage1_q1(ks, 1e-3, cfg.K).as_dict()
    assert json.dumps(a) == json.dumps(b)


def _write_constants(tmp_path, value):
    doc = lc.load_constants()
    doc["stage1_q1"]["C"] = value
    path = tmp_path / "constants.json"
    path.write_text(json.dumps(doc))
    return path


def test_corrupted_constant_fails(tmp_path):
    path = _write_constants(tmp_path, 1e-9)
    reports = lc.run_battery(only=["stage1-q1"], constants_path=path)["stage1-q1"]
    assert any(r.status == "fail" for r in reports)
    # tau = 0 has zero error, so it still passes
    assert all(r.passed for r in reports if r.detail.get("tau_sq") == 0.0)


def test_nan_constant_is_inconclusive(tmp_path):
    path = _write_constants(tmp_path, math.nan)
    reports = lc.run_battery(only=["stage1-q1"], constants_path=path)["stage1-q1"]
    assert all(r.status == "inconclusive" and not r.passed for r in reports)


def test_unknown_battery_group():
    with pytest.raises(ContractError):
        lc.run_battery(only=["nope"])


def test_shipped_constants_are_positive():
    doc = lc.load_constants()
    for name in ("stage1_q1", "stage2_q1_diag", "stage2_q0", "gronwall"):
        assert lc._usable(doc[name]["C"])
        assert doc[name]["C"] >= max(doc[name]["fitted"])
