"""Acceptance criteria, one test each.  Each records a PASS/FAIL line that is
printed in the terminal summary (and immediately, when run with ``-s``)."""
import filecmp
import json
import math
import os
import time

import numpy as np
import pytest

from contrastive_dynamics import lemma_checks as lc
from contrastive_dynamics.cli import EXIT_OK, main
from contrastive_dynamics.expectation import ExpectationStrategy, contrastive_loss, mean_scores
from contrastive_dynamics.gradients import compute_qset, finite_difference_audit, krates_direct, krates_from_qset
from contrastive_dynamics.infinite_width import InfiniteWidthState, convergence_order
from contrastive_dynamics.metrics import alignment_score, balance_score
from contrastive_dynamics.model import KState

from conftest import make_instance

LINES = {}


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
    LINES[n] = line
    print(line)
    assert ok, line


def test_01_gradient_correctness():
    t0 = time.perf_counter()
    cfg, w, enc, _ = make_instance(d=4, r=2, m=3, seed=0)
    errs = {}
    for tau_sq in (1e-4, 1.0):
        errs[f"contrastive tau^2={tau_sq:g}"] = finite_difference_audit(
            w, enc, tau_sq, cfg.K, steps=(1e-4, 1e-5, 1e-6))["max_relative_error"]
    errs["non-contrastive"] = finite_difference_audit(
        w, enc, steps=(1e-4, 1e-5, 1e-6), loss_kind="non_contrastive")["max_relative_error"]
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    record(1, worst <= 1e-5 and secs <= 30, f"finite differences max rel err {worst:.2e} in {secs:.1f}s")


def test_02_zero_temperature_closed_forms():
    worst = 0.0
    for seed, K in ((0, 1.0), (1, 0.5), (2, 3.0)):
        _, _, _, ks = make_instance(d=5, r=3, m=4, seed=seed, K=K)
        S_A, S_B = mean_scores(ks, 0.0, K)
        q = compute_qset(ks, 0.0, K)
        c = 2 * K / (1 + K)
        worst = max(worst, abs(S_A - 1 / (1 + K)), abs(S_B - 1 / (1 + K)),
                    abs(contrastive_loss(ks, 0.0, K) - 2 * math.log(1 + K)),
                    np.max(np.abs(q.Q1 - c * np.eye(ks.r))), np.max(np.abs(q.Q1_xiA)),
                    np.max(np.abs(q.Q1_xiB)), np.max(np.abs(q.Q2)))
    record(2, worst <= 1e-12, f"max deviation from zero-temperature closed forms {worst:.1e}")


def test_03_q_path_identity():
    worst = 0.0
    for seed, (d, r, m) in enumerate([(4, 2, 3), (5, 3, 6), (6, 2, 5)]):
        cfg, w, enc, ks = make_instance(d=d, r=r, m=m, seed=seed)
        for tau_sq in (0.0, 1e-3, 1.0):
            q = compute_qset(ks, tau_sq, cfg.K)
            a = krates_direct(w, enc, tau_sq, cfg.K)
            b = krates_from_qset(ks, q, cfg.sigma_sq, cfg.sigma_xi_sq)
            worst = max(worst, a.max_abs_diff(b))
    record(3, worst <= 1e-9, f"direct vs Q-path rates max abs diff {worst:.1e}")


def test_04_stage1_equivalence():
    cos = []
    for seed in (0, 1, 2):
        cfg, w, enc = lc.stage1_instance(seed)
        cos.append(lc.noncontrastive_cosine(w, enc, cfg.K, 1e-3))
    record(4, min(cos) >= 0.999, f"min cosine at tau^2=1e-3 {min(cos):.6f}")


def test_05_figure_reproduction(tmp_path):
    t0 = time.perf_counter()
    code = main(["figure", "--jobs", str(os.cpu_count() or 1), "--out", str(tmp_path)])
    secs = time.perf_counter() - t0
    doc = json.loads((tmp_path / "figure_summary.json").read_text())
    checks, runs = doc["checks"], doc["runs"]
    need = ("all_align", "contrastive_balanced", "noncontrastive_ill_conditioned")
    ok = code == EXIT_OK and all(checks.get(k) for k in need) and secs <= 900
    kap = ", ".join(f"{n.removeprefix('figure-')} {v['final_kappa0']:.3f}" for n, v in runs.items())
    record(5, ok, f"final kappa0: {kap}; min align "
                  f"{min(v['final_gamma_align'] for v in runs.values()):.4f}; {secs:.0f}s")


def test_06_infinite_width_tracking(tmp_path):
    code = main(["iw", "--preset", "tracking", "--out", str(tmp_path)])
    s = json.loads((tmp_path / "iw_summary.json").read_text())
    gap = s["max_rel_gap"]
    s0 = InfiniteWidthState(np.array([0.5, 1.0, 2.0, 1.5]), np.array([0.2, 0.8, 1.5, 0.1]))
    order, _, _ = convergence_order(s0, np.array([1.5, 1.0, 1.0, 0.8]), 1.0, 0.25, 4.0)
    ok = code == EXIT_OK and gap is not None and gap <= 0.05 and 3.7 <= order <= 4.3
    record(6, ok, f"max rel gap {gap:.4f} up to step {s['tracking_horizon_step']}; RK4 order {order:.2f}")


def test_07_stage2_audits():
    ideal = lc.ideal_kstate(lc.IDEAL_KAPPA)
    ideal_err = max(lc.audit_stage2_q1_diag(ideal, 1.0).error, lc.audit_stage2_q0(ideal, 1.0).error)
    trained = []
    for ks in lc._trained(lc.AUDIT_SEEDS):
        trained += [lc.audit_stage2_q1_diag(ks, 1.0), lc.audit_stage2_q0(ks, 1.0)]
    worst = max(r.error for r in trained)
    ok = ideal_err <= 1e-6 and worst <= 0.05 and all(r.passed for r in trained)
    record(7, ok, f"ideal state err {ideal_err:.1e}; trained states max rel err {worst:.1e}")


def test_08_gronwall():
    reports = [lc.audit_gronwall_analytic(),
               lc.audit_gronwall_analytic(X0=0.3, Y0=2.0, A=0.5, beta=3.0, T=20.0)]
    reports += [lc.audit_gronwall_measured(s) for s in lc.GRONWALL_SEEDS]
    slack = min(r.budget - r.error for r in reports if r.status in ("pass", "fail"))
    ok = all(r.passed for r in reports)
    record(8, ok, f"{sum(r.passed for r in reports)}/{len(reports)} witnesses within bound, "
                  f"min slack {slack:.3g}")


def test_09_metric_ground_truths():
    ok, r = True, 4
    for rr in (1, 2, 3, 4):
        ks = KState.from_blocks(np.eye(rr), np.eye(rr), np.zeros((rr, 1)), np.zeros((rr, 1)))
        ok &= alignment_score(ks) == 1 - 2.0**-rr and balance_score(ks) == rr
    nu = np.diag([1.0] + [1e-3] * (r - 1))
    ks = KState.from_blocks(nu, nu, np.zeros((r, 1)), np.zeros((r, 1)))
    align, bal = alignment_score(ks), balance_score(ks)
    ok &= align == 1 - 2.0**-r and bal <= 2
    record(9, bool(ok), f"identity models exact; diag(nu) align {align:.4f} balance {bal:.3f}")


def _csvs(root):
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


def _same(a, b):
    files = _csvs(a)
    return files == _csvs(b) and all(filecmp.cmp(a / f, b / f, shallow=False) for f in files)


def test_10_determinism(tmp_path):
    runs = {
        "train": lambda j: ["train", "--preset", "figure-contrastive-switch", "--T2", "20",
                            "--mc", "1024", "--stride", "2", "--jobs", str(j)],
        "figure": lambda j: ["figure", "--T2", "6", "--mc", "256", "--stride", "2", "--jobs", str(j)],
        "iw": lambda j: ["iw", "--preset", "tracking", "--T2", "100", "--jobs", str(j)],
    }
    bad = []
    for name, argv in runs.items():
        dirs = []
        for i, jobs in enumerate((1, 1, 3)):
            out = tmp_path / f"{name}{i}"
            assert main(argv(jobs) + ["--out", str(out)]) == EXIT_OK
            dirs.append(out)
        if not _csvs(dirs[0]) or not (_same(dirs[0], dirs[1]) and _same(dirs[0], dirs[2])):
            bad.append(name)
    record(10, not bad, "CSV artifacts byte-identical across reruns and --jobs"
                        + (f" except {bad}" if bad else ""))
