"""Command-line front end: ``train``, ``iw``, ``verify`` and ``figure``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .expectation import EXACT, ExpectationStrategy
from .infinite_width import (InfiniteWidthState, StiffnessError, convergence_order, integrate_iw)
from .lemma_checks import BATTERY, run_battery
from .metrics import diagnostics
from .model import CollapseError, ContractError, build_encoders, compute_kstate, init_weights, stream
from .presets import FIGURE_PRESETS, PRESETS, SCHEMA_VERSION, ExperimentSpec, preset
from .training import DivergenceError, run, stage_boundary_report

log = logging.getLogger("contrastive_dynamics")

OUT_ENV = "CONTRASTIVE_DYNAMICS_OUT"
EXIT_OK, EXIT_FAIL, EXIT_SPEC, EXIT_COLLAPSE, EXIT_DIVERGED, EXIT_STIFF = 0, 1, 2, 3, 4, 5
TRAJECTORY_COLUMNS = ["step", "tau_sq", "loss", "gamma_align", "gamma_balance", "kappa0",
                      "rho_minus", "rho_ns", "rho_hat_ns"]
ORTHOGONALITY_LIMIT = 0.05


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


def _finite(x):
    return x if isinstance(x, (int, str)) or math.isfinite(x) else None


# ---------------------------------------------------------------------------
# spec handling


def load_spec(args):
    if getattr(args, "spec", None) and args.preset:
        raise ContractError("give a spec file or --preset, not both")
    if args.preset:
        spec = preset(args.preset, args.seed if args.seed is not None else 0)
    elif getattr(args, "spec", None):
        try:
            with open(args.spec, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read spec {args.spec}: {exc}") from None
        spec = ExperimentSpec.from_dict(doc)
    else:
        raise ContractError("need a spec file or --preset")
    return apply_overrides(spec, args)


def apply_overrides(spec, args):
    model, sched, strat = spec.model, spec.schedule, spec.strategy
    if args.seed is not None and not args.preset:
        model = dataclasses.replace(model, seed=args.seed)
    sched_kw = {k: getattr(args, k) for k in ("eta", "T1", "T2") if getattr(args, k, None) is not None}
    if args.exact:
        strat = dataclasses.replace(EXACT, budget=strat.budget)
        sched_kw["batch"] = "population"
    elif args.mc is not None:
        strat = ExpectationStrategy("monte_carlo", args.mc, strat.mc_seed, strat.budget,
                                    block=min(args.mc, strat.block))
        if sched.batch != "population":
            sched_kw["batch"] = args.mc
    if args.mc_seed is not None:
        strat = dataclasses.replace(strat, mc_seed=args.mc_seed)
    if args.jobs:
        strat = dataclasses.replace(strat, jobs=args.jobs)
    if "T2" in sched_kw and "T1" not in sched_kw:
        sched_kw["T1"] = min(sched.T1, sched_kw["T2"])
    if sched_kw:
        sched = dataclasses.replace(sched, **sched_kw)
    stride = args.stride if args.stride is not None else spec.stride
    return dataclasses.replace(spec, model=model, schedule=sched, strategy=strat, stride=stride)


def out_dir(args, name):
    root = args.out or os.environ.get(OUT_ENV) or "runs"
    path = Path(root) if args.out else Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# train


def trajectory_rows(traj):
    rows = []
    for row in traj.rows:
        m = row.metrics
        rows.append([row.step, row.tau_sq, row.loss, m.gamma_align, m.gamma_balance, m.kappa0,
                     m.rho_minus, m.rho_ns, m.rho_hat_ns, *m.sigma_f_top])
    return rows


def trajectory_header(traj):
    k = len(traj.rows[0].metrics.sigma_f_top) if traj.rows else 0
    return TRAJECTORY_COLUMNS + [f"sigma_f_{i + 1}" for i in range(k)]


def write_training(path, spec, traj, status, elapsed):
    if traj.rows:
        write_csv(path / "trajectory.csv", trajectory_header(traj), trajectory_rows(traj))
    final = traj.rows[-1].metrics.as_dict() if traj.rows else None
    write_json(path / "summary.json", {
        "schema_version": SCHEMA_VERSION,
        "spec_hash": spec.digest(),
        "spec": spec.to_dict(),
        "status": status,
        "collapsed": traj.collapsed,
        "stopped_early": traj.stopped_early,
        "final_grad_norm": _finite(traj.final_grad_norm),
        "final": final,
        "wall_seconds": round(elapsed, 3),
    })
    if traj.rows:
        write_json(path / "stage_report.json", stage_boundary_report(traj).as_dict())
    if traj.weights is not None:
        np.savez(path / "final_state.npz", W_A=traj.weights.W_A, W_B=traj.weights.W_B)


def train_spec(spec, path, snapshot_every=None):
    """Run one experiment and write its artifacts; returns ``(exit code, trajectory)``."""
    def progress(t, row):
        log.info("%s step %d loss %.6g align %.4f kappa0 %.4f", spec.name, t, row.loss,
                 row.metrics.gamma_align, row.metrics.kappa0)

    t0 = time.perf_counter()
    try:
        traj = run(spec.model, spec.schedule, spec.loss_kind, spec.strategy,
                   spec.recorder(snapshot_every), progress=progress)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        write_training(path, spec, exc.trajectory, "diverged", time.perf_counter() - t0)
        return EXIT_DIVERGED, exc.trajectory
    status = "collapsed" if traj.collapsed else "ok"
    write_training(path, spec, traj, status, time.perf_counter() - t0)
    if traj.collapsed:
        log.error("normalizer collapsed; partial artifacts in %s", path)
        return EXIT_COLLAPSE, traj
    return EXIT_OK, traj


def cmd_train(args):
    spec = load_spec(args)
    path = out_dir(args, spec.name)
    code, _ = train_spec(spec, path)
    print(f"{spec.name}: wrote {path}")
    return code


# ---------------------------------------------------------------------------
# iw


def _initial_iw_state(spec):
    iw = spec.iw
    if iw.kappa_sq is not None:
        return InfiniteWidthState(np.array(iw.kappa_sq), np.array(iw.hat_kappa_sq))
    cfg = spec.model
    enc = build_encoders(cfg, stream(cfg.seed, "encoders"))
    w = init_weights(cfg, stream(cfg.seed, "weights"))
    return InfiniteWidthState.from_kstate(compute_kstate(w, enc))


def cmd_iw(args):
    spec = load_spec(args)
    if spec.iw is None:
        raise ContractError("spec has no 'iw' section")
    iw = spec.iw
    if args.halving:
        iw = dataclasses.replace(iw, halving=True)
    path = out_dir(args, spec.name)
    sigma = np.array(iw.sigma_sq if iw.sigma_sq is not None else spec.model.sigma_sq)
    summary = {"schema_version": SCHEMA_VERSION, "spec_hash": spec.digest(), "spec": spec.to_dict()}

    fw = None
    if iw.track:
        ratio = spec.schedule.eta / iw.h
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ContractError("tracking needs eta to be a multiple of h")
        code, traj = train_spec(spec, path, snapshot_every=spec.stride)
        if code != EXIT_OK:
            return code
        fw = {s: traj.snapshots[s] for s in sorted(traj.snapshots)}
        state0 = InfiniteWidthState.from_kstate(fw[0])
    else:
        state0 = _initial_iw_state(spec)

    try:
        sol = integrate_iw(state0, sigma, spec.schedule, iw.h, iw.T, iw.K)
    except StiffnessError as exc:
        log.error("%s", exc)
        write_json(path / "summary.json", dict(summary, status="stiff", error=str(exc)))
        return EXIT_STIFF

    r = state0.r
    header = ["step", "t", "tau_sq"] + [f"kappa_sq_{p + 1}" for p in range(r)] \
        + [f"hat_kappa_sq_{p + 1}" for p in range(r)] + ["S_tilde", "T_tilde"]
    rows = []
    if fw is None:
        steps_per_unit = 1.0 / spec.schedule.eta
        for i, t in enumerate(sol.t):
            rows.append([int(round(t * steps_per_unit)), t, sol.tau_sq[i], *sol.kappa_sq[i],
                         *sol.hat_kappa_sq[i], sol.S_tilde[i], sol.T_tilde[i]])
    else:
        header += [f"fw_kappa_sq_{p + 1}" for p in range(r)] + ["rel_gap", "delta_orth"]
        per_step = int(round(spec.schedule.eta / iw.h))
        gaps, horizon = [], None
        for step, ks in fw.items():
            i = step * per_step
            if i >= len(sol.t):
                break
            meas = InfiniteWidthState.from_kstate(ks)
            gap = float(np.max(np.abs(meas.kappa_sq - sol.kappa_sq[i]) / sol.kappa_sq[i]))
            orth = diagnostics(ks).orthogonality()
            if orth <= ORTHOGONALITY_LIMIT and horizon is None:
                gaps.append(gap)
            elif horizon is None:
                horizon = step
            rows.append([step, sol.t[i], sol.tau_sq[i], *sol.kappa_sq[i], *sol.hat_kappa_sq[i],
                         sol.S_tilde[i], sol.T_tilde[i], *meas.kappa_sq, gap, orth])
        summary["max_rel_gap"] = max(gaps) if gaps else None
        summary["tracking_horizon_step"] = horizon if horizon is not None else rows[-1][0]
        summary["orthogonality_limit"] = ORTHOGONALITY_LIMIT
    write_csv(path / "iw_trajectory.csv", header, rows)

    summary.update(status="ok", halvings=sol.halvings,
                   final={"kappa_sq": sol.kappa_sq[-1], "hat_kappa_sq": sol.hat_kappa_sq[-1]})
    if iw.halving:
        order, e1, e2 = convergence_order(state0, sigma, spec.schedule, iw.h, iw.T, iw.K)
        summary["convergence"] = {"order": _finite(order), "diff_h": e1, "diff_h2": e2}
        print(f"observed order of convergence: {order:.3f}")
    write_json(path / "iw_summary.json", summary)
    if fw is not None:
        print(f"max relative gap over tracking horizon: {summary['max_rel_gap']}")
    print(f"{spec.name}: wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args):
    only = args.only or None
    t0 = time.perf_counter()
    results = run_battery(only, args.constants)
    ok = True
    doc = {"schema_version": SCHEMA_VERSION, "groups": {}}
    for group, reports in results.items():
        doc["groups"][group] = [r.as_dict() for r in reports]
        for r in reports:
            ok &= r.passed
            print(f"{group:16s} {r.status:12s} error={r.error:.3e} budget={r.budget:.3e}")
    doc["passed"] = ok
    doc["wall_seconds"] = round(time.perf_counter() - t0, 3)
    path = out_dir(args, "verify")
    write_json(path / "audit.json", doc)
    print(("all audits passed" if ok else "some audits FAILED") + f"; report in {path / 'audit.json'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# figure


def _figure_run(name, seed, root, overrides):
    spec = apply_overrides(preset(name, seed), overrides)
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    code, traj = train_spec(spec, path)
    return name, code, trajectory_header(traj), trajectory_rows(traj)


def _first(steps, mask):
    idx = np.flatnonzero(mask)
    return int(steps[idx[0]]) if len(idx) else None


def figure_checks(runs):
    """Qualitative claims of the simulation figure, evaluated on the three runs."""
    out = {}
    for name, (header, rows) in runs.items():
        a = np.array(rows, float)
        col = {h: a[:, i] for i, h in enumerate(header)}
        out[name] = {
            "final_gamma_align": float(col["gamma_align"][-1]),
            "final_kappa0": float(col["kappa0"][-1]),
            "max_gamma_align": float(col["gamma_align"].max()),
            "first_rho_minus_below_0.01": _first(col["step"], col["rho_minus"] < 0.01),
            "first_kappa0_below_1.5": _first(col["step"], col["kappa0"] < 1.5),
        }
    nc, tau1, sw = (out.get(n) for n in FIGURE_PRESETS)
    checks = {"all_align": all(v["final_gamma_align"] >= 0.99 for v in out.values())}
    if tau1 and sw:
        checks["contrastive_balanced"] = tau1["final_kappa0"] <= 1.2 and sw["final_kappa0"] <= 1.2
        a, b = tau1["first_rho_minus_below_0.01"], tau1["first_kappa0_below_1.5"]
        checks["tau1_two_phases"] = a is not None and b is not None and a < b
    if nc:
        checks["noncontrastive_ill_conditioned"] = nc["final_kappa0"] >= 3
    return out, checks


def cmd_figure(args):
    seed = args.seed if args.seed is not None else 0
    root = out_dir(args, "figure")
    names = args.only or list(FIGURE_PRESETS)
    ov = argparse.Namespace(**{k: getattr(args, k, None) for k in
                               ("seed", "eta", "T1", "T2", "exact", "mc", "mc_seed", "jobs", "stride")})
    ov.preset, ov.jobs = True, None   # presets already carry the seed; jobs parallelise runs here
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_figure_run, names, [seed] * len(names), [str(root)] * len(names),
                                 [ov] * len(names)))
    else:
        done = [_figure_run(n, seed, root, ov) for n in names]
    runs, code = {}, EXIT_OK
    for name, c, header, rows in done:
        code = code or c
        if rows:
            runs[name] = (header, rows)
    per_run, checks = figure_checks(runs)
    summary_rows = [[n, v["final_gamma_align"], v["final_kappa0"], v["max_gamma_align"]]
                    for n, v in per_run.items()]
    with open(root / "figure.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["preset", "final_gamma_align", "final_kappa0", "max_gamma_align"])
        for row in summary_rows:
            w.writerow([row[0]] + [fmt(v) for v in row[1:]])
    write_json(root / "figure_summary.json", {"schema_version": SCHEMA_VERSION, "seed": seed,
                                              "runs": per_run, "checks": checks})
    for name, v in per_run.items():
        print(f"{name:28s} align={v['final_gamma_align']:.4f} kappa0={v['final_kappa0']:.4f}")
    for k, v in checks.items():
        print(f"{k:32s} {'yes' if v else 'no'}")
    return code


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="contrastive_dynamics", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, spec=True):
        if spec:
            p.add_argument("spec", nargs="?", help="experiment spec JSON")
            p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        g = p.add_mutually_exclusive_group()
        g.add_argument("--exact", action="store_true", help="exact population expectations")
        g.add_argument("--mc", type=int, metavar="N", help="Monte Carlo with N samples per step")
        p.add_argument("--mc-seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name> or runs/<name>)")
        p.add_argument("--stride", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--eta", type=float)
        p.add_argument("--T1", type=int)
        p.add_argument("--T2", type=int)

    p = sub.add_parser("train", help="run gradient descent and write a trajectory")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("iw", help="integrate the infinite-width dynamics")
    common(p)
    p.add_argument("--halving", action="store_true", help="report the observed order of convergence")
    p.set_defaults(func=cmd_iw)

    p = sub.add_parser("verify", help="run the lemma audit battery")
    p.add_argument("--only", nargs="+", choices=sorted(BATTERY))
    p.add_argument("--constants", help="audit constants JSON (default: packaged fixture)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("figure", help="run the three simulation-figure presets")
    common(p, spec=False)
    p.add_argument("--only", nargs="+", choices=list(FIGURE_PRESETS))
    p.set_defaults(func=cmd_figure)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ContractError, CollapseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
