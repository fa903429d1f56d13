"""Two-stage gradient descent on the contrastive and non-contrastive losses."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .expectation import EXACT, ExpectationStrategy, evaluate, exact_cost
from .gradients import descent_from_qset, qset_non_contrastive, qset_non_contrastive_block, qset_stat, QSet
from .metrics import metrics_record
from .model import (CollapseError, ContractError, WeightState, build_encoders, compute_kstate,
                    init_weights, stream)

LOSS_KINDS = ("contrastive", "non_contrastive")


class DivergenceError(RuntimeError):
    """The loss became non-finite; carries the last finite weights."""

    def __init__(self, message, weights, trajectory):
        super().__init__(message)
        self.weights = weights
        self.trajectory = trajectory


@dataclass(frozen=True)
class Schedule:
    eta: float = 5e-3
    tau0_sq: float | None = None    # None means 1/d^2
    T1: int = 2000
    T2: int = 20000
    batch: int | str = 4096
    stop_grad_norm: float = 1e-8

    def __post_init__(self):
        if self.eta < 0:
            raise ContractError("eta must be non-negative")
        if not (0 <= self.T1 <= self.T2) or self.T2 < 1:
            raise ContractError("need 0 <= T1 <= T2 and T2 >= 1")
        if self.tau0_sq is not None and not (0 <= self.tau0_sq <= 1):
            raise ContractError("tau0_sq must lie in [0, 1]")
        if self.batch != "population" and (not isinstance(self.batch, int) or self.batch < 1):
            raise ContractError("batch must be a positive integer or 'population'")

    def resolved(self, d):
        if self.tau0_sq is not None:
            return self
        return dataclasses.replace(self, tau0_sq=1.0 / d**2)


def temperature(schedule, t, loss_kind="contrastive"):
    if loss_kind == "non_contrastive" or t >= schedule.T1:
        return 1.0
    if schedule.tau0_sq is None:
        raise ContractError("schedule tau0_sq unresolved; call Schedule.resolved(d)")
    return float(schedule.tau0_sq)


@dataclass(frozen=True)
class RecorderSpec:
    stride: int = 10
    snapshot_every: int | None = None     # defaults to 10 * stride
    metrics: ExpectationStrategy = ExpectationStrategy("monte_carlo", 4096, mc_seed=7)
    delta: float = 0.01
    c_target: float = 1.2

    @property
    def snapshot_stride(self):
        return self.snapshot_every or 10 * self.stride


@dataclass
class TrajectoryRow:
    step: int
    tau_sq: float
    loss: float
    metrics: object


@dataclass
class Trajectory:
    rows: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    collapsed: bool = False
    stopped_early: bool = False
    final_grad_norm: float = math.nan
    weights: WeightState | None = None
    encoders: object = None
    loss_kind: str = "contrastive"

    def column(self, name):
        if name in ("step", "tau_sq", "loss"):
            return np.array([getattr(r, name) for r in self.rows])
        return np.array([getattr(r.metrics, name) for r in self.rows])

    def final_kstate(self):
        return compute_kstate(self.weights, self.encoders)


def _step_strategy(schedule, population, config, t):
    """Expectation strategy for the gradient at step t."""
    seed = int(np.random.SeedSequence([config.seed & (2**64 - 1), 0xBA7C, t]).generate_state(1)[0])
    if schedule.batch == "population":
        if population.mode == "exact":
            if exact_cost(config.d) <= population.budget:
                return population
            return dataclasses.replace(population, mode="monte_carlo", mc_seed=seed)
        return dataclasses.replace(population, mc_seed=seed)
    return ExpectationStrategy("monte_carlo", schedule.batch, seed,
                               block=min(schedule.batch, population.block))


def step_direction(kstate, encoders, tau_sq, K, loss_kind, strategy, population_nc=False):
    """Return ``(D_A, D_B, loss)`` with ``D = -tau^{-2} grad`` (``-grad`` if non-contrastive)."""
    if loss_kind == "contrastive":
        est = evaluate(kstate.r, kstate.d, strategy, qset_stat(kstate, tau_sq, K))
        qset = QSet.from_big(est["q0"], est["big"], kstate.r)
        loss = float(est["loss"])
    elif population_nc:
        qset = qset_non_contrastive(kstate)
        loss = qset.Q0
    else:
        def stat(block):
            q = qset_non_contrastive_block(kstate, block)
            return {"big": q.big, "q0": q.Q0}
        est = evaluate(kstate.r, kstate.d, strategy, stat)
        qset = QSet.from_big(est["q0"], est["big"], kstate.r)
        loss = qset.Q0
    D_A, D_B = descent_from_qset(encoders, kstate, qset)
    return D_A, D_B, loss


def run(config, schedule, loss_kind="contrastive", strategy=EXACT, recorder=RecorderSpec(),
        weights=None, encoders=None, progress=None):
    """Gradient descent ``W <- W - eta tau^{-2} grad L`` for ``schedule.T2`` steps."""
    if loss_kind not in LOSS_KINDS:
        raise ContractError(f"unknown loss kind {loss_kind!r}")
    schedule = schedule.resolved(config.d)
    if encoders is None:
        encoders = build_encoders(config, stream(config.seed, "encoders"))
    if weights is None:
        weights = init_weights(config, stream(config.seed, "weights"))
    traj = Trajectory(encoders=encoders, loss_kind=loss_kind)

    def record(t, tau_sq, loss, kstate):
        traj.rows.append(TrajectoryRow(t, tau_sq, loss, metrics_record(kstate, recorder.metrics)))
        if t % recorder.snapshot_stride == 0:
            traj.snapshots[t] = kstate

    kstate = None
    for t in range(schedule.T2 + 1):
        try:
            kstate = compute_kstate(weights, encoders)
        except CollapseError:
            traj.collapsed = True
            break
        final = t == schedule.T2
        tau_sq = temperature(schedule, min(t, schedule.T2 - 1), loss_kind)
        strat = _step_strategy(schedule, strategy, config, t)
        D_A, D_B, loss = step_direction(kstate, encoders, tau_sq, config.K, loss_kind, strat,
                                        population_nc=schedule.batch == "population")
        if not math.isfinite(loss) or not (np.all(np.isfinite(D_A)) and np.all(np.isfinite(D_B))):
            traj.weights = weights
            raise DivergenceError(f"non-finite loss at step {t}", weights, traj)
        gnorm = math.sqrt(float(np.sum(D_A**2) + np.sum(D_B**2))) * (tau_sq if loss_kind == "contrastive" else 1.0)
        traj.final_grad_norm = gnorm
        stop = loss_kind == "non_contrastive" and gnorm <= schedule.stop_grad_norm
        if t % recorder.stride == 0 or final or stop:
            record(t, tau_sq, loss, kstate)
            if progress is not None:
                progress(t, traj.rows[-1])
        if final:
            break
        if stop:
            traj.stopped_early = True
            break
        weights = WeightState(weights.W_A + schedule.eta * D_A, weights.W_B + schedule.eta * D_B)
    traj.weights = weights
    return traj


@dataclass(frozen=True)
class StageReport:
    stage1_exit: int | None
    stage2_exit: int | None
    delta: float
    c_target: float
    last: dict

    def as_dict(self):
        return dataclasses.asdict(self)


def stage_boundary_report(trajectory, delta=0.01, c_target=1.2):
    """First recorded steps where the stage-1 and stage-2 exit conditions hold."""
    if not trajectory.rows:
        raise ContractError("empty trajectory")
    s1 = s2 = None
    for row in trajectory.rows:
        m = row.metrics
        if s1 is None and m.rho_minus <= delta and m.rho_ns <= delta:
            s1 = row.step
        if s2 is None and m.kappa0 <= c_target:
            s2 = row.step
    last = trajectory.rows[-1].metrics
    return StageReport(s1, s2, delta, c_target,
                       {"step": trajectory.rows[-1].step, "rho_minus": last.rho_minus,
                        "rho_ns": last.rho_ns, "kappa0": last.kappa0, "gamma_align": last.gamma_align})
