"""Experiment specifications and the named presets used by the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .expectation import EXACT, ExpectationStrategy
from .model import ContractError, ModelConfig
from .training import LOSS_KINDS, RecorderSpec, Schedule

SCHEMA_VERSION = 1
METRICS_STRATEGY = ExpectationStrategy("monte_carlo", 4096, mc_seed=7)


@dataclass(frozen=True)
class IWSpec:
    """Reduced-ODE run.  Missing ``kappa_sq`` means: start from the model's init."""
    h: float
    T: float
    K: float = 1.0
    kappa_sq: tuple | None = None
    hat_kappa_sq: tuple | None = None
    sigma_sq: tuple | None = None
    track: bool = False          # also train the finite-width model and report the gap
    halving: bool = False        # estimate the order of convergence

    def __post_init__(self):
        if self.h <= 0 or self.T <= 0:
            raise ContractError("iw h and T must be positive")
        if (self.kappa_sq is None) != (self.hat_kappa_sq is None):
            raise ContractError("give both kappa_sq and hat_kappa_sq, or neither")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: ModelConfig
    schedule: Schedule
    loss_kind: str = "contrastive"
    strategy: ExpectationStrategy = EXACT
    stride: int = 25
    metrics: ExpectationStrategy = METRICS_STRATEGY
    iw: IWSpec | None = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")
        if self.stride < 1:
            raise ContractError("stride must be positive")

    def recorder(self, snapshot_every=None):
        return RecorderSpec(stride=self.stride, snapshot_every=snapshot_every, metrics=self.metrics)

    def to_dict(self):
        doc = {
            "name": self.name,
            "model": json.loads(self.model.to_json()),
            "schedule": dataclasses.asdict(self.schedule),
            "loss_kind": self.loss_kind,
            "strategy": dataclasses.asdict(self.strategy),
            "stride": self.stride,
            "metrics": dataclasses.asdict(self.metrics),
        }
        if self.iw is not None:
            doc["iw"] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(self.iw).items()}
        return doc

    @classmethod
    def from_dict(cls, doc):
        known = {"name", "model", "schedule", "loss_kind", "strategy", "stride", "metrics", "iw"}
        extra = set(doc) - known
        if extra:
            raise ContractError(f"unknown spec fields {sorted(extra)}")
        if "model" not in doc or "schedule" not in doc:
            raise ContractError("spec needs 'model' and 'schedule'")
        iw = doc.get("iw")
        if iw is not None:
            iw = IWSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in iw.items()})
        try:
            return cls(
                name=doc.get("name", "custom"),
                model=ModelConfig.from_dict(doc["model"]),
                schedule=Schedule(**doc["schedule"]),
                loss_kind=doc.get("loss_kind", "contrastive"),
                strategy=ExpectationStrategy(**doc.get("strategy", {})),
                stride=int(doc.get("stride", 25)),
                metrics=ExpectationStrategy(**doc["metrics"]) if "metrics" in doc else METRICS_STRATEGY,
                iw=iw,
            )
        except TypeError as exc:
            raise ContractError(f"malformed spec: {exc}") from None

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# presets

FIGURE_MODEL = dict(d=64, r=16, m=1024, sigma_sq={"preset": "adversarial", "c": 1.0},
                    sigma_xi_sq=0.3, K=1.0)
# 4096 samples per step, evaluated in blocks of 512 quads (in-block negatives)
FIGURE_STRATEGY = ExpectationStrategy("monte_carlo", 4096, block=512)
FIGURE_SCHEDULE = dict(eta=1.0, tau0_sq=1e-4, T1=500, T2=2500, batch=4096)


def _figure(name, loss_kind, tau0_sq, seed):
    sched = dict(FIGURE_SCHEDULE, tau0_sq=tau0_sq)
    return ExperimentSpec(name, ModelConfig(**FIGURE_MODEL, seed=seed), Schedule(**sched),
                          loss_kind, FIGURE_STRATEGY, stride=25)


def _tracking(seed):
    model = ModelConfig(d=16, r=4, m=4096, sigma_sq={"preset": "adversarial", "c": 1.0},
                        sigma_xi_sq=1e-6, K=1.0, seed=seed)
    eta, steps = 0.05, 1000
    sched = Schedule(eta=eta, tau0_sq=1.0, T1=0, T2=steps, batch="population")
    strategy = ExpectationStrategy("factorized", mc_samples=16384, block=8192)
    return ExperimentSpec("tracking", model, sched, "contrastive", strategy, stride=50,
                          iw=IWSpec(h=eta, T=eta * steps, K=1.0, track=True))


def _fixed_point(seed):
    model = ModelConfig(d=5, r=4, m=4, sigma_sq="flat", sigma_xi_sq=1e-3, K=1.0, seed=seed)
    sched = Schedule(eta=0.05, tau0_sq=1.0, T1=0, T2=200, batch="population")
    return ExperimentSpec("fixed-point", model, sched, "contrastive", EXACT, stride=10,
                          iw=IWSpec(h=0.05, T=10.0, K=1.0, kappa_sq=(1.0,) * 4,
                                    hat_kappa_sq=(1.0,) * 4))


PRESETS = {
    "figure-noncontrastive": lambda seed: _figure("figure-noncontrastive", "non_contrastive", 1.0, seed),
    "figure-contrastive-tau1": lambda seed: _figure("figure-contrastive-tau1", "contrastive", 1.0, seed),
    "figure-contrastive-switch": lambda seed: _figure("figure-contrastive-switch", "contrastive", 1e-4, seed),
    "tracking": _tracking,
    "fixed-point": _fixed_point,
}
FIGURE_PRESETS = ("figure-noncontrastive", "figure-contrastive-tau1", "figure-contrastive-switch")


def preset(name, seed=0):
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](seed)
