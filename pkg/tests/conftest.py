import os

import hypothesis
import numpy as np
import pytest

from contrastive_dynamics.model import ModelConfig, build_encoders, compute_kstate, init_weights, stream

hypothesis.settings.register_profile("ci", max_examples=25, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def make_instance(d=4, r=2, m=3, seed=0, sigma_sq=None, sigma_xi_sq=0.5, K=1.0):
    sigma_sq = list(np.linspace(1.0, 1.2, r)) if sigma_sq is None else sigma_sq
    cfg = ModelConfig(d=d, r=r, m=m, sigma_sq=sigma_sq, sigma_xi_sq=sigma_xi_sq, K=K, seed=seed)
    enc = build_encoders(cfg, stream(seed, "encoders"))
    w = init_weights(cfg, stream(seed, "weights"))
    return cfg, w, enc, compute_kstate(w, enc)


@pytest.fixture
def small():
    """d=4, r=2, m=3 instance small enough for finite differences."""
    return make_instance()


@pytest.fixture
def medium():
    return make_instance(d=5, r=3, m=6, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
