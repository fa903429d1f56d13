import numpy as np
import pytest
from hypothesis import given, strategies as st

from contrastive_dynamics.expectation import ExpectationStrategy
from contrastive_dynamics.gradients import DegenerateColumnError
from contrastive_dynamics.metrics import (alignment_from_features, alignment_score, balance_score,
                                          condition_numbers, diagnostics, feature_covariance_spectrum,
                                          metrics_record, ratios, top_singular_values)
from contrastive_dynamics.model import KState, WeightState, compute_kstate

from conftest import make_instance


def noiseless(K_A, K_B=None, noise_dims=0):
    K_B = K_A if K_B is None else K_B
    m = K_A.shape[0]
    return KState.from_blocks(K_A, K_B, np.zeros((m, noise_dims)), np.zeros((m, noise_dims)))


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_identity_model_ground_truth(r):
    ks = noiseless(np.eye(r))
    assert alignment_score(ks) == 1 - 2.0**-r
    assert balance_score(ks) == r
    ks1 = noiseless(np.eye(r), noise_dims=1)
    assert alignment_score(ks1) == 1 - 2.0**-r
    dg = diagnostics(ks1)
    assert dg.max() == 0


def test_unbalanced_diagonal_is_aligned_not_balanced():
    r = 4
    for eps in (1e-2, 1e-4):
        ks = noiseless(np.diag([1.0] + [eps] * (r - 1)))
        assert alignment_score(ks) == 1 - 2.0**-r
        assert balance_score(ks) <= 2
    assert abs(balance_score(noiseless(np.diag([1.0, 1e-8, 1e-8]))) - 1) < 1e-12


def test_rank_one_plus_noise_balance():
    K = np.zeros((4, 3))
    K[0, 0] = 1.0
    K[1, 1] = K[2, 2] = 1e-3
    assert 1 < balance_score(noiseless(K)) < 1.1


def test_constant_embedding_never_aligns():
    n, m = 50, 4
    c = np.ones((n, m))
    assert alignment_from_features(c, c, c, c) == 0.0


def test_alignment_exact_vs_mc():
    _, _, _, ks = make_instance(d=4, r=2, m=4, seed=8)
    exact = alignment_score(ks)
    est, se = alignment_score(ks, ExpectationStrategy("monte_carlo", 10**6, mc_seed=5), with_stderr=True)
    assert abs(est - exact) <= 4 * se


@given(seed=st.integers(0, 10**6), c=st.sampled_from([0.1, 3.0, 100.0]))
def test_alignment_scale_invariance(seed, c):
    _, w, enc, ks = make_instance(d=5, r=2, m=3, seed=seed)
    ks_c = compute_kstate(WeightState(c * w.W_A, c * w.W_B), enc)
    assert alignment_score(ks) == alignment_score(ks_c)
    assert 0 <= alignment_score(ks) <= 1


@given(seed=st.integers(0, 10**6))
def test_balance_bounds_and_spectrum(seed):
    _, _, _, ks = make_instance(d=6, r=3, m=4, seed=seed)
    ev = feature_covariance_spectrum(ks)
    FA = ks.full("A")
    direct = np.linalg.eigvalsh(FA @ FA.T / (ks.N_A**2 * ks.d))[::-1]
    assert np.allclose(ev[: len(direct)], direct[: len(ev)], atol=1e-12)
    rank = np.linalg.matrix_rank(FA)
    assert 1 <= balance_score(ks) <= rank + 1e-12
    sv = top_singular_values(ks)
    assert len(sv) == min(ks.m, ks.r + 4)


def test_condition_number_examples():
    kappa0, spec = condition_numbers(noiseless(np.diag([2.0, 1.0])))
    assert kappa0 == 2 and abs(spec - 2) < 1e-12
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 3)))[0]
    assert abs(condition_numbers(noiseless(Q * [3, 1, 1]))[0] - 3) < 1e-12
    with pytest.raises(DegenerateColumnError):
        condition_numbers(noiseless(np.array([[1.0, 0.0], [0.0, 0.0]])))


@given(seed=st.integers(0, 10**6))
def test_condition_envelopes(seed):
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((8, 3))
    ks = KState.from_blocks(K, rng.standard_normal((8, 3)), rng.standard_normal((8, 5)),
                            rng.standard_normal((8, 5)))
    kappa0, spec = condition_numbers(ks)
    assert kappa0 >= 1
    assert kappa0 <= spec * (1 + diagnostics(ks).delta_AB_perp * ks.r)
    rho_minus, rho_ns, rho_hat = ratios(ks)
    assert rho_ns <= 4 * ks.d * kappa0 / ks.r * rho_hat


def test_ratio_examples():
    K = np.array([[1.0, 0.2], [0.3, 1.0], [0.1, 0.0]])
    rm, rns, rh = ratios(noiseless(K, noise_dims=2))
    assert rm == pytest.approx(0, abs=1e-15) and rns == 0 and rh == 0


def test_diagnostics_at_wide_init():
    _, _, _, ks = make_instance(d=8, r=3, m=65536, seed=0, sigma_sq=[1, 1, 1], sigma_xi_sq=0.2)
    assert diagnostics(ks).max() <= 0.05


def test_orthogonal_columns_have_no_within_side_overlap():
    Q = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 3)))[0]
    dg = diagnostics(noiseless(Q * [1, 2, 3]))
    assert dg.delta_AB_perp < 1e-12


def test_aligned_balanced_implies_good_scores():
    rng = np.random.default_rng(3)
    r, d, m = 4, 6, 64
    Q = np.linalg.qr(rng.standard_normal((m, d)))[0]
    K_A = Q[:, :r] * [1.0, 1.02, 0.99, 1.03]
    noise = Q[:, r:] * 1e-4
    ks = KState.from_blocks(K_A, K_A.copy(), noise, noise.copy())
    rm, rns, _ = ratios(ks)
    kappa0, _ = condition_numbers(ks)
    assert rm <= 1e-3 and rns <= 1e-3 and kappa0 <= 1.05
    assert alignment_score(ks) >= 0.99 * (1 - 2.0**-r)
    assert balance_score(ks) >= 0.9 * r


def test_metrics_record_fields(medium):
    rec = metrics_record(medium[3])
    assert 0 <= rec.gamma_align <= 1 and rec.kappa0 >= 1
    assert rec.gamma_balance <= min(medium[3].m, medium[3].d)
    assert set(rec.as_dict()) >= {"gamma_align", "gamma_balance", "kappa0", "rho_minus", "rho_ns"}
    # factorized strategies fall back to sampling for the indicator
    assert 0 <= alignment_score(medium[3], ExpectationStrategy("factorized", 2048)) <= 1
