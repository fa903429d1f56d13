"""Population expectations over the latent/noise hypercubes.

Every expectation in the package is a weighted sum over *pair blocks*.  A block
holds A-side and B-side latents for positive pairs plus separate pools of
negatives for the two inner expectations:

* exact mode uses a single block containing every sign vector.  The pools are
  shared, so the kernel ``exp(tau^2 <f_A, f_B>)`` is evaluated once on the full
  ``2^d x 2^d`` grid and positives are the entries whose ``z`` parts agree;
* Monte Carlo mode draws fixed-size blocks of quads, one substream per block
  index.  Each positive uses the block's negatives for its inner average;
* factorized mode evaluates the inner expectations in closed form.  Negatives
  have independent sign coordinates, so ``E exp(v . u) = prod_k cosh(v_k)``
  and its moments are products of cosh and tanh terms.  Only the positives are
  enumerated, or sampled when enumeration is over budget.

Block results are reduced in index order with compensated summation, so an MC
estimate depends on ``(mc_samples, mc_seed, block)`` only and not on how many
workers evaluated the blocks.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import ContractError, all_signs, random_signs

DEFAULT_BUDGET = 2**24


class BudgetError(ValueError):
    """Exact enumeration would exceed the configured evaluation budget."""


@dataclass(frozen=True)
class ExpectationStrategy:
    mode: str = "exact"
    mc_samples: int = 1 << 16
    mc_seed: int = 0
    budget: int = DEFAULT_BUDGET
    block: int = 1024
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in ("exact", "monte_carlo", "factorized"):
            raise ContractError(f"unknown expectation mode {self.mode!r}")
        if self.mc_samples < 1 or self.block < 1:
            raise ContractError("mc_samples and block must be positive")


EXACT = ExpectationStrategy()


def exact_cost(d):
    """Kernel evaluations for one exact pass: every A latent against every B latent."""
    return 4**d


def check_budget(d, strategy):
    if exact_cost(d) > strategy.budget:
        raise BudgetError(f"exact enumeration at d={d} needs {exact_cost(d)} evaluations "
                          f"(budget {strategy.budget})")


@dataclass
class PairBlock:
    """Sign arrays (rows are ``[z, xi]``) and weights for one block.

    ``pos_A[ia[k]]`` and ``pos_B[ib[k]]`` form positive pair k with weight
    ``wp[k]``; ``neg_A``/``neg_B`` with weights ``wa``/``wb`` are the pools of
    the two inner expectations.  When ``shared`` is true all four pools are the
    same array.
    """

    pos_A: np.ndarray
    pos_B: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    wp: np.ndarray
    neg_A: np.ndarray
    wa: np.ndarray
    neg_B: np.ndarray
    wb: np.ndarray
    shared: bool = False
    factorized: bool = False

    @property
    def size(self):
        return len(self.wp)


def exact_block(r, d):
    U = all_signs(d).astype(float)
    nq = 2 ** (d - r)
    z = np.repeat(np.arange(2**r), nq * nq)
    a = np.tile(np.repeat(np.arange(nq), nq), 2**r)
    b = np.tile(np.arange(nq), nq * 2**r)
    n = len(z)
    w = np.full(len(U), 1.0 / len(U))
    return PairBlock(U, U, z * nq + a, z * nq + b, np.full(n, 1.0 / n), U, w, U, w, shared=True)


def mc_block(r, d, n, seed, index):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))
    q = d - r
    zp, zm = random_signs(rng, (n, r)), random_signs(rng, (n, r))
    xa_p, xb_p = random_signs(rng, (n, q)), random_signs(rng, (n, q))
    xa_m, xb_m = random_signs(rng, (n, q)), random_signs(rng, (n, q))
    pos_A = np.hstack([zp, xa_p]).astype(float)
    pos_B = np.hstack([zp, xb_p]).astype(float)
    neg_A = np.hstack([zm, xa_m]).astype(float)
    neg_B = np.hstack([zm, xb_m]).astype(float)
    idx = np.arange(n)
    w = np.full(n, 1.0 / n)
    return PairBlock(pos_A, pos_B, idx, idx, w, neg_A, w, neg_B, w)


def positives_exact(r, d):
    """Every positive triple ``(z, xi_A, xi_B)`` with inner expectations left analytic."""
    q = d - r
    Z = np.repeat(all_signs(r), 4**q, axis=0)
    XA = np.tile(np.repeat(all_signs(q), 2**q, axis=0), (2**r, 1))
    XB = np.tile(all_signs(q), (4**q * 2**r // 2**q, 1))
    return _factorized_block(Z, XA, XB)


def positives_mc(r, d, n, seed, index):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))
    return _factorized_block(random_signs(rng, (n, r)), random_signs(rng, (n, d - r)),
                             random_signs(rng, (n, d - r)))


def _factorized_block(Z, XA, XB):
    pos_A = np.hstack([Z, XA]).astype(float)
    pos_B = np.hstack([Z, XB]).astype(float)
    n = len(pos_A)
    idx = np.arange(n)
    w = np.full(n, 1.0 / n)
    empty = np.zeros((0, pos_A.shape[1]))
    return PairBlock(pos_A, pos_B, idx, idx, w, empty, np.zeros(0), empty, np.zeros(0), factorized=True)


def positives_cost(r, d):
    return 2**r * 4 ** (d - r)


def quad_block(quad):
    """Wrap a stacked SampleQuad (e.g. a training batch) as one block."""
    pos_A = np.hstack([quad.z_plus, quad.xi_A_plus]).astype(float)
    pos_B = np.hstack([quad.z_plus, quad.xi_B_plus]).astype(float)
    neg_A = np.hstack([quad.z_minus, quad.xi_A_minus]).astype(float)
    neg_B = np.hstack([quad.z_minus, quad.xi_B_minus]).astype(float)
    n = len(pos_A)
    idx = np.arange(n)
    w = np.full(n, 1.0 / n)
    return PairBlock(pos_A, pos_B, idx, idx, w, neg_A, w, neg_B, w)


def block_plan(r, d, strategy):
    """List of ``(weight, thunk)`` pairs that together define the measure."""
    if strategy.mode == "exact":
        check_budget(d, strategy)
        return [(1.0, lambda: exact_block(r, d))]
    if strategy.mode == "factorized" and positives_cost(r, d) * d <= strategy.budget:
        return [(1.0, lambda: positives_exact(r, d))]
    n, b = strategy.mc_samples, strategy.block
    sizes = [b] * (n // b) + ([n % b] if n % b else [])
    make = positives_mc if strategy.mode == "factorized" else mc_block
    return [(s / n, (lambda k=k, s=s: make(r, d, s, strategy.mc_seed, k))) for k, s in enumerate(sizes)]


class CompensatedSum:
    """Neumaier summation over arrays of a fixed shape."""

    def __init__(self):
        self.s = None
        self.c = None

    def add(self, x):
        x = np.asarray(x, dtype=float)
        if self.s is None:
            self.s, self.c = x.copy(), np.zeros_like(x)
            return
        t = self.s + x
        self.c += np.where(np.abs(self.s) >= np.abs(x), (self.s - t) + x, (x - t) + self.s)
        self.s = t

    def value(self):
        return self.s + self.c


@dataclass
class Estimate:
    """Weighted means of named block statistics with block-level standard errors."""

    mean: dict
    stderr: dict

    def __getitem__(self, key):
        return self.mean[key]


def evaluate(r, d, strategy, stat):
    """Average ``stat(block) -> dict[str, array]`` over the strategy's measure."""
    plan = block_plan(r, d, strategy)

    def run(item):
        return stat(item[1]())

    if strategy.jobs > 1 and len(plan) > 1:
        with ThreadPoolExecutor(strategy.jobs) as pool:
            results = list(pool.map(run, plan))
    else:
        results = [run(item) for item in plan]
    sums, sq = {}, {}
    for (w, _), res in zip(plan, results):
        for key, val in res.items():
            sums.setdefault(key, CompensatedSum()).add(w * np.asarray(val, float))
            sq.setdefault(key, CompensatedSum()).add(w * np.asarray(val, float) ** 2)
    mean = {k: v.value() for k, v in sums.items()}
    stderr = {}
    nb = len(plan)
    for k in mean:
        if nb < 2:
            stderr[k] = np.zeros_like(mean[k])
        else:
            var = np.maximum(sq[k].value() - mean[k] ** 2, 0.0)
            stderr[k] = np.sqrt(var / (nb - 1))
    return Estimate(mean, stderr)


def cross_matrix(kstate):
    """``M`` with ``<f_A(s_A), f_B(s_B)> = s_A^T M s_B`` for sign rows."""
    return kstate.full("A").T @ kstate.full("B") / (kstate.N_A * kstate.N_B * kstate.d)


@dataclass
class Scores:
    """Per-block kernel quantities shared by losses, Q-sets and gradients."""

    g: np.ndarray       # <f_A+, f_B+> per positive pair
    e: np.ndarray       # exp(tau^2 g)
    G1: np.ndarray      # <f_A(pos_A), f_B(neg_B)>
    E1: np.ndarray
    G2: np.ndarray      # <f_A(neg_A), f_B(pos_B)>
    E2: np.ndarray
    inner_A: np.ndarray
    inner_B: np.ndarray
    s_A: np.ndarray
    s_B: np.ndarray
    log_s_A: np.ndarray
    log_s_B: np.ndarray
    # factorized blocks only: E_-[e u] (sign units) and E_-[e G] per positive
    mom_A: np.ndarray = None
    mom_B: np.ndarray = None
    eg_A: np.ndarray = None
    eg_B: np.ndarray = None


def _log_cosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2 * ax)) - math.log(2)


def _factorized_scores(M, tau_sq, K, block):
    CA = block.pos_A @ M            # <f_A(pos), f_B(s)> = CA . s
    CB = block.pos_B @ M.T
    g = np.einsum("ij,ij->i", CA, block.pos_B)
    inner_A = np.exp(np.sum(_log_cosh(tau_sq * CA), axis=1))
    inner_B = np.exp(np.sum(_log_cosh(tau_sq * CB), axis=1))
    tA, tB = np.tanh(tau_sq * CA), np.tanh(tau_sq * CB)
    e = np.exp(tau_sq * g)
    den_A = e + K * inner_A
    den_B = e + K * inner_B
    return Scores(g, e, None, None, None, None, inner_A, inner_B, e / den_A, e / den_B,
                  tau_sq * g - np.log(den_A), tau_sq * g - np.log(den_B),
                  inner_A[:, None] * tA, inner_B[:, None] * tB,
                  inner_A * np.sum(CA * tA, axis=1), inner_B * np.sum(CB * tB, axis=1))


def scores(kstate, tau_sq, K, block):
    M = cross_matrix(kstate)
    if block.factorized:
        return _factorized_scores(M, tau_sq, K, block)
    P = block.pos_A @ M
    G1 = P @ block.neg_B.T
    E1 = np.exp(tau_sq * G1)
    if block.shared:
        G2, E2 = G1, E1
        g = G1[block.ia, block.ib]
    else:
        G2 = (block.neg_A @ M) @ block.pos_B.T
        E2 = np.exp(tau_sq * G2)
        g = np.einsum("ij,ij->i", P[block.ia], block.pos_B[block.ib])
    inner_A = E1 @ block.wb
    inner_B = block.wa @ E2
    e = np.exp(tau_sq * g)
    den_A = e + K * inner_A[block.ia]
    den_B = e + K * inner_B[block.ib]
    return Scores(g, e, G1, E1, G2, E2, inner_A, inner_B, e / den_A, e / den_B,
                  tau_sq * g - np.log(den_A), tau_sq * g - np.log(den_B))


def _check(kstate, tau_sq):
    if tau_sq < 0:
        raise ContractError("tau_sq must be non-negative")


def _loss_stat(kstate, tau_sq, K):
    def stat(block):
        sc = scores(kstate, tau_sq, K, block)
        return {
            "loss": -block.wp @ (sc.log_s_A + sc.log_s_B),
            "S_A": block.wp @ sc.s_A,
            "S_B": block.wp @ sc.s_B,
        }
    return stat


def contrastive_loss(kstate, tau_sq, K, strategy=EXACT, with_stderr=False):
    """Population contrastive loss ``-E log S_A - E log S_B``."""
    _check(kstate, tau_sq)
    est = evaluate(kstate.r, kstate.d, strategy, _loss_stat(kstate, tau_sq, K))
    if with_stderr:
        return float(est["loss"]), float(est.stderr["loss"])
    return float(est["loss"])


def mean_scores(kstate, tau_sq, K, strategy=EXACT):
    """Expected ``S_A`` and ``S_B`` over positive pairs."""
    est = evaluate(kstate.r, kstate.d, strategy, _loss_stat(kstate, tau_sq, K))
    return float(est["S_A"]), float(est["S_B"])


def softmax_score(kstate, tau_sq, K, positives, side="A", strategy=EXACT, with_stderr=False):
    """``S_A`` (or ``S_B``) at one positive pair given as sign vectors.

    ``positives`` is ``(z, xi_A, xi_B)`` with entries in {+1, -1}.  The inner
    expectation runs over the opposite side's negatives only.
    """
    _check(kstate, tau_sq)
    z, xa, xb = (np.asarray(v, float).reshape(-1) for v in positives)
    ua, ub = np.concatenate([z, xa]), np.concatenate([z, xb])
    if len(ua) != kstate.d or len(ub) != kstate.d:
        raise ContractError("positive pair does not match KState dimensions")
    M = cross_matrix(kstate)
    e = math.exp(tau_sq * float(ua @ M @ ub))

    def stat(block):
        if block.factorized:
            v = M.T @ ua if side == "A" else M @ ub
            return {"inner": math.exp(float(np.sum(_log_cosh(tau_sq * v))))}
        pool = block.neg_B if side == "A" else block.neg_A
        w = block.wb if side == "A" else block.wa
        vals = pool @ (M.T @ ua) if side == "A" else pool @ (M @ ub)
        return {"inner": w @ np.exp(tau_sq * vals)}

    est = evaluate(kstate.r, kstate.d, strategy, stat)
    inner = float(est["inner"])
    s = e / (e + K * inner)
    if with_stderr:
        # delta method through s = e / (e + K I)
        return s, float(abs(K * e / (e + K * inner) ** 2) * est.stderr["inner"])
    return s


def non_contrastive_closed_form(kstate):
    return -float(np.sum(kstate.K_A * kstate.K_B)) / (kstate.N_A * kstate.N_B * kstate.d)


def non_contrastive_loss(kstate, strategy=None):
    """``-E <f_A+, f_B+>``.

    The closed form is returned; when a strategy is given the expectation is
    also evaluated under it and the two are required to agree.
    """
    closed = non_contrastive_closed_form(kstate)
    if strategy is None:
        return closed
    M = cross_matrix(kstate)

    def stat(block):
        g = np.einsum("ij,ij->i", block.pos_A[block.ia] @ M, block.pos_B[block.ib])
        return {"loss": -block.wp @ g}

    est = evaluate(kstate.r, kstate.d, strategy, stat)
    value, se = float(est["loss"]), float(est.stderr["loss"])
    tol = 1e-10 * max(1.0, abs(closed)) if strategy.mode == "exact" else 6 * se + 1e-12
    if abs(value - closed) > tol:
        raise AssertionError(f"non-contrastive loss mismatch: closed {closed!r} vs {value!r}")
    return closed
