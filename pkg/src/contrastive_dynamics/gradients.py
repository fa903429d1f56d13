"""Closed-form gradients, Q-coefficients and K-matrix rates.

Rates are for the rescaled flow ``dW/dt = -tau^{-2} grad L`` (plain ``-grad``
for the non-contrastive loss), so they stay O(1) as ``tau -> 0``.

Two independent routes produce the K rates:

* :func:`compute_qset` + :func:`krates_from_qset` work in the d x d latent
  space, folding every expectation into the coefficient matrices;
* :func:`krates_direct` evaluates the expectations of embedding/latent outer
  products in the m-dimensional feature space.  The same feature-space terms,
  pushed through the encoder instead of its Gram matrix, give the W gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expectation import EXACT, cross_matrix, evaluate, scores
from .model import ContractError, KState, compute_kstate


class DegenerateColumnError(ValueError):
    """A K-matrix column has zero norm, so its direction is undefined."""


@dataclass(frozen=True)
class QSet:
    Q0: float
    Q1: np.ndarray
    Q1_xiA: np.ndarray
    Q1_xiB: np.ndarray
    Q2: np.ndarray

    @classmethod
    def from_big(cls, q0, big, r):
        return cls(float(q0), big[:r, :r], big[:r, r:].T, big[r:, :r], big[r:, r:])

    @property
    def big(self):
        """Block matrix ``[[Q1, Q1_xiA^T], [Q1_xiB, Q2]]`` (d x d)."""
        top = np.hstack([self.Q1, self.Q1_xiA.T])
        bottom = np.hstack([self.Q1_xiB, self.Q2])
        return np.vstack([top, bottom])

    @classmethod
    def zeros(cls, r, d):
        return cls.from_big(0.0, np.zeros((d, d)), r)


@dataclass(frozen=True)
class KRates:
    dK_A: np.ndarray
    dK_B: np.ndarray
    dK_A_xi: np.ndarray
    dK_B_xi: np.ndarray

    @classmethod
    def from_full(cls, dA, dB, r):
        return cls(dA[:, :r], dB[:, :r], dA[:, r:], dB[:, r:])

    def full(self, side):
        if side == "A":
            return np.hstack([self.dK_A, self.dK_A_xi])
        return np.hstack([self.dK_B, self.dK_B_xi])

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(
            (self.dK_A, self.dK_B, self.dK_A_xi, self.dK_B_xi),
            (other.dK_A, other.dK_B, other.dK_A_xi, other.dK_B_xi)))


def _sigma_full(kstate, sigma_sq, sigma_xi_sq):
    sigma_sq = np.asarray(sigma_sq, float)
    if sigma_sq.shape != (kstate.r,):
        raise ContractError("sigma_sq length must equal r")
    return np.concatenate([sigma_sq, np.full(kstate.d - kstate.r, float(sigma_xi_sq))])


# ---------------------------------------------------------------------------
# latent-space route


def qset_stat(kstate, tau_sq, K):
    """Block statistic for ``d * E[...]`` Q-coefficients in sign units."""

    def stat(block):
        sc = scores(kstate, tau_sq, K, block)
        c = block.wp * (2.0 - sc.s_A - sc.s_B)
        pos = (block.pos_B[block.ib] * c[:, None]).T @ block.pos_A[block.ia]
        alpha_A = np.bincount(block.ia, block.wp * sc.s_A / sc.e, minlength=len(block.pos_A))
        alpha_B = np.bincount(block.ib, block.wp * sc.s_B / sc.e, minlength=len(block.pos_B))
        if block.factorized:
            neg_A = (sc.mom_A * alpha_A[:, None]).T @ block.pos_A
            neg_B = (block.pos_B * alpha_B[:, None]).T @ sc.mom_B
            q0 = -c @ sc.g + K * alpha_A @ sc.eg_A + K * alpha_B @ sc.eg_B
        else:
            neg_A = (block.neg_B * block.wb[:, None]).T @ (sc.E1.T @ (block.pos_A * alpha_A[:, None]))
            neg_B = (block.pos_B * alpha_B[:, None]).T @ (sc.E2.T @ (block.neg_A * block.wa[:, None]))
            q0 = (-c @ sc.g
                  + K * alpha_A @ ((sc.E1 * sc.G1) @ block.wb)
                  + K * (block.wa @ (sc.E2 * sc.G2)) @ alpha_B)
        return {"big": pos - K * (neg_A + neg_B), "q0": q0,
                "loss": -block.wp @ (sc.log_s_A + sc.log_s_B)}

    return stat


def compute_qset(kstate, tau_sq, K, strategy=EXACT, with_stderr=False):
    """All Q-coefficients from one pass over the strategy's sample stream."""
    est = evaluate(kstate.r, kstate.d, strategy, qset_stat(kstate, tau_sq, K))
    q = QSet.from_big(est["q0"], est["big"], kstate.r)
    if with_stderr:
        return q, QSet.from_big(est.stderr["q0"], est.stderr["big"], kstate.r)
    return q


def qset_non_contrastive(kstate):
    """Population Q-coefficients of the non-contrastive loss (closed form).

    Positive pairs share ``z`` and have independent noises, so ``d E[u_B u_A^T]``
    is the identity on the signal block and zero elsewhere.
    """
    r, d = kstate.r, kstate.d
    big = np.zeros((d, d))
    big[:r, :r] = np.eye(r)
    q0 = -float(np.sum(kstate.K_A * kstate.K_B)) / (kstate.N_A * kstate.N_B * d)
    return QSet.from_big(q0, big, r)


def qset_non_contrastive_block(kstate, block):
    """Empirical non-contrastive Q-coefficients on one block of positives."""
    M = cross_matrix(kstate)
    sa, sb = block.pos_A[block.ia], block.pos_B[block.ib]
    g = np.einsum("ij,ij->i", sa @ M, sb)
    big = (sb * block.wp[:, None]).T @ sa
    return QSet.from_big(-block.wp @ g, big, kstate.r)


def krates_from_qset(kstate, qset, sigma_sq, sigma_xi_sq):
    S = _sigma_full(kstate, sigma_sq, sigma_xi_sq)
    big = qset.big
    if big.shape != (kstate.d, kstate.d):
        raise ContractError("QSet shape does not match KState")
    d, NA, NB = kstate.d, kstate.N_A, kstate.N_B
    FA, FB = kstate.full("A"), kstate.full("B")
    dA = (FB @ big) * S / (NA * NB * d) + FA * (qset.Q0 * S / (NA**2 * d))
    dB = (FA @ big.T) * S / (NA * NB * d) + FB * (qset.Q0 * S / (NB**2 * d))
    return KRates.from_full(dA, dB, kstate.r)


def descent_from_qset(encoders, kstate, qset):
    """``-tau^{-2} grad`` with respect to ``(W_A, W_B)`` expressed through Q."""
    d, NA, NB = kstate.d, kstate.N_A, kstate.N_B
    big = qset.big
    FA, FB = kstate.full("A"), kstate.full("B")
    D_A = encoders.full("A") @ ((big.T @ FB.T) / (NA * NB * d) + qset.Q0 * FA.T / (NA**2 * d))
    D_B = encoders.full("B") @ ((big @ FA.T) / (NA * NB * d) + qset.Q0 * FB.T / (NB**2 * d))
    return D_A, D_B


# ---------------------------------------------------------------------------
# feature-space route


def _features(kstate, side, signs):
    d = kstate.d
    return signs @ kstate.full(side).T / (np.sqrt(d) * kstate.norm(side))


def feature_terms_stat(kstate, tau_sq, K):
    """Embedding-latent moments of the three gradient terms.

    For side A returns ``P_A`` (m x d) and scalar ``s_A`` such that
    ``-tau^{-2} grad_{W_A} L = [A, A_xi] (P_A / N_A - s_A K_full_A / (N_A^2 d))^T``.
    """
    sq = np.sqrt(kstate.d)

    def stat(block):
        sc = scores(kstate, tau_sq, K, block)
        c = block.wp * (2.0 - sc.s_A - sc.s_B)
        alpha_A = np.bincount(block.ia, block.wp * sc.s_A / sc.e, minlength=len(block.pos_A))
        alpha_B = np.bincount(block.ib, block.wp * sc.s_B / sc.e, minlength=len(block.pos_B))
        fa_pos, fb_pos = _features(kstate, "A", block.pos_A), _features(kstate, "B", block.pos_B)
        ua_pos, ub_pos = block.pos_A / sq, block.pos_B / sq

        # positive-pair term
        P_A = (fb_pos[block.ib] * c[:, None]).T @ ua_pos[block.ia]
        P_B = (fa_pos[block.ia] * c[:, None]).T @ ub_pos[block.ib]
        s = c @ sc.g
        if block.factorized:
            # inner moments E_-[e u] are analytic; push them through the encoders
            mA, mB = sc.mom_A * alpha_A[:, None], sc.mom_B * alpha_B[:, None]
            P_A = P_A - K * _features(kstate, "B", mA).T @ ua_pos - K * (fb_pos * alpha_B[:, None]).T @ (sc.mom_B / sq)
            P_B = P_B - K * (fa_pos * alpha_A[:, None]).T @ (sc.mom_A / sq) - K * _features(kstate, "A", mB).T @ ub_pos
            return {"P_A": P_A, "P_B": P_B, "s": s - K * alpha_A @ sc.eg_A - K * alpha_B @ sc.eg_B}
        fa_neg, fb_neg = _features(kstate, "A", block.neg_A), _features(kstate, "B", block.neg_B)
        ua_neg, ub_neg = block.neg_A / sq, block.neg_B / sq
        # negatives of S_A: (x_A+, x_B-)
        mixed_A = sc.E1.T @ (ua_pos * alpha_A[:, None])           # over B negatives
        P_A = P_A - K * (fb_neg * block.wb[:, None]).T @ mixed_A
        P_B = P_B - K * ((sc.E1.T @ (fa_pos * alpha_A[:, None])) * block.wb[:, None]).T @ ub_neg
        n1 = K * alpha_A @ ((sc.E1 * sc.G1) @ block.wb)
        # negatives of S_B: (x_A-, x_B+)
        P_A = P_A - K * ((sc.E2 @ (fb_pos * alpha_B[:, None])) * block.wa[:, None]).T @ ua_neg
        P_B = P_B - K * (fa_neg * block.wa[:, None]).T @ (sc.E2 @ (ub_pos * alpha_B[:, None]))
        n2 = K * (block.wa @ (sc.E2 * sc.G2)) @ alpha_B
        return {"P_A": P_A, "P_B": P_B, "s": s - n1 - n2}

    return stat


def non_contrastive_terms_stat(kstate):
    sq = np.sqrt(kstate.d)

    def stat(block):
        fa, fb = _features(kstate, "A", block.pos_A)[block.ia], _features(kstate, "B", block.pos_B)[block.ib]
        ua, ub = block.pos_A[block.ia] / sq, block.pos_B[block.ib] / sq
        w = block.wp[:, None]
        return {"P_A": (fb * w).T @ ua, "P_B": (fa * w).T @ ub,
                "s": block.wp @ np.einsum("ij,ij->i", fa, fb)}

    return stat


def _terms(kstate, tau_sq, K, strategy, loss_kind):
    if loss_kind == "contrastive":
        stat = feature_terms_stat(kstate, tau_sq, K)
    elif loss_kind == "non_contrastive":
        stat = non_contrastive_terms_stat(kstate)
    else:
        raise ContractError(f"unknown loss kind {loss_kind!r}")
    return evaluate(kstate.r, kstate.d, strategy, stat)


def _pushforward(kstate, est):
    d, NA, NB = kstate.d, kstate.N_A, kstate.N_B
    TA = est["P_A"] / NA - est["s"] * kstate.full("A") / (NA**2 * d)
    TB = est["P_B"] / NB - est["s"] * kstate.full("B") / (NB**2 * d)
    return TA, TB


def grad_contrastive(weights, encoders, tau_sq, K, strategy=EXACT):
    """``(grad_{W_A} L, grad_{W_B} L)`` of the contrastive loss (not rescaled)."""
    kstate = compute_kstate(weights, encoders)
    TA, TB = _pushforward(kstate, _terms(kstate, tau_sq, K, strategy, "contrastive"))
    return -tau_sq * encoders.full("A") @ TA.T, -tau_sq * encoders.full("B") @ TB.T


def grad_non_contrastive(weights, encoders, strategy=EXACT):
    kstate = compute_kstate(weights, encoders)
    TA, TB = _pushforward(kstate, _terms(kstate, 1.0, 0.0, strategy, "non_contrastive"))
    return -encoders.full("A") @ TA.T, -encoders.full("B") @ TB.T


def krates_direct(weights, encoders, tau_sq, K, strategy=EXACT, loss_kind="contrastive"):
    """K rates from the embedding-space expectation form."""
    kstate = compute_kstate(weights, encoders)
    TA, TB = _pushforward(kstate, _terms(kstate, tau_sq, K, strategy, loss_kind))
    GA = encoders.full("A").T @ encoders.full("A")
    GB = encoders.full("B").T @ encoders.full("B")
    return KRates.from_full(TA @ GA, TB @ GB, kstate.r)


# ---------------------------------------------------------------------------
# decompositions and audits


def radial_tangent_rates(kstate, qset, sigma_sq, sigma_xi_sq):
    """Per-column ``d/dt ||k||^2`` and ``d/dt (k / ||k||)`` for all four K matrices."""
    rates = krates_from_qset(kstate, qset, sigma_sq, sigma_xi_sq)
    out = {}
    for name, K_, dK in (("K_A", kstate.K_A, rates.dK_A), ("K_B", kstate.K_B, rates.dK_B),
                         ("K_A_xi", kstate.K_A_xi, rates.dK_A_xi), ("K_B_xi", kstate.K_B_xi, rates.dK_B_xi)):
        norms = np.linalg.norm(K_, axis=0)
        if np.any(norms == 0):
            raise DegenerateColumnError(f"{name} has a zero column")
        unit = K_ / norms
        radial = np.sum(unit * dK, axis=0)
        out[name] = {"norm_sq_rate": 2 * norms * radial,
                     "unit_rate": (dK - unit * radial) / norms}
    return out


def finite_difference_audit(weights, encoders, tau_sq=1.0, K=1.0, steps=(1e-5,), loss_kind="contrastive"):
    """Compare closed-form gradients against central differences of the loss.

    The error at a step is ``max|fd - grad| / max|grad|`` over all entries of
    both weight matrices; the report keeps every step and the minimum.
    """
    from .expectation import contrastive_loss, non_contrastive_loss

    if loss_kind == "contrastive":
        gA, gB = grad_contrastive(weights, encoders, tau_sq, K)

        def loss(w):
            return contrastive_loss(compute_kstate(w, encoders), tau_sq, K)
    else:
        gA, gB = grad_non_contrastive(weights, encoders)

        def loss(w):
            return non_contrastive_loss(compute_kstate(w, encoders))

    analytic = np.concatenate([gA.ravel(), gB.ravel()])
    base = np.concatenate([weights.W_A.ravel(), weights.W_B.ravel()])
    split = weights.W_A.size
    shape = weights.W_A.shape

    def at(v):
        return type(weights)(v[:split].reshape(shape), v[split:].reshape(weights.W_B.shape))

    errors = {}
    scale = np.max(np.abs(analytic))
    for h in steps:
        fd = np.empty_like(base)
        for i in range(len(base)):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (loss(at(up)) - loss(at(dn))) / (2 * h)
        errors[float(h)] = float(np.max(np.abs(fd - analytic)) / scale)
    return {"errors": errors, "max_relative_error": min(errors.values()), "loss_kind": loss_kind}


def kstate_from_full(FA, FB, r):
    return KState.from_blocks(FA[:, :r], FB[:, :r], FA[:, r:], FB[:, r:])
