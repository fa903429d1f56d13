"""Observables of a KState: alignment, balance, conditioning and diagnostics."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, asdict

import numpy as np

from .expectation import EXACT, evaluate
from .gradients import DegenerateColumnError


@dataclass(frozen=True)
class MetricsRecord:
    gamma_align: float
    gamma_balance: float
    kappa0: float
    rho_minus: float
    rho_ns: float
    rho_hat_ns: float
    sigma_f_top: tuple

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiagnosticsRecord:
    delta_AB: float
    delta_xi_kappa0: float
    delta_AB_perp: float
    delta_xi_perp: float

    def max(self):
        return max(self.delta_AB, self.delta_xi_kappa0, self.delta_AB_perp, self.delta_xi_perp)

    def orthogonality(self):
        return max(self.delta_AB_perp, self.delta_xi_perp)


def _col_norms(M, name):
    n = np.linalg.norm(M, axis=0)
    if np.any(n == 0):
        raise DegenerateColumnError(f"{name} has a zero column")
    return n


def _quad_forms(kstate):
    """Latent-space matrices giving squared feature norms and cross products."""
    d = kstate.d
    FA, FB = kstate.full("A"), kstate.full("B")
    MA = FA.T @ FA / (kstate.N_A**2 * d)
    MB = FB.T @ FB / (kstate.N_B**2 * d)
    MX = FA.T @ FB / (kstate.N_A * kstate.N_B * d)
    return MA, MB, MX


def alignment_from_distances(pos, neg_B, neg_A):
    """Strict-inequality alignment given squared distances.

    ``pos`` has shape (n,), ``neg_B``/``neg_A`` shape (n,) or (n, k) holding
    distances to replaced B (resp. A) samples.
    """
    pos = np.asarray(pos)[:, None]
    first = np.mean(np.asarray(neg_B).reshape(len(pos), -1) > pos, axis=1)
    second = np.mean(np.asarray(neg_A).reshape(len(pos), -1) > pos, axis=1)
    return 0.5 * (first + second)


def alignment_from_features(fa_pos, fb_pos, fa_neg, fb_neg):
    """Alignment score from explicit embeddings of stacked quads."""
    pos = np.sum((fa_pos - fb_pos) ** 2, axis=1)
    nb = np.sum((fa_pos - fb_neg) ** 2, axis=1)
    na = np.sum((fa_neg - fb_pos) ** 2, axis=1)
    return float(np.mean(alignment_from_distances(pos, nb, na)))


def alignment_score(kstate, strategy=EXACT, with_stderr=False):
    if strategy.mode == "factorized":
        # the indicator has no analytic inner expectation; sample pairs instead
        strategy = dataclasses.replace(strategy, mode="monte_carlo")
    MA, MB, MX = _quad_forms(kstate)

    def stat(block):
        # squared distances as quadratic forms in the sign vectors
        qa_pos = np.einsum("ij,ij->i", block.pos_A @ MA, block.pos_A)
        qb_pos = np.einsum("ij,ij->i", block.pos_B @ MB, block.pos_B)
        qa_neg = np.einsum("ij,ij->i", block.neg_A @ MA, block.neg_A)
        qb_neg = np.einsum("ij,ij->i", block.neg_B @ MB, block.neg_B)
        ia, ib = block.ia, block.ib
        if block.shared:
            C = (block.pos_A @ MX) @ block.neg_B.T
            D1 = qa_pos[:, None] + qb_neg[None, :] - 2 * C
            pos = D1[ia, ib]  # same arithmetic as the pool, so exact ties stay ties
            # fraction of the pool strictly farther than the positive, per pair
            srt_rows = np.sort(D1, axis=1)
            srt_cols = np.sort(D1, axis=0).T
            n = D1.shape[1]
            first = np.empty(len(ia))
            second = np.empty(len(ia))
            for a in np.unique(ia):
                sel = ia == a
                first[sel] = n - np.searchsorted(srt_rows[a], pos[sel], side="right")
            for b in np.unique(ib):
                sel = ib == b
                second[sel] = n - np.searchsorted(srt_cols[b], pos[sel], side="right")
            val = 0.5 * (first + second) / n
        else:
            cross_pos = np.einsum("ij,ij->i", block.pos_A[ia] @ MX, block.pos_B[ib])
            pos = qa_pos[ia] + qb_pos[ib] - 2 * cross_pos
            nb = qa_pos[ia] + qb_neg - 2 * np.einsum("ij,ij->i", block.pos_A[ia] @ MX, block.neg_B)
            na = qa_neg + qb_pos[ib] - 2 * np.einsum("ij,ij->i", block.neg_A @ MX, block.pos_B[ib])
            val = alignment_from_distances(pos, nb, na)
        return {"gamma": block.wp @ val}

    est = evaluate(kstate.r, kstate.d, strategy, stat)
    g = float(np.clip(est["gamma"], 0.0, 1.0))
    if with_stderr:
        return g, float(est.stderr["gamma"])
    return g


def feature_covariance_spectrum(kstate):
    """Eigenvalues (descending) of ``Sigma_f = K_full K_full^T / (N_A^2 d)``.

    Computed from the d x d Gram matrix, which shares the non-zero spectrum.
    """
    FA = kstate.full("A")
    gram = FA.T @ FA / (kstate.N_A**2 * kstate.d)
    ev = np.linalg.eigvalsh(gram)[::-1]
    return np.clip(ev, 0.0, None)


def balance_score(kstate):
    ev = feature_covariance_spectrum(kstate)
    # normalise first so an equal spectrum gives exactly r
    return float(np.sum((ev / ev[0]) ** 2))


def top_singular_values(kstate, k=None):
    k = min(kstate.m, kstate.r + 4) if k is None else k
    ev = feature_covariance_spectrum(kstate)
    out = np.zeros(k)
    n = min(k, len(ev))
    out[:n] = ev[:n]
    return out


def condition_numbers(kstate):
    n = _col_norms(kstate.K_A, "K_A")
    sv = np.linalg.svd(kstate.K_A, compute_uv=False)[: kstate.r]
    if sv[-1] == 0:
        raise DegenerateColumnError("K_A is rank deficient")
    return float(n.max() / n.min()), float(sv[0] / sv[-1])


def ratios(kstate):
    na = _col_norms(kstate.K_A, "K_A")
    nb = _col_norms(kstate.K_B, "K_B")
    cos = np.sum(kstate.K_A * kstate.K_B, axis=0) / (na * nb)
    rho_minus = float(np.max(1.0 - cos))
    if kstate.K_A_xi.shape[1] == 0:
        return rho_minus, 0.0, 0.0
    nx = np.linalg.norm(kstate.K_A_xi, axis=0)
    rho_ns = float(nx.max() / na.min())
    rho_hat = float(np.linalg.norm(kstate.K_A_xi) / np.linalg.norm(kstate.K_A + kstate.K_B))
    return rho_minus, rho_ns, rho_hat


def _unit(M):
    n = np.linalg.norm(M, axis=0)
    return M / np.where(n == 0, 1.0, n)


def _max_abs(M, off_diagonal=False):
    if M.size == 0:
        return 0.0
    M = np.abs(M)
    if off_diagonal:
        M = M - np.diag(np.diag(M))
    return float(M.max())


def diagnostics(kstate):
    na = _col_norms(kstate.K_A, "K_A")
    nb = _col_norms(kstate.K_B, "K_B")
    delta_AB = float(np.max(np.abs(1 - na**2 / nb**2)))
    # an identically zero noise block is the noise-free model
    has_noise = bool(np.any(kstate.K_A_xi) or np.any(kstate.K_B_xi))
    if has_noise:
        nxa = _col_norms(kstate.K_A_xi, "K_A_xi")
        nxb = _col_norms(kstate.K_B_xi, "K_B_xi")
        delta_AB = max(delta_AB, float(np.max(np.abs(1 - nxa**2 / nxb**2))))
        delta_xi_kappa0 = max(float(nxa.max() / nxa.min() - 1), float(nxb.max() / nxb.min() - 1))
    else:
        delta_xi_kappa0 = 0.0
    UA, UB = _unit(kstate.K_A), _unit(kstate.K_B)
    perp = max(_max_abs(UA.T @ UA, True), _max_abs(UB.T @ UB, True), _max_abs(UA.T @ UB, True))  # p != q only
    xi_perp = 0.0
    if has_noise:
        XA, XB = _unit(kstate.K_A_xi), _unit(kstate.K_B_xi)
        S = np.hstack([UA, UB])
        xi_perp = max(_max_abs(S.T @ XA), _max_abs(S.T @ XB), _max_abs(XA.T @ XB),
                      _max_abs(XA.T @ XA, True), _max_abs(XB.T @ XB, True))
    return DiagnosticsRecord(delta_AB, delta_xi_kappa0, perp, xi_perp)


def metrics_record(kstate, strategy=EXACT):
    rho_minus, rho_ns, rho_hat = ratios(kstate)
    return MetricsRecord(
        gamma_align=alignment_score(kstate, strategy),
        gamma_balance=balance_score(kstate),
        kappa0=condition_numbers(kstate)[0],
        rho_minus=rho_minus,
        rho_ns=rho_ns,
        rho_hat_ns=rho_hat,
        sigma_f_top=tuple(float(v) for v in top_singular_values(kstate)),
    )
