"""Reduced dynamics of the noiseless infinite-width model.

In that limit the columns of K_A and K_B stay mutually orthogonal except for
matching pairs, so the state collapses to ``kappa_p^2 = ||[K_A]_p||^2`` and
``hat_kappa_p^2 = <[K_A]_p, [K_B]_p>``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateStateError(ValueError):
    """``||kappa||^2`` vanished."""


class StiffnessError(RuntimeError):
    """Positivity could not be restored by step halving."""


class InapplicableError(ValueError):
    """Traces do not satisfy the comparison lemma's hypotheses."""


@dataclass(frozen=True)
class InfiniteWidthState:
    kappa_sq: np.ndarray
    hat_kappa_sq: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kappa_sq, float)
        hk = np.asarray(self.hat_kappa_sq, float)
        if k.shape != hk.shape or k.ndim != 1:
            raise ValueError("kappa_sq and hat_kappa_sq must be vectors of equal length")
        object.__setattr__(self, "kappa_sq", k)
        object.__setattr__(self, "hat_kappa_sq", hk)

    @property
    def r(self):
        return len(self.kappa_sq)

    @classmethod
    def from_kstate(cls, kstate):
        """Measured state of a finite-width model (A/B column norms averaged)."""
        ka = np.sum(kstate.K_A**2, axis=0)
        kb = np.sum(kstate.K_B**2, axis=0)
        return cls(0.5 * (ka + kb), np.sum(kstate.K_A * kstate.K_B, axis=0))

    def valid(self):
        return bool(np.all(self.kappa_sq > 0) and np.all(np.abs(self.hat_kappa_sq) <= self.kappa_sq * (1 + 1e-12)))


@dataclass(frozen=True)
class ClosedForms:
    Z_c: float
    T: np.ndarray
    S_tilde: float
    T_tilde: float
    E_tilde: float


def closed_forms(state, tau_sq, K, norm_sq=None):
    """``Z_c``, ``T_p``, ``S~``, ``T~`` at the given state.

    ``norm_sq`` defaults to ``||kappa||^2``; finite-width audits pass
    ``N_A N_B d`` instead, which is what the enumerated expectations use.
    """
    ns = float(np.sum(state.kappa_sq)) if norm_sq is None else float(norm_sq)
    if ns <= 0:
        raise DegenerateStateError("||kappa||^2 must be positive")
    h = state.hat_kappa_sq / ns
    arg = tau_sq * h
    # log cosh without overflow
    log_zc = float(np.sum(np.abs(arg) + np.log1p(np.exp(-2 * np.abs(arg))) - math.log(2)))
    log_e = tau_sq * float(np.sum(h))
    T = np.tanh(arg)
    S = 1.0 / (1.0 + K * math.exp(log_zc - log_e))
    return ClosedForms(math.exp(log_zc), T, S, float(h @ T), math.exp(log_e))


def iw_rates(state, sigma_sq, tau_sq, K):
    """``(d kappa^2/dt, d hat_kappa^2/dt)`` of the rescaled flow."""
    sigma_sq = np.asarray(sigma_sq, float)
    ns = float(np.sum(state.kappa_sq))
    cf = closed_forms(state, tau_sq, K)
    a = state.kappa_sq / ns
    ah = state.hat_kappa_sq / ns
    ratio = float(np.sum(ah))
    coef = 4.0 * (1.0 - cf.S_tilde) * sigma_sq
    dk = coef * ((ah - ratio * a) - (ah * cf.T - a * cf.T_tilde))
    dh = coef * ((a - ratio * ah) - (a * cf.T - ah * cf.T_tilde))
    return dk, dh


def tau_function(schedule):
    """Map a float, a callable, or a training Schedule to ``t -> tau^2``.

    A Schedule is read in step units: ODE time ``t`` corresponds to GD step
    ``floor(t / eta)``.
    """
    if callable(schedule):
        return schedule
    if hasattr(schedule, "tau0_sq"):
        from .training import temperature

        def f(t):
            step = int(math.floor(t / schedule.eta + 1e-9))
            return temperature(schedule, min(step, schedule.T2 - 1))
        return f
    value = float(schedule)
    return lambda t: value


@dataclass
class IWTrajectory:
    t: np.ndarray
    kappa_sq: np.ndarray
    hat_kappa_sq: np.ndarray
    S_tilde: np.ndarray
    T_tilde: np.ndarray
    halvings: int = 0
    tau_sq: np.ndarray = field(default=None)

    def state(self, k):
        return InfiniteWidthState(self.kappa_sq[k], self.hat_kappa_sq[k])


def _rk4(state, sigma_sq, tau_sq, K, h):
    def f(k, hk):
        return iw_rates(InfiniteWidthState(k, hk), sigma_sq, tau_sq, K)

    k0, h0 = state.kappa_sq, state.hat_kappa_sq
    a1, b1 = f(k0, h0)
    a2, b2 = f(k0 + 0.5 * h * a1, h0 + 0.5 * h * b1)
    a3, b3 = f(k0 + 0.5 * h * a2, h0 + 0.5 * h * b2)
    a4, b4 = f(k0 + h * a3, h0 + h * b3)
    return InfiniteWidthState(k0 + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4),
                              h0 + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4))


def integrate_iw(state0, sigma_sq, schedule, h, T, K=1.0, max_halvings=20):
    """Classical RK4 on a fixed grid ``t_k = k h``.

    ``tau^2`` is held at its value at the start of each grid step.  A step that
    makes some ``kappa_p^2`` non-positive is redone with 2, 4, ... substeps.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tau = tau_function(schedule)
    n = int(round(T / h))
    r = state0.r
    ts = np.arange(n + 1) * h
    ks, hs = np.empty((n + 1, r)), np.empty((n + 1, r))
    S, Tt, taus = np.empty(n + 1), np.empty(n + 1), np.empty(n + 1)
    state = state0
    halvings = 0
    for i in range(n + 1):
        ks[i], hs[i] = state.kappa_sq, state.hat_kappa_sq
        taus[i] = tau(ts[i])
        cf = closed_forms(state, taus[i], K)
        S[i], Tt[i] = cf.S_tilde, cf.T_tilde
        if i == n:
            break
        for level in range(max_halvings + 1):
            sub = 2**level
            trial = state
            try:
                for _ in range(sub):
                    trial = _rk4(trial, sigma_sq, taus[i], K, h / sub)
                    if not np.all(trial.kappa_sq > 0):
                        break
            except DegenerateStateError:
                continue    # an intermediate RK stage left the positive cone
            if np.all(trial.kappa_sq > 0) and np.all(np.isfinite(trial.hat_kappa_sq)):
                halvings = max(halvings, level)
                state = trial
                break
        else:
            raise StiffnessError(f"positivity lost at t={ts[i]:.6g} after {max_halvings} halvings")
    return IWTrajectory(ts, ks, hs, S, Tt, halvings, taus)


def convergence_order(state0, sigma_sq, schedule, h, T, K=1.0):
    """Observed order from solutions at h, h/2, h/4 (Richardson ratio)."""
    sols = [integrate_iw(state0, sigma_sq, schedule, h / 2**j, T, K) for j in range(3)]
    ends = [np.concatenate([s.kappa_sq[-1], s.hat_kappa_sq[-1]]) for s in sols]
    e1 = np.max(np.abs(ends[0] - ends[1]))
    e2 = np.max(np.abs(ends[1] - ends[2]))
    # at an exact fixed point both differences vanish and the order is undefined
    order = math.log2(e1 / e2) if e1 > 0 and e2 > 0 else math.nan
    return float(order), float(e1), float(e2)


# ---------------------------------------------------------------------------
# comparison lemma


@dataclass(frozen=True)
class GronwallWitness:
    X0: float
    Y0: float
    beta: float
    A_trace: np.ndarray
    X_trace: np.ndarray
    Y_trace: np.ndarray
    t: np.ndarray = None

    @classmethod
    def from_traces(cls, t, X, Y, beta):
        """Witness for measured traces, with ``A`` inferred from the decay of X."""
        t, X, Y = (np.asarray(v, float) for v in (t, X, Y))
        if np.any(X <= 0) or np.any(np.diff(X) >= 0):
            raise InapplicableError("X trace must be positive and strictly decreasing")
        A = -np.diff(np.log(X)) / np.diff(t)  # one value per interval
        return cls(float(X[0]), float(Y[0]), float(beta), A, X, Y, t)


@dataclass(frozen=True)
class GronwallResult:
    passed: bool
    bound: float
    Y_T: float
    margin: float


def _log_mean(a, b):
    out = np.where(np.isclose(a, b, rtol=1e-12, atol=0), a, (a - b) / np.where(a == b, 1.0, np.log(a) - np.log(b)))
    return out


def gronwall_verify(w, tol=1e-6, slope_tol=1e-3):
    """Check ``Y_T <= Y_0 exp(beta X_0) (1 + tol)`` after checking the hypotheses.

    The hypotheses are checked interval by interval in integrated form with
    ``A`` piecewise constant (the mean of its endpoint samples, or the given
    value when ``A_trace`` has one entry per interval):
    ``log X`` must fall by at least ``(1 - slope_tol) * int A`` and ``log Y``
    may rise by at most ``(1 + slope_tol) * beta * int A X``, where ``int A X``
    uses the logarithmic mean of X, exact for exponential decay.
    """
    X, Y, A = (np.asarray(v, float) for v in (w.X_trace, w.Y_trace, w.A_trace))
    t = np.arange(len(X), dtype=float) if w.t is None else np.asarray(w.t, float)
    if min(X.min(), Y.min(), A.min()) <= 0 or w.beta < 0:
        raise InapplicableError("traces must be positive and beta non-negative")
    dt = np.diff(t)
    a_mid = A if len(A) == len(X) - 1 else 0.5 * (A[1:] + A[:-1])
    a_int = a_mid * dt
    dlogX = np.diff(np.log(X))
    if np.any(dlogX > -(1 - slope_tol) * a_int + 1e-15):
        raise InapplicableError("X does not decay at rate A")
    ax_int = a_int * _log_mean(X[1:], X[:-1])
    dlogY = np.diff(np.log(Y))
    if np.any(dlogY > (1 + slope_tol) * w.beta * ax_int + 1e-15):
        raise InapplicableError("Y grows faster than beta A X Y")
    bound = w.Y0 * math.exp(w.beta * w.X0)
    YT = float(Y[-1])
    return GronwallResult(YT <= bound * (1 + tol), bound, YT, 1.0 - YT / bound)
