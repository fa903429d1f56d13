"""Synthetic two-view data model, linear encoders and normalized feature maps.

Latent and noise vectors live on scaled hypercubes ``{+-1/sqrt(d)}``.  They are
stored as int8 sign arrays; the ``1/sqrt(d)`` scale is applied only when values
are needed, so enumeration and sampling share one exact representation.
"""
from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

COLLAPSE_EPS = 1e-12
ASSUMPTION_C = 1.0


class CollapseError(ValueError):
    """Raised when an encoder normalizer vanishes."""


class ContractError(ValueError):
    """Raised on shape or domain violations of an operation's inputs."""


def stream(seed, name):
    """Return a Generator for the named substream of ``seed``.

    Streams are keyed by a CRC of the name so that adding a new consumer never
    shifts the draws of an existing one.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())]))


def adversarial_sigma(d, c=1.0, r=None):
    """Spectrum with one inflated direction: ``sigma_1^2 = c log d``, rest 1.

    With ``r=None`` the vector has length ``d`` (the noise-free ``r = d``
    construction).  Passing ``r`` keeps ``d`` inside the log but returns only
    ``r`` entries, which is how the figure presets embed it at ``r < d``.
    """
    if c < 0:
        raise ContractError("c must be non-negative")
    n = d if r is None else r
    out = np.ones(n)
    if c > 0:
        out[0] = c * math.log(d)
    return out


def resolve_sigma(spec, d, r):
    """Turn a JSON-ish spectrum description into a length-r array."""
    if isinstance(spec, str):
        spec = {"preset": spec}
    if isinstance(spec, dict):
        name = spec.get("preset")
        if name == "flat":
            return np.ones(r)
        if name == "adversarial":
            return adversarial_sigma(d, float(spec.get("c", 1.0)), r)
        raise ContractError(f"unknown sigma preset {name!r}")
    return np.asarray(spec, dtype=float)


@dataclass(frozen=True)
class ModelConfig:
    d: int
    r: int
    m: int
    sigma_sq: tuple
    sigma_xi_sq: float
    K: float
    seed: int = 0
    shared_encoders: bool = False

    def __post_init__(self):
        sig = tuple(float(s) for s in resolve_sigma(self.sigma_sq, self.d, self.r))
        object.__setattr__(self, "sigma_sq", sig)
        if not (0 < self.r < self.d):
            raise ContractError(f"need 0 < r < d, got r={self.r}, d={self.d}")
        if self.m < 1:
            raise ContractError("m must be positive")
        if len(sig) != self.r or min(sig) <= 0:
            raise ContractError("sigma_sq must have r strictly positive entries")
        if not self.sigma_xi_sq > 0:
            raise ContractError("sigma_xi_sq must be positive")
        if self.K < 0:
            raise ContractError("K must be non-negative")
        if not self.assumption_holds():
            warnings.warn("spectrum violates the sigma_max/sigma_min <= c log d assumption", stacklevel=2)

    def assumption_holds(self, c=ASSUMPTION_C):
        smax, smin = max(self.sigma_sq), min(self.sigma_sq)
        noise = (self.d - self.r) * self.sigma_xi_sq / (self.r * smin)
        return (smax / smin) * max(1.0, noise) <= c * math.log(self.d) * (1 + 1e-12)

    @property
    def sigma_full(self):
        """Diagonal of the full covariance ``diag(sigma^2, sigma_xi^2 I)``."""
        return np.concatenate([np.asarray(self.sigma_sq), np.full(self.d - self.r, self.sigma_xi_sq)])

    def to_json(self):
        doc = {"d": self.d, "r": self.r, "m": self.m, "sigma_sq": list(self.sigma_sq),
               "sigma_xi_sq": self.sigma_xi_sq, "K": self.K, "seed": self.seed}
        if self.shared_encoders:
            doc["shared_encoders"] = True
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        allowed = {"d", "r", "m", "sigma_sq", "sigma_xi_sq", "K", "seed", "shared_encoders"}
        extra = set(doc) - allowed
        if extra:
            raise ContractError(f"unknown config fields {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class EncoderSet:
    A: np.ndarray
    B: np.ndarray
    A_xi: np.ndarray
    B_xi: np.ndarray

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def r(self):
        return self.A.shape[1]

    def full(self, side):
        """``[A, A_xi]`` (d x d) for side ``"A"``; the B analogue otherwise."""
        if side == "A":
            return np.hstack([self.A, self.A_xi])
        return np.hstack([self.B, self.B_xi])


@dataclass(frozen=True)
class WeightState:
    W_A: np.ndarray
    W_B: np.ndarray

    def scaled(self, c):
        return WeightState(c * self.W_A, c * self.W_B)


@dataclass(frozen=True)
class KState:
    K_A: np.ndarray
    K_B: np.ndarray
    K_A_xi: np.ndarray
    K_B_xi: np.ndarray
    N_A: float
    N_B: float

    @classmethod
    def from_blocks(cls, K_A, K_B, K_A_xi, K_B_xi, eps=COLLAPSE_EPS):
        K_A, K_B = np.asarray(K_A, float), np.asarray(K_B, float)
        K_A_xi, K_B_xi = np.asarray(K_A_xi, float), np.asarray(K_B_xi, float)
        m, r = K_A.shape
        if K_B.shape != (m, r) or K_A_xi.shape[0] != m or K_B_xi.shape != K_A_xi.shape:
            raise ContractError("inconsistent K block shapes")
        d = r + K_A_xi.shape[1]
        N_A = math.sqrt((np.sum(K_A**2) + np.sum(K_A_xi**2)) / d)
        N_B = math.sqrt((np.sum(K_B**2) + np.sum(K_B_xi**2)) / d)
        if N_A <= eps or N_B <= eps:
            raise CollapseError(f"normalizer collapsed (N_A={N_A:.3g}, N_B={N_B:.3g})")
        return cls(K_A, K_B, K_A_xi, K_B_xi, N_A, N_B)

    @property
    def m(self):
        return self.K_A.shape[0]

    @property
    def r(self):
        return self.K_A.shape[1]

    @property
    def d(self):
        return self.r + self.K_A_xi.shape[1]

    def full(self, side):
        if side == "A":
            return np.hstack([self.K_A, self.K_A_xi])
        return np.hstack([self.K_B, self.K_B_xi])

    def norm(self, side):
        return self.N_A if side == "A" else self.N_B

    def swapped(self):
        return KState(self.K_B, self.K_A, self.K_B_xi, self.K_A_xi, self.N_B, self.N_A)


@dataclass(frozen=True)
class SampleQuad:
    """One (or a batch of) positive/negative latent quadruples as sign arrays.

    Components are int8 arrays with trailing dimension r or d - r; ``scale``
    is ``1/sqrt(d)``.
    """

    z_plus: np.ndarray
    z_minus: np.ndarray
    xi_A_plus: np.ndarray
    xi_B_plus: np.ndarray
    xi_A_minus: np.ndarray
    xi_B_minus: np.ndarray
    scale: float = field(default=1.0)

    def value(self, name):
        return getattr(self, name).astype(float) * self.scale


def _orthonormal(d, rng, attempts=8):
    for _ in range(attempts):
        G = rng.standard_normal((d, d))
        Q, R = np.linalg.qr(G)
        diag = np.abs(np.diag(R))
        if diag.min() > 1e-8 * max(diag.max(), 1.0):
            return Q
    raise ContractError(f"orthonormalization degenerate after {attempts} attempts")


def build_encoders(config, rng):
    """Encoders with exact column structure from one orthonormal basis per side."""
    s = np.sqrt(np.asarray(config.sigma_sq))
    sx = math.sqrt(config.sigma_xi_sq)
    Qa = _orthonormal(config.d, rng)
    A, A_xi = Qa[:, :config.r] * s, Qa[:, config.r:] * sx
    if config.shared_encoders:
        return EncoderSet(A, A.copy(), A_xi, A_xi.copy())
    Qb = _orthonormal(config.d, rng)
    return EncoderSet(A, Qb[:, :config.r] * s, A_xi, Qb[:, config.r:] * sx)


def init_weights(config, rng):
    scale = 1.0 / math.sqrt(config.m)
    W_A = rng.standard_normal((config.d, config.m)) * scale
    W_B = rng.standard_normal((config.d, config.m)) * scale
    return WeightState(W_A, W_B)


def random_signs(rng, shape):
    return (2 * rng.integers(0, 2, size=shape, dtype=np.int8) - 1).astype(np.int8)


def sample_quad(config, rng, n=None):
    """Draw one quad (``n=None``) or ``n`` stacked quads."""
    lead = () if n is None else (n,)
    r, q = config.r, config.d - config.r
    return SampleQuad(
        random_signs(rng, lead + (r,)), random_signs(rng, lead + (r,)),
        random_signs(rng, lead + (q,)), random_signs(rng, lead + (q,)),
        random_signs(rng, lead + (q,)), random_signs(rng, lead + (q,)),
        scale=1.0 / math.sqrt(config.d),
    )


def encode(encoders, side, z, xi):
    A, A_xi = (encoders.A, encoders.A_xi) if side == "A" else (encoders.B, encoders.B_xi)
    z, xi = np.asarray(z, float), np.asarray(xi, float)
    if z.shape[-1] != A.shape[1] or xi.shape[-1] != A_xi.shape[1]:
        raise ContractError(f"latent shapes {z.shape}, {xi.shape} do not match encoder")
    return z @ A.T + xi @ A_xi.T


def compute_kstate(weights, encoders, eps=COLLAPSE_EPS):
    if weights.W_A.shape[0] != encoders.d or weights.W_B.shape != weights.W_A.shape:
        raise ContractError("weight shapes do not match encoders")
    return KState.from_blocks(
        weights.W_A.T @ encoders.A, weights.W_B.T @ encoders.B,
        weights.W_A.T @ encoders.A_xi, weights.W_B.T @ encoders.B_xi, eps=eps,
    )


def feature_map(kstate, side, z, xi):
    """``(K z + K_xi xi) / N`` for one side; accepts stacked latents."""
    K, K_xi = (kstate.K_A, kstate.K_A_xi) if side == "A" else (kstate.K_B, kstate.K_B_xi)
    z, xi = np.asarray(z, float), np.asarray(xi, float)
    if z.shape[-1] != K.shape[1] or xi.shape[-1] != K_xi.shape[1]:
        raise ContractError("latent shapes do not match KState")
    return (z @ K.T + xi @ K_xi.T) / kstate.norm(side)


def all_signs(n):
    """All ``2**n`` sign vectors as an int8 array, first coordinate slowest."""
    if n == 0:
        return np.ones((1, 0), dtype=np.int8)
    idx = np.arange(2**n)[:, None]
    bits = (idx >> np.arange(n - 1, -1, -1)) & 1
    return (1 - 2 * bits).astype(np.int8)
