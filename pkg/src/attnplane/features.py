"""Randomized feature maps approximating the attention kernel exp(q.k / sqrt(d)).

Three constructions are provided:

* ``prf`` — positive random features, coordinate j is
  m**-0.5 * exp(w_j.x / d**0.25 - |x|^2 / (2 sqrt(d))), an unbiased
  estimator of the kernel (the cross terms telescope under the Gaussian MGF).
* ``clipped-prf`` — same, with every coordinate clamped at sqrt(C/m) so each
  per-coordinate product is almost-surely bounded by C/m.  That is the
  hypothesis the Hoeffding-style sample-size rule needs; the clamp trades a
  small downward bias (reported as a clipping rate) for a sound bound.
* ``rff`` — trigonometric random features: cos/sin pairs with the positive
  norm prefactor, also unbiased for the exponential kernel but not
  non-negative.

Direction matrices are drawn from a named counter-based generator
(numpy Philox) so a (kind, m, d, seed) tuple pins the map bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

PRF = "prf"
CLIPPED_PRF = "clipped-prf"
RFF = "rff"
KINDS = (PRF, CLIPPED_PRF, RFF)

RNG_ALGORITHM = "numpy-philox4x64"
FORMAT_VERSION = 1


class InvalidDimensionError(ValueError):
    pass


class InvalidBoundError(ValueError):
    pass


def input_norm_bound(d: int) -> float:
    """Ingestion norm cap R with R**2 = sqrt(d), keeping kernel values <= e."""
    return d ** 0.25


@dataclass(frozen=True)
class BoundedInputSpec:
    """Norm bounds assumed by the error analysis: |x| <= R, |phi(x)| <= B_phi, |v| <= R_v."""

    R: float
    B_phi: float
    R_v: float

    def __post_init__(self):
        if self.R <= 0 or self.B_phi <= 0 or self.R_v <= 0:
            raise ValueError("all bounds must be strictly positive")


class FeatureMap:
    """Immutable randomized feature map phi: R^d -> R^m."""

    def __init__(self, kind: str, m: int, d: int, seed: int, clip_bound=None):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}, expected one of {KINDS}")
        if m < 1 or d < 1:
            raise InvalidDimensionError(f"m and d must be >= 1, got m={m}, d={d}")
        if kind == RFF and m % 2 != 0:
            raise InvalidDimensionError("rff needs an even m (cos/sin pairs)")
        if kind == CLIPPED_PRF:
            if clip_bound is None or clip_bound <= 0:
                raise ValueError("clipped-prf requires a positive clip_bound")
        self.kind = kind
        self.m = int(m)
        self.d = int(d)
        self.seed = int(seed)
        self.clip_bound = None if clip_bound is None else float(clip_bound)
        rng = np.random.Generator(np.random.Philox(self.seed))
        self.omega = rng.standard_normal((self.m, self.d))
        self._sqrt_d = math.sqrt(self.d)
        self._d_quarter = self.d ** 0.25

    # -- application ------------------------------------------------------

    def phi(self, x) -> np.ndarray:
        return self.phi_batch(np.asarray(x, dtype=np.float64)[None, :])[0]

    def phi_batch(self, X) -> np.ndarray:
        """Row-wise phi for an (n, d) array; returns (n, m)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise InvalidDimensionError(f"expected (n, {self.d}) inputs, got {X.shape}")
        sq = np.sum(X * X, axis=1, keepdims=True) / (2.0 * self._sqrt_d)
        if self.kind == RFF:
            h = self.m // 2
            proj = X @ self.omega[:h].T / self._d_quarter
            pref = np.exp(sq) / math.sqrt(h)
            return np.concatenate([np.cos(proj), np.sin(proj)], axis=1) * pref
        proj = X @ self.omega.T / self._d_quarter
        feat = np.exp(proj - sq) / math.sqrt(self.m)
        if self.kind == CLIPPED_PRF:
            feat = np.minimum(feat, self.coordinate_clip())
        return feat

    def clip_rate(self, X) -> float:
        """Fraction of coordinates the clamp actually touches on these inputs."""
        if self.kind != CLIPPED_PRF:
            return 0.0
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        sq = np.sum(X * X, axis=1, keepdims=True) / (2.0 * self._sqrt_d)
        raw = np.exp(X @ self.omega.T / self._d_quarter - sq) / math.sqrt(self.m)
        return float(np.mean(raw > self.coordinate_clip()))

    # -- bounds -----------------------------------------------------------

    def coordinate_clip(self) -> float:
        """Per-coordinate clamp sqrt(C/m): makes each product |phi_j(q) phi_j(k)| <= C/m."""
        if self.kind != CLIPPED_PRF:
            raise ValueError("coordinate_clip is defined for clipped-prf only")
        return math.sqrt(self.clip_bound / self.m)

    def feature_norm_bound(self):
        """Almost-sure bound on |phi(x)|_2, or None when the kind has no a.s. bound."""
        if self.kind == CLIPPED_PRF:
            return math.sqrt(self.clip_bound)
        return None

    # -- serialization ----------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "kind": self.kind,
                "m": self.m,
                "d": self.d,
                "seed": self.seed,
                "clip_bound": self.clip_bound,
                "rng": RNG_ALGORITHM,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, s: str) -> "FeatureMap":
        obj = json.loads(s)
        if obj.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported feature-map file version {obj.get('format_version')}")
        if obj.get("rng") != RNG_ALGORITHM:
            raise ValueError(f"feature map was built with {obj.get('rng')}, need {RNG_ALGORITHM}")
        return cls(obj["kind"], obj["m"], obj["d"], obj["seed"], obj.get("clip_bound"))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "FeatureMap":
        with open(path) as f:
            return cls.from_json(f.read())


def build_feature_map(kind: str, m: int, d: int, seed: int, clip_bound=None) -> FeatureMap:
    return FeatureMap(kind, m, d, seed, clip_bound)


def kernel_exact(q, k, d: int) -> float:
    """The target kernel exp(q.k / sqrt(d))."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (d,) or k.shape != (d,):
        raise InvalidDimensionError(f"expected two ({d},) vectors, got {q.shape}, {k.shape}")
    return math.exp(math.fsum(q * k) / math.sqrt(d))


def kernel_estimate(fm: FeatureMap, q, k) -> float:
    """phi(q).phi(k), the randomized estimate of the kernel."""
    return float(np.dot(fm.phi(q), fm.phi(k)))


def required_m(C: float, eps: float, N: int, delta: float) -> int:
    """Feature count sufficient for uniform error eps over N pairs w.p. 1-delta.

    ceil((2 C^2 / eps^2) * ln(2N / delta)); requires eps < C.
    """
    if not (0 < eps < C):
        raise InvalidBoundError(f"need 0 < eps < C, got eps={eps}, C={C}")
    if not (0 < delta < 1):
        raise InvalidBoundError(f"need 0 < delta < 1, got {delta}")
    if N < 1:
        raise InvalidBoundError(f"need N >= 1, got {N}")
    return math.ceil((2.0 * C * C / (eps * eps)) * math.log(2.0 * N / delta))


def normalize_rows(X, max_norm: float) -> np.ndarray:
    """Scale any row with |row| > max_norm back onto the sphere of that radius."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    factor = np.where(norms > max_norm, max_norm / np.where(norms == 0, 1.0, norms), 1.0)
    return X * factor
