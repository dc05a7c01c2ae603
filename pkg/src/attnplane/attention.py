"""Softmax attention, its linearized approximation, and the per-flow accumulator.

The accumulator is the piece that actually runs on the simulated dataplane:
per absorbed token it adds a quantized rank-one increment to S (m x d_v) and
a quantized feature vector to Z (m), using exact integer adds.  Because each
increment is quantized first and integers add exactly, folding tokens one by
one is bit-identical to summing the quantized increments in any order, and
the drift against the exact rational sum is at most one rounding (eta_q) per
scalar per step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .fixedpoint import (
    CHECKED,
    FixedPointFormat,
    add_array,
    dequantize_array,
    quantize_array,
)

STATE_MAGIC = b"ASTATE01"


class DegenerateNormalizerError(RuntimeError):
    """Query normalizer fell below the floor (or the state has absorbed nothing)."""


@dataclass(frozen=True)
class Token:
    """One ingested unit: key vector (d) and value vector (d_v)."""

    key: np.ndarray
    value: np.ndarray
    uid: int = -1


@dataclass(frozen=True)
class AttentionOutput:
    o: np.ndarray
    normalizer: float
    clamped: bool


def exact_attention(Q, K, V, d=None) -> np.ndarray:
    """Row-wise softmax(Q K^T / sqrt(d)) V in float64 with max-shifted exponents."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if d is None:
        d = Q.shape[1]
    scores = Q @ K.T / math.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ V


def linear_attention_batch(fm, Q, K, V, gamma_floor: float = 0.0) -> np.ndarray:
    """Feature-map attention o(q) = phi(q).(Phi(K)^T V) / phi(q).(Phi(K)^T 1).

    Pure real arithmetic (no quantization).  Raises DegenerateNormalizerError
    if any query's normalizer falls below gamma_floor.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    Pq = fm.phi_batch(Q)
    Pk = fm.phi_batch(K)
    agg = Pk.T @ V                     # m x d_v
    mass = Pk.T @ np.ones(len(K))      # m
    den = Pq @ mass
    if np.any(den < gamma_floor) or np.any(den <= 0.0):
        i = int(np.argmin(den))
        raise DegenerateNormalizerError(
            f"normalizer {den[i]:.3e} below floor {gamma_floor:.3e} at row {i}"
        )
    return (Pq @ agg) / den[:, None]


class AttentionState:
    """Quantized running sums S (m x d_v) and Z (m) for one flow (or one head).

    S and Z may use different formats; the stored image is exactly the integer
    sum of the quantized increments under the checked policy.  err_per_scalar
    and err_per_row track the two rounding-budget accountings (every scalar
    rounds once per update, vs. one rounding event per S row per update).
    """

    def __init__(self, m: int, d_v: int, fmt_s: FixedPointFormat,
                 fmt_z: FixedPointFormat | None = None, policy: str = CHECKED):
        if m < 1 or d_v < 1:
            raise ValueError(f"m and d_v must be >= 1, got {m}, {d_v}")
        self.m = int(m)
        self.d_v = int(d_v)
        self.fmt_s = fmt_s
        self.fmt_z = fmt_z if fmt_z is not None else fmt_s
        self.policy = policy
        self.S_raw = np.zeros((self.m, self.d_v), dtype=np.int64)
        self.Z_raw = np.zeros(self.m, dtype=np.int64)
        self.t = 0
        self.err_per_scalar = 0.0
        self.err_per_row = 0.0

    @property
    def storage_bits(self) -> int:
        return self.m * self.d_v * self.fmt_s.total_bits + self.m * self.fmt_z.total_bits

    def copy(self) -> "AttentionState":
        st = AttentionState(self.m, self.d_v, self.fmt_s, self.fmt_z, self.policy)
        st.S_raw = self.S_raw.copy()
        st.Z_raw = self.Z_raw.copy()
        st.t = self.t
        st.err_per_scalar = self.err_per_scalar
        st.err_per_row = self.err_per_row
        return st

    def update_inplace(self, fm, token: Token):
        phi = fm.phi(token.key)
        inc_s = quantize_array(np.outer(phi, np.asarray(token.value, dtype=np.float64)),
                               self.fmt_s, self.policy)
        inc_z = quantize_array(phi, self.fmt_z, self.policy)
        self.S_raw = add_array(self.S_raw, inc_s, self.fmt_s, self.policy)
        self.Z_raw = add_array(self.Z_raw, inc_z, self.fmt_z, self.policy)
        self.t += 1
        self.err_per_scalar += self.fmt_s.eta_q * self.m * self.d_v + self.fmt_z.eta_q * self.m
        self.err_per_row += self.fmt_s.eta_q * self.m + self.fmt_z.eta_q * self.m

    def dequantized(self):
        return dequantize_array(self.S_raw, self.fmt_s), dequantize_array(self.Z_raw, self.fmt_z)

    # -- snapshot format: magic, dims, formats, t, policy flag, raw int64s --

    def to_bytes(self) -> bytes:
        head = struct.pack(
            "<8sIIBBBBQB",
            STATE_MAGIC, self.m, self.d_v,
            self.fmt_s.total_bits, self.fmt_s.fraction_bits,
            self.fmt_z.total_bits, self.fmt_z.fraction_bits,
            self.t, 1 if self.policy == CHECKED else 0,
        )
        body = self.S_raw.astype("<i8").tobytes() + self.Z_raw.astype("<i8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AttentionState":
        head_size = struct.calcsize("<8sIIBBBBQB")
        magic, m, d_v, bs, fs, bz, fz, t, checked = struct.unpack("<8sIIBBBBQB", blob[:head_size])
        if magic != STATE_MAGIC:
            raise ValueError(f"bad snapshot magic {magic!r}")
        st = cls(m, d_v, FixedPointFormat(bs, fs), FixedPointFormat(bz, fz),
                 CHECKED if checked else "saturating")
        n_s = m * d_v
        raws = np.frombuffer(blob[head_size:], dtype="<i8")
        if raws.size != n_s + m:
            raise ValueError(f"snapshot body has {raws.size} raws, expected {n_s + m}")
        st.S_raw = raws[:n_s].reshape(m, d_v).astype(np.int64)
        st.Z_raw = raws[n_s:].astype(np.int64)
        st.t = t
        return st


def state_init(m: int, d_v: int, fmt_s: FixedPointFormat,
               fmt_z: FixedPointFormat | None = None, policy: str = CHECKED) -> AttentionState:
    return AttentionState(m, d_v, fmt_s, fmt_z, policy)


def state_update(st: AttentionState, fm, token: Token) -> AttentionState:
    """Functional update: returns a new state with the token absorbed."""
    out = st.copy()
    out.update_inplace(fm, token)
    return out


def state_query(st: AttentionState, fm, q, gamma_floor: float | None = None) -> AttentionOutput:
    """o = (phi(q)^T S) / max(phi(q)^T Z, gamma_floor) on dequantized registers.

    The default floor is one LSB of the Z format — the smallest value the
    register can distinguish from zero.  Raises only when nothing has been
    absorbed yet.
    """
    if st.t == 0:
        raise DegenerateNormalizerError("state has absorbed no tokens")
    if gamma_floor is None:
        gamma_floor = 2.0 ** (-st.fmt_z.fraction_bits)
    phi_q = fm.phi(q)
    S, Z = st.dequantized()
    num = phi_q @ S
    den = float(phi_q @ Z)
    clamped = den < gamma_floor
    return AttentionOutput(o=num / max(den, gamma_floor), normalizer=den, clamped=clamped)


def merge_states(a: AttentionState, b: AttentionState) -> AttentionState:
    """Commutative element-wise checked merge of two shards of the same flow."""
    if (a.m, a.d_v, a.fmt_s, a.fmt_z) != (b.m, b.d_v, b.fmt_s, b.fmt_z):
        raise ValueError("cannot merge states with different shapes or formats")
    out = a.copy()
    out.S_raw = add_array(a.S_raw, b.S_raw, a.fmt_s, a.policy)
    out.Z_raw = add_array(a.Z_raw, b.Z_raw, a.fmt_z, a.policy)
    out.t = a.t + b.t
    out.err_per_scalar = a.err_per_scalar + b.err_per_scalar
    out.err_per_row = a.err_per_row + b.err_per_row
    return out


def spectral_error_bound(T: int, eps: float, gamma: float, V) -> float:
    """(sqrt(T) eps / gamma) |V|_2 + (eps / gamma) |V|_F."""
    V = np.asarray(V, dtype=np.float64)
    return (math.sqrt(T) * eps / gamma) * np.linalg.norm(V, 2) \
        + (eps / gamma) * np.linalg.norm(V, "fro")


def accumulated_error_bound(T: int, B_phi: float, R_v: float, eta_q: float,
                            m: int, d_v: int) -> float:
    """T * B_phi * R_v + T * eta_q * m * d_v."""
    return T * B_phi * R_v + T * eta_q * m * d_v
