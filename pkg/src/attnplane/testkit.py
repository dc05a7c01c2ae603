"""Independent brute-force oracles backing the test suite.

Every oracle here re-derives its answer from scratch — extended-precision
(mpmath) or exact-rational (fractions) arithmetic, linear scans, exhaustive
enumeration — and deliberately shares no logic with the modules it checks.
Oracles accept desk-scale instances only (T <= 64, m <= 4096, entries <=
1000) so the suite stays fast.

Expected values used by the tests live in ``tests/fixtures/oracles.json``;
``python -m attnplane.testkit <fixtures-path>`` regenerates that file from
the oracles themselves.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import mpmath
import numpy as np

MAX_T = 64
MAX_M = 4096
MAX_ENTRIES = 1000

mpmath.mp.dps = 50


class OracleScaleError(ValueError):
    """Instance is larger than the desk-scale limits the oracles accept."""


@dataclass(frozen=True)
class OracleResult:
    value: object
    method: str
    fingerprint: str


def _fingerprint(*parts) -> str:
    return "|".join(str(p) for p in parts)


def _guard(T=0, m=0, entries=0):
    if T > MAX_T or m > MAX_M or entries > MAX_ENTRIES:
        raise OracleScaleError(
            f"instance too large for oracles: T={T} (<= {MAX_T}), "
            f"m={m} (<= {MAX_M}), entries={entries} (<= {MAX_ENTRIES})"
        )


def oracle_exact_attention(Q, K, V, d: int) -> OracleResult:
    """Second softmax implementation: unshifted mpmath exponentials, row by row."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    T = len(Q)
    _guard(T=T)
    sqrt_d = mpmath.sqrt(d)
    out = np.empty((T, V.shape[1]))
    for i in range(T):
        ws = [mpmath.e ** (mpmath.mpf(float(Q[i] @ K[j])) / sqrt_d) for j in range(len(K))]
        s = mpmath.fsum(ws)
        for c in range(V.shape[1]):
            out[i, c] = float(mpmath.fsum(w * mpmath.mpf(float(V[j, c]))
                                          for j, w in enumerate(ws)) / s)
    return OracleResult(out, "mpmath-unshifted-softmax", _fingerprint("attn", T, d, V.shape))


def _rat_round_half_even(x: Fraction) -> int:
    # deliberately re-derived here; keep independent of the production rounding
    floor, rem = divmod(x.numerator, x.denominator)
    half = Fraction(rem, x.denominator)
    if half > Fraction(1, 2) or (half == Fraction(1, 2) and floor % 2 == 1):
        return floor + 1
    return floor


def oracle_rational_accumulate(tokens, fm, fmt_s, fmt_z=None) -> OracleResult:
    """Exact-rational accumulators for a token sequence.

    Returns (S_exact, Z_exact, S_raw, Z_raw): the unquantized rational sums
    and the expected register images under quantize-then-add with
    round-half-to-even, all built with Fraction arithmetic.
    """
    fmt_z = fmt_z or fmt_s
    toks = list(tokens)
    _guard(T=len(toks), m=fm.m)
    m, d_v = fm.m, len(np.asarray(toks[0].value))
    S_exact = [[Fraction(0)] * d_v for _ in range(m)]
    Z_exact = [Fraction(0)] * m
    S_raw = [[0] * d_v for _ in range(m)]
    Z_raw = [0] * m
    for tok in toks:
        phi = [Fraction(float(p)) for p in fm.phi(tok.key)]
        val = [Fraction(float(v)) for v in np.asarray(tok.value, dtype=np.float64)]
        for r in range(m):
            for c in range(d_v):
                inc = phi[r] * val[c]
                S_exact[r][c] += inc
                S_raw[r][c] += _rat_round_half_even(inc * fmt_s.scale)
            Z_exact[r] += phi[r]
            Z_raw[r] += _rat_round_half_even(phi[r] * fmt_z.scale)
    return OracleResult((S_exact, Z_exact, S_raw, Z_raw), "fraction-accumulator",
                        _fingerprint("accum", len(toks), m, d_v, fmt_s))


def oracle_scan_match(entries, sig: int) -> OracleResult:
    """Linear scan of every entry; payloads of matches, highest priority first."""
    entries = list(entries)
    _guard(entries=len(entries))
    hits = [(e.priority, e.payload) for e in entries
            if (sig & e.mask) == (e.value & e.mask)]
    hits.sort(key=lambda t: -t[0])
    return OracleResult([p for _, p in hits], "linear-scan", _fingerprint("scan", len(entries), sig))


def oracle_kernel_mass(q, keys, d: int) -> OracleResult:
    """Extended-precision sum of exp(q.k / sqrt(d)) over the key list."""
    q = np.asarray(q, dtype=np.float64)
    keys = [np.asarray(k, dtype=np.float64) for k in keys]
    _guard(T=len(keys))
    sqrt_d = mpmath.sqrt(d)
    total = mpmath.fsum(mpmath.e ** (mpmath.mpf(float(q @ k)) / sqrt_d) for k in keys)
    return OracleResult(total, "mpmath-kernel-mass", _fingerprint("mass", len(keys), d))


def oracle_two_means(points) -> OracleResult:
    """Exhaustive best 2-means over all bipartitions (n <= 16 points)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n > 16:
        raise OracleScaleError("two-means oracle enumerates bipartitions; n must be <= 16")
    if n < 2:
        raise ValueError("need at least two points")
    idx = range(n)
    best = None
    for size in range(1, n // 2 + 1):
        for left in combinations(idx, size):
            left = set(left)
            a = pts[[i in left for i in idx]]
            b = pts[[i not in left for i in idx]]
            ca, cb = a.mean(axis=0), b.mean(axis=0)
            cost = float(((a - ca) ** 2).sum() + ((b - cb) ** 2).sum())
            if best is None or cost < best[0]:
                best = (cost, ca, cb)
    cost, ca, cb = best
    cents = sorted([tuple(ca), tuple(cb)])
    return OracleResult((cost, cents), "exhaustive-2means", _fingerprint("2means", n))


def oracle_ema_closed_form(eta, u_sequence) -> OracleResult:
    """Exact-rational EMA trajectory for a 0/1 (or rational) input sequence."""
    eta = Fraction(eta)
    c = Fraction(0)
    traj = []
    for u in u_sequence:
        c = (1 - eta) * c + eta * Fraction(u)
        traj.append(c)
    return OracleResult(traj, "fraction-ema", _fingerprint("ema", float(eta), len(traj)))


# ---------------------------------------------------------------------------
# fixture generation: hand-checked instances, expected values from the oracles


def build_fixtures() -> dict:
    from .attention import Token  # deferred: keep module import light
    from .features import build_feature_map
    from .fixedpoint import FixedPointFormat
    from .keyselect import TernaryEntry

    fx = {}

    inst = []
    rng = np.random.default_rng(1001)
    for i in range(3):
        T, d, d_v = 3 + i, 2, 2
        Q = rng.standard_normal((T, d)) * 0.5
        K = rng.standard_normal((T, d)) * 0.5
        V = rng.standard_normal((T, d_v)) * 0.5
        out = oracle_exact_attention(Q, K, V, d)
        inst.append({"Q": Q.tolist(), "K": K.tolist(), "V": V.tolist(), "d": d,
                     "expected": np.asarray(out.value).tolist(), "method": out.method})
    fx["exact_attention"] = inst

    inst = []
    for i in range(3):
        entries = [
            {"value": 0b1010, "mask": 0b1111, "priority": 5, "payload": 0},
            {"value": 0b1000, "mask": 0b1000, "priority": 9, "payload": 1},
            {"value": 0b0010, "mask": 0b0010, "priority": 7, "payload": 2},
        ]
        sig = [0b1010, 0b1000, 0b0000][i]
        out = oracle_scan_match([TernaryEntry(**e) for e in entries], sig)
        inst.append({"entries": entries, "sig": sig, "expected": out.value,
                     "method": out.method})
    fx["scan_match"] = inst

    inst = []
    rng = np.random.default_rng(1002)
    for i in range(3):
        n = 4 + i
        q = (rng.standard_normal(2) * 0.5).tolist()
        keys = (rng.standard_normal((n, 2)) * 0.5).tolist()
        out = oracle_kernel_mass(q, keys, 2)
        inst.append({"q": q, "keys": keys, "d": 2, "expected": float(out.value),
                     "method": out.method})
    fx["kernel_mass"] = inst

    inst = []
    rng = np.random.default_rng(1003)
    for i in range(3):
        pts = (rng.standard_normal((6 + 2 * i, 2))
               + np.array([[4.0, 0.0]]) * (np.arange(6 + 2 * i) % 2)[:, None]).tolist()
        cost, cents = oracle_two_means(pts).value
        inst.append({"points": pts, "expected_cost": cost,
                     "expected_centroids": [list(c) for c in cents],
                     "method": "exhaustive-2means"})
    fx["two_means"] = inst

    inst = []
    for eta, us in [(Fraction(1, 10), [1] * 10), (Fraction(1, 2), [1, 0, 1, 0, 1]),
                    (Fraction(1, 4), [0, 0, 1, 1, 0, 1])]:
        traj = oracle_ema_closed_form(eta, us).value
        inst.append({"eta": [eta.numerator, eta.denominator], "u": us,
                     "expected": [[c.numerator, c.denominator] for c in traj],
                     "method": "fraction-ema"})
    fx["ema"] = inst

    inst = []
    rng = np.random.default_rng(1004)
    fm = build_feature_map("prf", 4, 2, seed=77)
    fmt = FixedPointFormat(16, 8)
    for i in range(3):
        toks = [Token(rng.standard_normal(2) * 0.4, rng.standard_normal(2) * 0.4, uid=j)
                for j in range(3 + i)]
        _, _, S_raw, Z_raw = oracle_rational_accumulate(toks, fm, fmt).value
        inst.append({
            "keys": [t.key.tolist() for t in toks],
            "values": [t.value.tolist() for t in toks],
            "fm": {"kind": "prf", "m": 4, "d": 2, "seed": 77},
            "fmt": "q16.8",
            "expected_S_raw": S_raw,
            "expected_Z_raw": Z_raw,
            "method": "fraction-accumulator",
        })
    fx["rational_accumulate"] = inst
    return fx


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    path = argv[0] if argv else "tests/fixtures/oracles.json"
    fx = build_fixtures()
    with open(path, "w") as f:
        json.dump(fx, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
