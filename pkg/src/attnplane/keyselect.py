"""Two-layer key selection: SRAM-style local ring plus TCAM-style static index.

The local layer is a per-flow FIFO ring of the most recent tokens.  The
global layer is a static set of anchor tokens indexed by ternary value/mask
entries over a bucketed signature of the query vector; it is never mutated on
the hot path — the control plane replaces the whole index atomically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import Token

from .errors import BudgetViolationError

LOCAL = "local"
GLOBAL = "global"

TABLE_FORMAT_VERSION = 1


class SignatureCodec:
    """Sign-and-magnitude bucket encoding of a real vector into a bit pattern.

    Each coordinate takes ``bits_per_coord`` bits: the top bit is the sign
    (1 = negative) and the rest index the magnitude bucket found by
    searchsorted over ``edges``.  Coordinate 0 occupies the most significant
    bits.  Zero encodes to the all-zero pattern.
    """

    def __init__(self, d: int, bits_per_coord: int = 4, edges=None, max_norm: float | None = None):
        if bits_per_coord < 2:
            raise ValueError("need at least a sign bit and one magnitude bit")
        self.d = int(d)
        self.bits_per_coord = int(bits_per_coord)
        n_buckets = 1 << (bits_per_coord - 1)
        if edges is None:
            top = max_norm if max_norm is not None else d ** 0.25
            edges = [top * i / n_buckets for i in range(1, n_buckets)]
        self.edges = np.asarray(edges, dtype=np.float64)
        if len(self.edges) != n_buckets - 1:
            raise ValueError(f"need {n_buckets - 1} edges for {bits_per_coord}-bit coords")

    @property
    def width(self) -> int:
        return self.d * self.bits_per_coord

    def encode(self, x) -> int:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ValueError(f"expected ({self.d},) vector, got {x.shape}")
        sig = 0
        sign_bit = 1 << (self.bits_per_coord - 1)
        for c in range(self.d):
            v = x[c]
            bucket = int(np.searchsorted(self.edges, abs(v), side="right"))
            nibble = bucket | (sign_bit if v < 0 else 0)
            sig = (sig << self.bits_per_coord) | nibble
        return sig

    def _per_coord_care(self, magnitude_bits: int) -> int:
        if not (0 <= magnitude_bits < self.bits_per_coord):
            raise ValueError("magnitude_bits must be in [0, bits_per_coord)")
        per = 1 << (self.bits_per_coord - 1)  # sign
        for i in range(magnitude_bits):
            per |= 1 << (self.bits_per_coord - 2 - i)
        return per

    def coord_care_mask(self, magnitude_bits: int) -> int:
        """Mask caring about the sign bit and the top ``magnitude_bits`` bucket
        bits of every coordinate."""
        per = self._per_coord_care(magnitude_bits)
        mask = 0
        for _ in range(self.d):
            mask = (mask << self.bits_per_coord) | per
        return mask

    def care_mask_for_coords(self, coords, magnitude_bits: int) -> int:
        """Care mask restricted to the listed coordinates, wildcard elsewhere."""
        per = self._per_coord_care(magnitude_bits)
        mask = 0
        for c in coords:
            if not (0 <= c < self.d):
                raise ValueError(f"coordinate {c} out of range")
            shift = (self.d - 1 - c) * self.bits_per_coord
            mask |= per << shift
        return mask


def quantize_query_signature(q, codec: SignatureCodec) -> int:
    """Deterministic bucketed bit pattern of a query vector."""
    return codec.encode(q)


@dataclass(frozen=True)
class TernaryEntry:
    """value/mask pattern (mask bit 1 = care) with a priority and a payload id."""

    value: int
    mask: int
    priority: int
    payload: int

    def matches(self, sig: int) -> bool:
        return (sig & self.mask) == (self.value & self.mask)


class GlobalIndex:
    """Static ternary-matched set of anchor tokens, replaced wholesale on install."""

    def __init__(self, entries, tokens, capacity: int | None = None, version: int = 0):
        entries = list(entries)
        if capacity is not None and len(entries) > capacity:
            raise BudgetViolationError(
                f"{len(entries)} entries exceed the ternary capacity {capacity}"
            )
        # descending priority once, so lookups return payloads in match order
        self._entries = sorted(entries, key=lambda e: -e.priority)
        self.tokens = dict(tokens)
        self.capacity = capacity
        self.version = version

    @property
    def entries(self):
        return list(self._entries)

    def __len__(self):
        return len(self._entries)

    def lookup(self, sig: int) -> list[Token]:
        """Tokens of every matching entry, highest priority first."""
        out = []
        seen = set()
        for e in self._entries:
            if e.matches(sig) and e.payload not in seen:
                seen.add(e.payload)
                out.append(self.tokens[e.payload])
        return out

    # -- table file: `priority value/mask -> token_id` with hex patterns ----

    def to_table_text(self) -> str:
        lines = [f"# ternary index v{TABLE_FORMAT_VERSION} version={self.version}"]
        for e in self._entries:
            lines.append(f"{e.priority} {e.value:#x}/{e.mask:#x} -> {e.payload}")
        for uid in sorted(self.tokens):
            tok = self.tokens[uid]
            key = ",".join(repr(float(v)) for v in np.asarray(tok.key).ravel())
            val = ",".join(repr(float(v)) for v in np.asarray(tok.value).ravel())
            lines.append(f"token {uid} {key} | {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table_text(cls, text: str, capacity: int | None = None) -> "GlobalIndex":
        entries = []
        tokens = {}
        version = 0
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for part in line.split():
                    if part.startswith("version="):
                        version = int(part.split("=", 1)[1])
                continue
            if line.startswith("token "):
                _, uid, rest = line.split(" ", 2)
                key_s, val_s = rest.split("|")
                key = np.array([float(v) for v in key_s.strip().split(",")])
                val = np.array([float(v) for v in val_s.strip().split(",")])
                tokens[int(uid)] = Token(key=key, value=val, uid=int(uid))
                continue
            head, payload = line.split("->")
            prio_s, pat = head.split()
            value_s, mask_s = pat.split("/")
            entries.append(TernaryEntry(int(value_s, 16), int(mask_s, 16),
                                        int(prio_s), int(payload)))
        return cls(entries, tokens, capacity=capacity, version=version)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_table_text())

    @classmethod
    def load(cls, path, capacity: int | None = None) -> "GlobalIndex":
        with open(path) as f:
            return cls.from_table_text(f.read(), capacity=capacity)


def tcam_lookup(gidx: GlobalIndex, sig: int) -> list[Token]:
    return gidx.lookup(sig)


class LocalWindow:
    """FIFO ring of the L most recent tokens for one flow."""

    def __init__(self, capacity: int, d: int | None = None, key_bits: int = 16,
                 sram_budget_bits: int | None = None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if sram_budget_bits is not None and d is not None:
            need = capacity * d * key_bits
            if need > sram_budget_bits:
                raise BudgetViolationError(
                    f"window needs {need} bits (L={capacity}, d={d}, {key_bits}b keys) "
                    f"> per-flow budget {sram_budget_bits}"
                )
        self.capacity = int(capacity)
        self._slots: list[Token] = []
        self._head = 0

    def push(self, tok: Token):
        if self.capacity == 0:
            return
        if len(self._slots) < self.capacity:
            self._slots.append(tok)
        else:
            self._slots[self._head] = tok
            self._head = (self._head + 1) % self.capacity

    def contents(self) -> list[Token]:
        """Tokens in arrival order, oldest first."""
        return self._slots[self._head:] + self._slots[:self._head]

    def __len__(self):
        return len(self._slots)


def window_push(w: LocalWindow, tok: Token) -> LocalWindow:
    w.push(tok)
    return w


@dataclass
class KeySelection:
    tokens: list[Token]
    provenance: dict[int, str] = field(default_factory=dict)
    n_local: int = 0
    n_global: int = 0
    n_dropped: int = 0

    @property
    def n_t(self) -> int:
        return len(self.tokens)


def select_keys(window: LocalWindow | None, gidx: GlobalIndex | None, sig: int,
                n_cap: int | None = None) -> KeySelection:
    """Union of the local ring and the ternary matches, deduplicated by uid.

    The local copy wins a duplicate (it carries the freshest value vector).
    When the union exceeds n_cap, global tokens are dropped first, lowest
    priority first.
    """
    local = window.contents() if window is not None else []
    matched = gidx.lookup(sig) if gidx is not None else []
    chosen: list[Token] = []
    prov: dict[int, str] = {}
    seen = set()
    for tok in local:
        if tok.uid not in seen:
            seen.add(tok.uid)
            chosen.append(tok)
            prov[tok.uid] = LOCAL
    global_part = []
    for tok in matched:
        if tok.uid not in seen:
            seen.add(tok.uid)
            global_part.append(tok)
            prov[tok.uid] = GLOBAL
    dropped = 0
    if n_cap is not None and len(chosen) + len(global_part) > n_cap:
        room = max(n_cap - len(chosen), 0)
        dropped = len(global_part) - room
        global_part = global_part[:room]  # lookup order is highest priority first
    sel = KeySelection(tokens=chosen + global_part, provenance=prov,
                       n_local=len(chosen), n_global=len(global_part), n_dropped=dropped)
    return sel


def retained_mass(q, selected, universe, d: int):
    """(retained fraction, alpha): kernel mass of the selection over the full set."""
    q = np.asarray(q, dtype=np.float64)

    def mass(tokens):
        if not tokens:
            return 0.0
        K = np.stack([np.asarray(t.key, dtype=np.float64) for t in tokens])
        return float(np.sum(np.exp(K @ q / math.sqrt(d))))

    total = mass(universe)
    if total == 0.0:
        return 0.0, 1.0
    frac = mass(selected) / total
    return frac, 1.0 - frac


def coverage_loewner_check(q, selected, universe, alpha: float, tol: float, d: int | None = None) -> bool:
    """True iff min-eig of [Cov(selected) - (1-alpha) Cov(universe)] >= -tol.

    Cov is the kernel-weighted second moment sum_k w(q,k) k k^T.  The
    inequality does NOT follow from the mass fraction alone — an omitted key
    can dominate a spectral direction — so this reports rather than asserts.
    """
    q = np.asarray(q, dtype=np.float64)
    if d is None:
        d = len(q)

    def cov(tokens):
        if not tokens:
            return np.zeros((len(q), len(q)))
        K = np.stack([np.asarray(t.key, dtype=np.float64) for t in tokens])
        w = np.exp(K @ q / math.sqrt(d))
        return (K.T * w) @ K

    delta = cov(selected) - (1.0 - alpha) * cov(universe)
    return bool(np.linalg.eigvalsh(delta)[0] >= -tol)
