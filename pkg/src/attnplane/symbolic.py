"""Symbolic rules: ternary hard matching, compiled soft scoring, weight fitting.

Hard rules are ternary patterns over packet-field bits whose match produces a
binary veto indicator; they carry no weight.  Soft rules carry non-negative
weights fitted offline on labeled groundings and are compiled into a compact
quantized table consulted on the hot path.

A grounding uses linear hinge potentials: rule q with polarity +1 reads
"pattern match implies label 1" and its distance to satisfaction at label y
is match * (1 - y), clamped to [0, 1]; polarity -1 is the mirror image.
Fitting minimizes the L2-regularized negative log-likelihood of the two-label
Gibbs form by projected gradient descent onto W >= 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceededError
from .fixedpoint import FixedPointFormat, quantize
from .keyselect import TernaryEntry


class NoGroundingsError(ValueError):
    pass


@dataclass(frozen=True)
class SymbolicRule:
    rule_id: int
    pattern: TernaryEntry
    weight: float = 0.0
    hard: bool = False
    polarity: int = 1          # +1: match pushes toward label 1; -1: toward label 0
    whitelist: bool = False    # optional veto-to-0 attribute; off unless enabled in config

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("rule weights must be non-negative")
        if self.polarity not in (1, -1):
            raise ValueError("polarity must be +1 or -1")


@dataclass(frozen=True)
class Grounding:
    """One (rule, example) potential evaluation: distances at the observed and
    flipped label, both clamped to [0, 1]."""

    rule_id: int
    example_id: int
    distance: float
    label: float
    distance_flipped: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.distance <= 1.0 and 0.0 <= self.distance_flipped <= 1.0):
            raise ValueError("distances must lie in [0, 1]")
        if not (0.0 <= self.label <= 1.0):
            raise ValueError("label must lie in [0, 1]")


def ground_rule(rule: SymbolicRule, field_bits: int, label: float,
                example_id: int) -> Grounding:
    """Evaluate the rule's hinge potential on one labeled packet."""
    m = 1.0 if rule.pattern.matches(field_bits) else 0.0
    if rule.polarity == 1:
        d_obs, d_flip = m * (1.0 - label), m * label
    else:
        d_obs, d_flip = m * label, m * (1.0 - label)
    return Grounding(rule.rule_id, example_id, d_obs, label, d_flip)


def hard_match(rules, field_bits: int, allow_whitelist: bool = False) -> int:
    """1 iff any hard rule's pattern matches; soft rules never contribute.

    With allow_whitelist, a matching whitelist hard rule suppresses the veto.
    """
    hit = False
    cleared = False
    for r in rules:
        if not r.hard:
            continue
        if r.pattern.matches(field_bits):
            if r.whitelist:
                cleared = True
            else:
                hit = True
    if allow_whitelist and cleared:
        return 0
    return 1 if hit else 0


def hlmrf_energy(W, potentials) -> float:
    """Rule-weighted total distance-to-satisfaction, sum_q W_q * Phi_q."""
    W = np.asarray(W, dtype=np.float64)
    p = np.asarray(potentials, dtype=np.float64)
    if W.shape != p.shape:
        raise ValueError(f"dimension mismatch: {W.shape} vs {p.shape}")
    return float(W @ p)


@dataclass
class FitResult:
    weights: np.ndarray
    objective_trace: list
    pinned_rules: list


def fit_weights(groundings, n_rules: int, iters: int = 200, step: float = 0.1,
                l2: float = 1e-3, decay: float = 1.0) -> FitResult:
    """Projected gradient descent on the regularized two-label Gibbs NLL.

    Step size decays as step / (1 + decay * t).  Rules never referenced by a
    grounding get their weight pinned to 0 (reported in pinned_rules).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    by_example: dict[int, np.ndarray] = {}
    referenced = set()
    for g in groundings:
        if not (0 <= g.rule_id < n_rules):
            raise NoGroundingsError(f"grounding references unknown rule {g.rule_id}")
        referenced.add(g.rule_id)
        delta = by_example.setdefault(g.example_id, np.zeros(n_rules))
        delta[g.rule_id] += g.distance - g.distance_flipped
    if not by_example:
        raise NoGroundingsError("training set contains no groundings")
    pinned = sorted(set(range(n_rules)) - referenced)
    if pinned:
        warnings.warn(f"rules {pinned} have no groundings; weights pinned to 0")
    D = np.stack(list(by_example.values()))  # n_examples x n_rules

    active = np.ones(n_rules, dtype=bool)
    active[pinned] = False
    W = np.where(active, 1.0, 0.0)

    def objective(w):
        u = D @ w
        return float(np.sum(np.logaddexp(0.0, u)) + 0.5 * l2 * np.dot(w, w))

    trace = [objective(W)]
    for t in range(iters):
        u = D @ W
        grad = D.T @ (1.0 / (1.0 + np.exp(-u))) + l2 * W
        W = np.maximum(W - (step / (1.0 + decay * t)) * grad, 0.0)
        W[~active] = 0.0
        trace.append(objective(W))
    return FitResult(weights=W, objective_trace=trace, pinned_rules=pinned)


@dataclass(frozen=True)
class CompiledRuleTable:
    """Quantized soft-rule weights laid out as ternary entries."""

    entries: tuple  # of (TernaryEntry, raw_weight)
    fmt: FixedPointFormat
    s_max: float = 1.0

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    @property
    def bitwidth(self) -> int:
        return self.fmt.total_bits

    @property
    def total_bits(self) -> int:
        return self.n_entries * self.bitwidth

    def to_table_text(self) -> str:
        lines = [f"# compiled rule table fmt={self.fmt} s_max={self.s_max!r}"]
        for e, raw in self.entries:
            lines.append(f"{e.priority} {e.value:#x}/{e.mask:#x} -> {e.payload} w={raw}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table_text(cls, text: str) -> "CompiledRuleTable":
        fmt = None
        s_max = 1.0
        entries = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for part in line.split():
                    if part.startswith("fmt="):
                        fmt = FixedPointFormat.from_string(part[4:])
                    elif part.startswith("s_max="):
                        s_max = float(part[6:])
                continue
            head, tail = line.split("->")
            prio_s, pat = head.split()
            value_s, mask_s = pat.split("/")
            payload_s, w_s = tail.split("w=")
            entries.append(
                (TernaryEntry(int(value_s, 16), int(mask_s, 16), int(prio_s),
                              int(payload_s.strip())), int(w_s))
            )
        if fmt is None:
            raise ValueError("compiled table header is missing the format")
        return cls(tuple(entries), fmt, s_max)


def compile_rules(W, rules, fmt: FixedPointFormat, M_tbl: int,
                  drop_to_fit: bool = False, s_max: float = 1.0) -> CompiledRuleTable:
    """Quantize soft-rule weights into a table obeying n_entries * b <= M_tbl.

    Hard rules stay out of the table (they carry no weight).  A weight that
    quantizes below one LSB is kept with raw weight 0 and warned about.  When
    the table is over budget, drop_to_fit trims lowest-weight entries first;
    otherwise BudgetExceededError reports (required_bits, M_tbl).
    """
    W = np.asarray(W, dtype=np.float64)
    soft = [r for r in rules if not r.hard]
    if len(W) != len(soft):
        raise ValueError(f"{len(W)} weights for {len(soft)} soft rules")
    pairs = sorted(zip(soft, W), key=lambda p: (-p[1], p[0].rule_id))
    required = len(pairs) * fmt.total_bits
    if required > M_tbl:
        if not drop_to_fit:
            raise BudgetExceededError(required, M_tbl, what="rule table")
        keep = M_tbl // fmt.total_bits
        pairs = pairs[:keep]
    entries = []
    for rule, w in pairs:
        q = quantize(float(w), fmt, policy="saturating")
        if w > 0 and q.raw == 0:
            warnings.warn(f"rule {rule.rule_id} weight {w:.3g} is below one LSB of {fmt}")
        elif q.raw == fmt.max_raw and w > fmt.max_value:
            warnings.warn(f"rule {rule.rule_id} weight {w:.3g} saturates {fmt}")
        entries.append((rule.pattern, q.raw))
    return CompiledRuleTable(tuple(entries), fmt, s_max)


def soft_score(table: CompiledRuleTable, field_bits: int) -> float:
    """Sum of dequantized weights of matching entries, clamped to [0, s_max]."""
    acc = 0
    for entry, raw in table.entries:
        if entry.matches(field_bits):
            acc += raw
    return min(max(acc / table.fmt.scale, 0.0), table.s_max)


# -- rule files: one rule per line `hard|soft priority value/mask weight` -----


def rules_to_text(rules) -> str:
    lines = []
    for r in rules:
        kind = "hard" if r.hard else "soft"
        lines.append(f"{kind} {r.pattern.priority} "
                     f"{r.pattern.value:#x}/{r.pattern.mask:#x} {r.weight!r}")
    return "\n".join(lines) + "\n"


def rules_from_text(text: str) -> list[SymbolicRule]:
    rules = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, prio_s, pat, weight_s = line.split()
        value_s, mask_s = pat.split("/")
        rid = len(rules)
        rules.append(SymbolicRule(
            rule_id=rid,
            pattern=TernaryEntry(int(value_s, 16), int(mask_s, 16), int(prio_s), rid),
            weight=float(weight_s),
            hard=(kind == "hard"),
        ))
    return rules
