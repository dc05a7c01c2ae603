"""Staged match-action dataplane simulator.

Per packet the simulated pipeline runs, in order: ternary key-index lookup,
feature-map table access, stateful accumulator updates for newly selected
keys, the query-time reduce producing the neural score, hard-rule lookup,
soft-table lookup, and cascade fusion.  Stage accounting charges one stage
per table access (key index, feature map, hard rules, soft table), one for
the stateful update when any key is absorbed, and ceil(log2 m) for the
query reduce tree.

Budgets are checked before a run: strict mode refuses configurations that
break a constraint, analysis mode runs them and reports the violation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionState, Token, merge_states, state_query
from .errors import BudgetViolationError
from .features import input_norm_bound, normalize_rows
from .fixedpoint import CHECKED, FixedPointFormat, FixedPointOverflowError, add_array
from .fusion import FusionConfig, fuse
from .keyselect import GlobalIndex, LocalWindow, SignatureCodec, select_keys
from .symbolic import CompiledRuleTable, hard_match, soft_score

STRICT = "strict-hw"
ANALYSIS = "analysis"

COUNTER_BITS = 64

# Externally reported aggregated-state figures for common (m, d_v, bits)
# operating points.  Several disagree with the straight m*d_v*b arithmetic;
# the budget report surfaces both numbers instead of silently picking one.
REPORTED_OPERATING_POINTS = {
    (64, 32, 16): "2KB",
    (64, 64, 16): "4KB",
    (128, 32, 16): "4KB",
    (128, 64, 16): "8KB",
    (128, 32, 8): "2KB",
    (128, 64, 8): "4KB",
    (256, 32, 16): "8KB",
    (256, 64, 16): "16KB",
    (256, 128, 16): "32KB",
}


@dataclass(frozen=True)
class ResourceModel:
    phv_bits: int = 4096
    per_flow_sram_bits: int = 8192
    tcam_entries: int = 1024
    sram_table_bits: int = 1 << 20
    stages: int = 12
    pipelines: int = 1

    def __post_init__(self):
        for name in ("phv_bits", "per_flow_sram_bits", "tcam_entries",
                     "sram_table_bits", "stages", "pipelines"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PacketRecord:
    ts: int
    src: int
    dst: int
    sport: int
    dport: int
    proto: int
    features: np.ndarray
    values: np.ndarray
    label: int = -1

    def field_bits(self) -> int:
        """proto(8) | sport(16) | dport(16), the pattern the rule TCAM sees."""
        return ((self.proto & 0xFF) << 32) | ((self.sport & 0xFFFF) << 16) | (self.dport & 0xFFFF)

    def five_tuple(self):
        return (self.src, self.dst, self.sport, self.dport, self.proto)


def flow_id(pkt: PacketRecord, seed: int) -> int:
    """Deterministic seeded 64-bit hash of the canonical 5-tuple."""
    h = hashlib.blake2b(
        repr(pkt.five_tuple()).encode(), digest_size=8,
        key=seed.to_bytes(8, "little", signed=False),
    )
    return int.from_bytes(h.digest(), "little")


@dataclass
class BudgetReport:
    agg_bits: int
    flow_ok: bool
    window_ok: bool
    table_ok: bool
    phv_ok: bool
    details: dict

    @property
    def all_ok(self) -> bool:
        return self.flow_ok and self.window_ok and self.table_ok and self.phv_ok

    def to_dict(self) -> dict:
        return {
            "agg_bits": self.agg_bits,
            "flow_ok": self.flow_ok,
            "window_ok": self.window_ok,
            "table_ok": self.table_ok,
            "phv_ok": self.phv_ok,
            "all_ok": self.all_ok,
            "details": self.details,
        }

    def to_text(self) -> str:
        d = self.details
        lines = [
            f"aggregated state: {self.agg_bits} bits = {self.agg_bits / 8192:g} KB "
            f"(m={d['m']} x d_v={d['d_v']} x b={d['b']})",
            f"  per-flow accumulators {'OK' if self.flow_ok else 'INFEASIBLE'}: "
            f"{self.agg_bits} <= {d['per_flow_sram_bits']} bits per-flow budget"
            if self.flow_ok else
            f"  per-flow accumulators INFEASIBLE: {self.agg_bits} > "
            f"{d['per_flow_sram_bits']} bits per-flow budget",
            f"  window {'OK' if self.window_ok else 'INFEASIBLE'}: "
            f"{d['window_bits']} bits (L={d['L']} x d={d['d']} x {d['b_key']}b keys)",
            f"  rule/map table {'OK' if self.table_ok else 'INFEASIBLE'}: "
            f"{d['table_bits']} <= {d['sram_table_bits']} bits",
            f"  PHV lane {'OK' if self.phv_ok else 'INFEASIBLE'}: "
            f"{self.agg_bits} vs {d['phv_bits']} bits",
        ]
        if "reported_operating_point" in d:
            lines.append(
                f"  note: externally reported figure for this point is "
                f"{d['reported_operating_point']}, our arithmetic gives "
                f"{self.agg_bits / 8192:g} KB"
            )
        lines.append(f"  combined per-flow state: {d['combined_flow_bits']} bits")
        return "\n".join(lines)


def check_budgets(rm: ResourceModel, m: int, d_v: int, b: int, L: int, d: int,
                  n_entries: int, b_key: int = 16, b_tbl: int = 16,
                  b_z: int | None = None) -> BudgetReport:
    """Evaluate every static memory constraint; reports, never raises."""
    agg_bits = m * d_v * b
    window_bits = L * d * b_key
    table_bits = n_entries * b_tbl
    z_bits = m * (b if b_z is None else b_z)
    combined = agg_bits + z_bits + window_bits + COUNTER_BITS
    details = {
        "m": m, "d_v": d_v, "b": b, "L": L, "d": d, "b_key": b_key,
        "n_entries": n_entries, "b_tbl": b_tbl,
        "window_bits": window_bits, "table_bits": table_bits,
        "normalizer_bits": z_bits,
        "combined_flow_bits": combined,
        "per_flow_sram_bits": rm.per_flow_sram_bits,
        "sram_table_bits": rm.sram_table_bits,
        "phv_bits": rm.phv_bits,
    }
    reported = REPORTED_OPERATING_POINTS.get((m, d_v, b))
    if reported is not None and reported != f"{agg_bits / 8192:g}KB":
        details["reported_operating_point"] = reported
    return BudgetReport(
        agg_bits=agg_bits,
        flow_ok=agg_bits <= rm.per_flow_sram_bits,
        window_ok=window_bits <= rm.per_flow_sram_bits,
        table_ok=table_bits <= rm.sram_table_bits,
        phv_ok=agg_bits <= rm.phv_bits,
        details=details,
    )


# ---------------------------------------------------------------------------
# the three execution primitives


def partition(x, k: int) -> list:
    """Split a vector into k contiguous segments with sizes differing by <= 1."""
    x = np.asarray(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    return [seg for seg in np.array_split(x, k)]


def map_apply(fns, segments) -> list:
    if len(fns) != len(segments):
        raise ValueError(f"{len(fns)} functions for {len(segments)} segments")
    return [f(seg) for f, seg in zip(fns, segments)]


def sum_reduce(raw_vectors, fmt: FixedPointFormat, policy: str = CHECKED):
    """Element-wise fixed-point sum via a pairwise adder tree.

    Returns (raw sum, stages used); the tree takes ceil(log2 k) stages.  Under
    the checked policy the result is order-independent (integer adds are
    exact); under saturation the documented order is this pairwise tree.
    """
    vecs = [np.asarray(v, dtype=np.int64) for v in raw_vectors]
    if not vecs:
        raise ValueError("nothing to reduce")
    stages = 0
    while len(vecs) > 1:
        nxt = []
        for i in range(0, len(vecs) - 1, 2):
            nxt.append(add_array(vecs[i], vecs[i + 1], fmt, policy))
        if len(vecs) % 2 == 1:
            nxt.append(vecs[-1])
        vecs = nxt
        stages += 1
    return vecs[0], stages


def reduce_stage_count(k: int) -> int:
    return 0 if k <= 1 else math.ceil(math.log2(k))


# ---------------------------------------------------------------------------
# per-flow context and the per-packet runtime


@dataclass
class ResourceTrace:
    n_t: int = 0
    n_local: int = 0
    n_global: int = 0
    n_dropped: int = 0
    n_new: int = 0
    table_accesses: int = 0
    stage_use: int = 0
    stage_ok: bool = True
    table_version: int = 0
    stateful_bits: int = 0
    s_nn: float = 0.0
    s_sym: float = 0.0
    i_sym: int = 0


class FlowContext:
    """Everything one flow owns: window, accumulators, counters."""

    def __init__(self, fid: int, window_capacity: int, n_heads: int, m: int, d_v: int,
                 fmt_s: FixedPointFormat, fmt_z: FixedPointFormat, policy: str = CHECKED):
        self.flow_id = fid
        self.window = LocalWindow(window_capacity)
        self.states = [AttentionState(m, d_v, fmt_s, fmt_z, policy) for _ in range(n_heads)]
        self.absorbed: set[int] = set()
        self.packets = 0
        self._next_uid = 0

    def new_uid(self) -> int:
        uid = self._next_uid
        self._next_uid += 1
        return uid

    def stateful_bits(self, d: int, b_key: int = 16) -> int:
        window_bits = self.window.capacity * d * b_key
        return window_bits + sum(st.storage_bits for st in self.states) + COUNTER_BITS


class PipelineOverflowError(RuntimeError):
    """A register overflowed while processing a packet; carries the flow id."""

    def __init__(self, fid: int, cause: FixedPointOverflowError):
        self.flow_id = fid
        self.cause = cause
        super().__init__(f"flow {fid:#x}: {cause}")


@dataclass
class Dataplane:
    """Immutable program state shared by every flow: tables, maps, config.

    The global index is replaced wholesale by ``install_index`` (shadow-table
    swap); packets processed before the swap instant keep the old snapshot.
    """

    feature_maps: list            # one FeatureMap per head
    codec: SignatureCodec
    resource_model: ResourceModel
    fusion_cfg: FusionConfig
    global_index: GlobalIndex | None = None
    hard_rules: tuple = ()
    rule_table: CompiledRuleTable | None = None
    window_capacity: int = 8
    n_cap: int = 32
    score_dim: int = 0
    score_weights: tuple | None = None  # projection onto the output; overrides score_dim
    fmt_s: FixedPointFormat = FixedPointFormat(16, 8)
    fmt_z: FixedPointFormat = FixedPointFormat(16, 8)
    policy: str = CHECKED
    gamma_floor: float | None = None
    mode: str = ANALYSIS
    b_key: int = 16

    def __post_init__(self):
        if self.mode not in (STRICT, ANALYSIS):
            raise ValueError(f"mode must be {STRICT!r} or {ANALYSIS!r}")
        if not self.feature_maps:
            raise ValueError("need at least one feature map")

    @property
    def m(self) -> int:
        return self.feature_maps[0].m

    @property
    def d(self) -> int:
        return self.feature_maps[0].d

    def budget_report(self, d_v: int) -> BudgetReport:
        n_entries = (len(self.rule_table.entries) if self.rule_table else 0) \
            + (len(self.global_index) if self.global_index else 0)
        return check_budgets(
            self.resource_model, self.m, d_v, self.fmt_s.total_bits,
            self.window_capacity, self.d, n_entries,
            b_key=self.b_key, b_tbl=self.rule_table.bitwidth if self.rule_table else 16,
            b_z=self.fmt_z.total_bits,
        )

    def install_index(self, new_index: GlobalIndex):
        """Atomic snapshot swap; hot-path lookups never see a mix."""
        if len(new_index) > self.resource_model.tcam_entries:
            raise BudgetViolationError(
                f"index has {len(new_index)} entries > ternary capacity "
                f"{self.resource_model.tcam_entries}"
            )
        self.global_index = new_index

    def new_flow_context(self, fid: int, d_v: int) -> FlowContext:
        fc = FlowContext(fid, self.window_capacity, len(self.feature_maps),
                         self.m, d_v, self.fmt_s, self.fmt_z, self.policy)
        if self.mode == STRICT:
            bits = fc.stateful_bits(self.d, self.b_key)
            if bits > self.resource_model.per_flow_sram_bits:
                raise BudgetViolationError(
                    f"flow state needs {bits} bits > per-flow budget "
                    f"{self.resource_model.per_flow_sram_bits}"
                )
        return fc

    def stage_use(self, absorbed_any: bool) -> int:
        accesses = 4  # key index, feature map, hard rules, soft table
        return accesses + (1 if absorbed_any else 0) + reduce_stage_count(self.m)

    def process_packet(self, fc: FlowContext, pkt: PacketRecord):
        """Run the per-packet program; returns (FusedScore, ResourceTrace)."""
        R = input_norm_bound(self.d)
        key = normalize_rows(pkt.features, R)
        value = normalize_rows(pkt.values, 1.0)
        sig = self.codec.encode(key)

        tok = Token(key=key, value=value, uid=fc.new_uid())
        if self.window_capacity > 0:
            fc.window.push(tok)
        selection = select_keys(
            fc.window if self.window_capacity > 0 else None,
            self.global_index, sig, n_cap=self.n_cap,
        )

        new_tokens = [t for t in selection.tokens if t.uid not in fc.absorbed]
        try:
            for t in new_tokens:
                for head, fm in zip(fc.states, self.feature_maps):
                    head.update_inplace(fm, t)
                fc.absorbed.add(t.uid)
            if fc.states[0].t == 0:
                s_nn = 0.0  # nothing selected yet: no neural evidence either way
            else:
                w = None if self.score_weights is None else np.asarray(self.score_weights)
                s_nn = 0.0
                for head, fm in zip(fc.states, self.feature_maps):
                    out = state_query(head, fm, key, self.gamma_floor)
                    s_nn += float(out.o @ w) if w is not None else float(out.o[self.score_dim])
                s_nn /= len(fc.states)
        except FixedPointOverflowError as exc:
            raise PipelineOverflowError(fc.flow_id, exc) from exc

        bits = pkt.field_bits()
        i_sym = hard_match(self.hard_rules, bits)
        s_sym = soft_score(self.rule_table, bits) if self.rule_table else 0.0
        fused = fuse(s_nn, i_sym, s_sym, self.fusion_cfg)

        fc.packets += 1
        stage_use = self.stage_use(bool(new_tokens))
        trace = ResourceTrace(
            n_t=selection.n_t,
            n_local=selection.n_local,
            n_global=selection.n_global,
            n_dropped=selection.n_dropped,
            n_new=len(new_tokens),
            table_accesses=4,
            stage_use=stage_use,
            stage_ok=stage_use <= self.resource_model.stages,
            table_version=self.global_index.version if self.global_index else 0,
            stateful_bits=fc.stateful_bits(self.d, self.b_key),
            s_nn=s_nn,
            s_sym=s_sym,
            i_sym=i_sym,
        )
        return fused, trace


@dataclass
class ShardPlan:
    assignment: list  # pipeline index -> list of head indices


def shard_heads(n_heads: int, pipelines: int) -> ShardPlan:
    """Round-robin head placement across physical pipelines."""
    if pipelines < 1:
        raise ValueError("pipelines must be >= 1")
    assignment = [[] for _ in range(pipelines)]
    for h in range(n_heads):
        assignment[h % pipelines].append(h)
    return ShardPlan(assignment=assignment)


def merge_sharded(parts: list) -> AttentionState:
    """Merge per-pipeline partial states of one head; commutative checked adds."""
    if not parts:
        raise ValueError("nothing to merge")
    acc = parts[0]
    for p in parts[1:]:
        acc = merge_states(acc, p)
    return acc


def run_trace(dataplane: Dataplane, packets, seed: int, d_v: int,
              on_packet=None):
    """Process a packet list in timestamp-major order.

    Returns (records, flow_contexts).  Each record is a dict ready for
    JSON-lines emission.  ``on_packet(i, pkt)`` runs before each packet and
    may install tables (the control-plane hook).
    """
    order = sorted(range(len(packets)), key=lambda i: (packets[i].ts, i))
    contexts: dict[int, FlowContext] = {}
    records = []
    if dataplane.mode == STRICT:
        report = dataplane.budget_report(d_v)
        if not report.all_ok:
            raise BudgetViolationError(
                "budget check failed before run:\n" + report.to_text()
            )
    for i in order:
        pkt = packets[i]
        if on_packet is not None:
            on_packet(i, pkt)
        fid = flow_id(pkt, seed)
        fc = contexts.get(fid)
        if fc is None:
            fc = dataplane.new_flow_context(fid, d_v)
            contexts[fid] = fc
        fused, trace = dataplane.process_packet(fc, pkt)
        records.append({
            "ts": pkt.ts,
            "flow": f"{fid:016x}",
            "label": pkt.label,
            "score": fused.value,
            "path": fused.path,
            "s_nn": trace.s_nn,
            "s_sym": trace.s_sym,
            "i_sym": trace.i_sym,
            "n_t": trace.n_t,
            "n_new": trace.n_new,
            "stage_use": trace.stage_use,
            "stage_ok": trace.stage_ok,
            "table_version": trace.table_version,
            "stateful_bits": trace.stateful_bits,
        })
    return records, contexts
