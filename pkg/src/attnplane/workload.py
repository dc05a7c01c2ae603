"""Synthetic traffic generation, CSV trace I/O, flow-keyed splits, metrics.

Traces are class-conditional Gaussian mixtures with controllable separation,
per-token value noise, optional mean drift (step or diurnal), class-biased
port structure for the soft rules, and hard-rule trigger packets injected at
a configured fraction of attack packets.  Generation is a pure function of
the spec (byte-identical CSV for a fixed seed).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import precision_recall_fscore_support, roc_auc_score

from .features import input_norm_bound, normalize_rows
from .pipeline import PacketRecord

NONE = "none"
STEP = "step"
DIURNAL = "diurnal"
DRIFT_KINDS = (NONE, STEP, DIURNAL)

HARD_TRIGGER_DPORT = 31337
BENIGN_DPORTS = (80, 443, 53, 22, 8080, 123)


@dataclass(frozen=True)
class WorkloadSpec:
    flows: int = 200
    packets_min: int = 8
    packets_max: int = 24
    d: int = 8
    d_v: int = 2
    class_count: int = 2
    drift: str = NONE
    drift_magnitude: float = 0.5
    hard_rule_fraction: float = 0.05
    class_sep: float = 0.55        # class-mean radius as a fraction of the norm cap
    feature_noise: float = 0.35    # in units of the norm cap
    value_noise: float = 0.6       # per-packet noise on the in-stream evidence coord
    evidence: float = 0.7          # in-stream class-evidence magnitude (value coord 1)
    anchor_noise: float = 0.4      # noise on the anchor-evidence coord (value coord 0),
                                   # which carries no class signal inside the stream
    flow_value_bias: float = 0.0   # per-flow offset on the in-stream evidence coord;
                                   # does not average out within a flow
    port_bias: float = 0.7         # P(attack sport has its top bit set)
    benign_port_bias: float = 0.0  # same for benign flows (rule overlap)
    seed: int = 0

    def __post_init__(self):
        if self.drift not in DRIFT_KINDS:
            raise ValueError(f"drift must be one of {DRIFT_KINDS}")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if not (0 <= self.hard_rule_fraction <= 1):
            raise ValueError("hard_rule_fraction must lie in [0, 1]")
        if self.packets_min < 1 or self.packets_max < self.packets_min:
            raise ValueError("bad packets_per_flow range")


def class_means(spec: WorkloadSpec) -> np.ndarray:
    """Deterministic well-separated unit directions scaled into the norm ball."""
    rng = np.random.Generator(np.random.Philox(spec.seed ^ 0xC1A55))
    g = rng.standard_normal((spec.class_count, spec.d))
    q, _ = np.linalg.qr(g.T)
    dirs = q.T[: spec.class_count]
    R = input_norm_bound(spec.d)
    return dirs * (spec.class_sep * R)


def drift_offset(spec: WorkloadSpec, phase: float) -> np.ndarray:
    """Mean displacement at trace phase in [0, 1]; shared by all classes."""
    if spec.drift == NONE or spec.drift_magnitude == 0.0:
        return np.zeros(spec.d)
    rng = np.random.Generator(np.random.Philox(spec.seed ^ 0xD21F7))
    w = rng.standard_normal(spec.d)
    w /= np.linalg.norm(w)
    R = input_norm_bound(spec.d)
    if spec.drift == STEP:
        scale = spec.drift_magnitude if phase >= 0.5 else 0.0
    else:  # diurnal: one compressed 24 h cycle over the trace
        scale = spec.drift_magnitude * np.sin(2.0 * np.pi * phase)
    return w * (scale * R)


def generate(spec: WorkloadSpec) -> list[PacketRecord]:
    """Emit the packet list, timestamp-sorted; deterministic under the seed."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    R = input_norm_bound(spec.d)
    means = class_means(spec)
    packets: list[PacketRecord] = []
    n_total_est = spec.flows * (spec.packets_min + spec.packets_max) // 2
    horizon_ns = max(n_total_est, 1) * 1_000_000  # ~1 ms mean inter-arrival

    for f in range(spec.flows):
        cls = int(rng.integers(spec.class_count))
        attack = cls != 0
        src = int(rng.integers(1, 0xFFFFFFFF))
        dst = int(rng.integers(1, 0xFFFFFFFF))
        msb_prob = spec.port_bias if attack else spec.benign_port_bias
        if rng.random() < msb_prob:
            sport = int(rng.integers(0x8000, 0x10000))
        else:
            sport = int(rng.integers(1024, 0x8000))
        # trigger port is a flow property: rewriting it per packet would split
        # the 5-tuple and with it the flow's state and split membership
        if attack and rng.random() < spec.hard_rule_fraction:
            dport = HARD_TRIGGER_DPORT
        else:
            dport = int(BENIGN_DPORTS[int(rng.integers(len(BENIGN_DPORTS)))])
        proto = 6 if rng.random() < 0.8 else 17
        v_bias = float(rng.standard_normal() * spec.flow_value_bias)
        n_pkts = int(rng.integers(spec.packets_min, spec.packets_max + 1))
        start = int(rng.integers(0, horizon_ns))
        gaps = rng.integers(100_000, 2_000_000, size=n_pkts)
        ts = start
        for p in range(n_pkts):
            ts += int(gaps[p])
            phase = min(ts / horizon_ns, 1.0)
            mu = means[cls] + drift_offset(spec, phase)
            feat = mu + rng.standard_normal(spec.d) * (spec.feature_noise * R)
            feat = normalize_rows(feat, R)
            # value coord 0 is the anchor-evidence channel (in-stream packets
            # put only noise there); the in-stream class evidence rides on
            # coord 1 when available
            sign = 1.0 if attack else -1.0
            val = rng.standard_normal(spec.d_v) * spec.anchor_noise
            stream_evidence = sign * spec.evidence + v_bias \
                + float(rng.standard_normal()) * spec.value_noise
            val[1 if spec.d_v >= 2 else 0] = stream_evidence
            val = normalize_rows(val, 1.0)
            packets.append(PacketRecord(
                ts=ts, src=src, dst=dst, sport=sport, dport=dport,
                proto=proto, features=feat, values=val, label=cls,
            ))
    packets.sort(key=lambda p: (p.ts, p.five_tuple()))
    return packets


# ---------------------------------------------------------------------------
# CSV trace format: ts,flow_src,flow_dst,sport,dport,proto,f0..f{d-1},v0..v{dv-1},label


def csv_header(d: int, d_v: int) -> str:
    cols = ["ts", "flow_src", "flow_dst", "sport", "dport", "proto"]
    cols += [f"f{i}" for i in range(d)]
    cols += [f"v{i}" for i in range(d_v)]
    cols.append("label")
    return ",".join(cols)


def to_csv(packets, d: int, d_v: int) -> str:
    out = io.StringIO()
    out.write(csv_header(d, d_v) + "\n")
    for p in packets:
        fields = [str(p.ts), str(p.src), str(p.dst), str(p.sport), str(p.dport), str(p.proto)]
        fields += [repr(float(x)) for x in p.features]
        fields += [repr(float(x)) for x in p.values]
        fields.append(str(p.label))
        out.write(",".join(fields) + "\n")
    return out.getvalue()


def from_csv(text: str) -> tuple[list[PacketRecord], int, int]:
    """Parse a trace; returns (packets, d, d_v)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    d = sum(1 for c in header if c.startswith("f") and c[1:].isdigit())
    d_v = sum(1 for c in header if c.startswith("v") and c[1:].isdigit())
    packets = []
    for ln in lines[1:]:
        parts = ln.split(",")
        ts, src, dst, sport, dport, proto = (int(x) for x in parts[:6])
        feat = np.array([float(x) for x in parts[6:6 + d]])
        val = np.array([float(x) for x in parts[6 + d:6 + d + d_v]])
        label = int(parts[6 + d + d_v])
        packets.append(PacketRecord(ts=ts, src=src, dst=dst, sport=sport, dport=dport,
                                    proto=proto, features=feat, values=val, label=label))
    return packets, d, d_v


def split_by_flow(packets, ratios=(0.75, 0.10, 0.15), seed: int = 0):
    """Partition by 5-tuple so no flow straddles splits; sizes within one flow.

    Flow order is first-appearance order, shuffled under the seed; counts use
    largest-remainder rounding so the three parts always sum to the flow count.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    keys = []
    seen = set()
    for p in packets:
        k = p.five_tuple()
        if k not in seen:
            seen.add(k)
            keys.append(k)
    rng = np.random.Generator(np.random.Philox(seed ^ 0x5317))
    order = rng.permutation(len(keys))
    keys = [keys[i] for i in order]
    n = len(keys)
    raw = [r * n for r in ratios]
    counts = [int(x) for x in raw]
    rem = n - sum(counts)
    frac_order = sorted(range(len(ratios)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(rem):
        counts[frac_order[i % len(ratios)]] += 1
    buckets = {}
    pos = 0
    for split_idx, c in enumerate(counts):
        for k in keys[pos:pos + c]:
            buckets[k] = split_idx
        pos += c
    parts = ([], [], [])
    for p in packets:
        parts[buckets[p.five_tuple()]].append(p)
    return parts


@dataclass
class MetricsSummary:
    macro_f1: float
    precision: float
    recall: float
    auc: float
    per_class: dict = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "auc": self.auc,
            "per_class": self.per_class,
            "n": self.n,
        }


def score_metrics(predictions, labels, threshold: float = 0.5) -> MetricsSummary:
    """Macro-averaged one-vs-rest metrics.

    ``predictions`` may be float scores in [0, 1] (binary; thresholded and
    ranked for AUC) or integer class ids (multiclass; AUC reported as nan).
    """
    labels = np.asarray(labels)
    preds = np.asarray(predictions)
    if preds.dtype.kind == "f" and set(np.unique(labels)) <= {0, 1}:
        hard = (preds > threshold).astype(int)
        auc = float(roc_auc_score(labels, preds)) if len(set(labels)) > 1 else float("nan")
    else:
        hard = preds.astype(int)
        auc = float("nan")
    classes = sorted(set(int(c) for c in labels) | set(int(c) for c in hard))
    pr, rc, f1, support = precision_recall_fscore_support(
        labels, hard, labels=classes, average=None, zero_division=0
    )
    per_class = {
        int(c): {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
        for c, p, r, f, s in zip(classes, pr, rc, f1, support)
    }
    return MetricsSummary(
        macro_f1=float(np.mean(f1)),
        precision=float(np.mean(pr)),
        recall=float(np.mean(rc)),
        auc=auc,
        per_class=per_class,
        n=len(labels),
    )
