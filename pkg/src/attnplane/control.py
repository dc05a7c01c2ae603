"""Two-timescale adaptation: line-rate EMA statistics, slow reclustering,
threshold-gated atomic installs.

The fast path is the per-centroid occupancy EMA C_j <- (1-eta) C_j + eta u_j,
updated once per packet.  The slow path harvests the statistics every t_cp
seconds, reclusters recent samples under the table budget, and installs the
new mapping only when it differs enough from the live one (Jaccard distance
over range-encoded entries above tau_map) and the batched install completes
strictly inside the control-plane interval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceededError
from .fixedpoint import FixedPointFormat, quantize
from .keyselect import SignatureCodec

ACCEPTED = "accepted"
SKIPPED_BELOW_THRESHOLD = "skipped_below_threshold"
REJECTED_ATOMICITY = "rejected_atomicity"


class EmaTracker:
    """Per-centroid occupancy EMA; every C_j stays in [0, 1] by construction."""

    def __init__(self, n_centroids: int, eta: float):
        if not (0.0 <= eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {eta}")
        self.eta = float(eta)
        self.C = np.zeros(n_centroids, dtype=np.float64)
        self.updates = 0

    def update(self, j: int, u) -> None:
        if not (0 <= j < len(self.C)):
            raise IndexError(f"centroid index {j} out of range")
        self.C[j] = (1.0 - self.eta) * self.C[j] + self.eta * float(u)
        self.updates += 1

    def update_all(self, u_vec) -> None:
        u = np.asarray(u_vec, dtype=np.float64)
        self.C = (1.0 - self.eta) * self.C + self.eta * u
        self.updates += 1


def ema_update(tracker: EmaTracker, j: int, u) -> EmaTracker:
    tracker.update(j, u)
    return tracker


@dataclass(frozen=True)
class MapEntry:
    centroid: tuple          # real-valued centroid coordinates
    value: int               # range-encoded ternary pattern
    mask: int
    payload_raw: tuple       # quantized centroid raws

    def identity(self):
        # the install gate compares range encodings (masked patterns); payload
        # raws and don't-care bits rattle with sampling noise and would defeat
        # the small-fluctuation threshold
        return (self.value & self.mask, self.mask)


@dataclass(frozen=True)
class MappingTable:
    entries: tuple
    bitwidth: int            # bits per entry after quantization

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    @property
    def total_bits(self) -> int:
        return self.n_entries * self.bitwidth


def _lloyd(samples: np.ndarray, k: int, seed: int, iters: int = 50) -> np.ndarray:
    """Plain deterministic Lloyd iteration; empty clusters respawn on the
    farthest sample."""
    rng = np.random.Generator(np.random.Philox(seed))
    idx = rng.choice(len(samples), size=k, replace=False)
    centroids = samples[idx].astype(np.float64)
    for _ in range(iters):
        d2 = ((samples[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new = centroids.copy()
        for j in range(k):
            members = samples[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(d2.min(axis=1)))
                new[j] = samples[far]
        if np.allclose(new, centroids):
            centroids = new
            break
        centroids = new
    return centroids


def recluster(stats: EmaTracker | None, samples, k_max: int, fmt: FixedPointFormat,
              M_tbl: int, seed: int, codec: SignatureCodec | None = None,
              care_magnitude_bits: int = 1) -> MappingTable:
    """Greedy clustering under the table budget n_entries * b_entry <= M_tbl.

    k starts at min(k_max, len(samples)) and is reduced until the quantized
    table fits; raises BudgetExceededError only if even k = 1 does not fit.
    stats may bias nothing here (the EMA drives cadence, not geometry) but is
    accepted so callers can hand over the tracker snapshot.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) == 0:
        raise ValueError("samples must be a non-empty (n, d) array")
    d = samples.shape[1]
    bits_per_entry = d * fmt.total_bits
    if bits_per_entry > M_tbl:
        raise BudgetExceededError(bits_per_entry, M_tbl, what="mapping table")
    k = min(k_max, len(samples), M_tbl // bits_per_entry)
    if k < 1:
        raise BudgetExceededError(bits_per_entry, M_tbl, what="mapping table")
    centroids = _lloyd(samples, k, seed) if k > 1 else samples.mean(axis=0)[None, :]
    if codec is None:
        codec = SignatureCodec(d)
    care = codec.coord_care_mask(care_magnitude_bits)
    entries = []
    for c in centroids:
        raws = tuple(quantize(float(v), fmt, policy="saturating").raw for v in c)
        entries.append(MapEntry(
            centroid=tuple(float(v) for v in c),
            value=codec.encode(c), mask=care, payload_raw=raws,
        ))
    # one entry per distinct range: equivalent patterns would shadow each other
    entries.sort(key=lambda e: (e.identity(), e.centroid))
    unique = [e for i, e in enumerate(entries)
              if i == 0 or e.identity() != entries[i - 1].identity()]
    return MappingTable(entries=tuple(unique), bitwidth=bits_per_entry)


def map_delta(old: MappingTable, new: MappingTable) -> float:
    """Jaccard distance between the range-encoded entry sets, in [0, 1]."""
    a = {e.identity() for e in old.entries}
    b = {e.identity() for e in new.entries}
    union = a | b
    if not union:
        return 0.0
    return 1.0 - len(a & b) / len(union)


@dataclass(frozen=True)
class InstallEvent:
    start_ts: float
    duration: float          # seconds, = n_entries / install_rate
    n_entries: int
    delta_map: float


@dataclass(frozen=True)
class CadenceConfig:
    t_cp: float = 60.0
    tau_map: float = 0.05
    install_rate: float = 2e5    # entries per second
    eta: float = 0.10


def install_duration(n_entries: int, cfg: CadenceConfig) -> float:
    return n_entries / cfg.install_rate


def try_install(now: float, ev: InstallEvent, cfg: CadenceConfig) -> str:
    """Gate an install: accepted iff delta_map > tau_map and duration < t_cp."""
    if not (ev.delta_map > cfg.tau_map):
        return SKIPPED_BELOW_THRESHOLD
    if not (ev.duration < cfg.t_cp):
        return REJECTED_ATOMICITY
    return ACCEPTED


@dataclass
class StabilityReport:
    eta: float
    t_cp: float
    steps: int
    steady_mean: np.ndarray
    steady_var: np.ndarray
    v_trajectory: np.ndarray
    contraction_slope: float
    installs: list
    skipped: int
    rejected: int
    versions: np.ndarray
    budget_ratio: float

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "t_cp": self.t_cp,
            "steps": self.steps,
            "steady_mean": [float(v) for v in self.steady_mean],
            "steady_var": [float(v) for v in self.steady_var],
            "contraction_slope": self.contraction_slope,
            "install_count": len(self.installs),
            "installs": [
                {"start_ts": ev.start_ts, "duration": ev.duration,
                 "n_entries": ev.n_entries, "delta_map": ev.delta_map}
                for ev in self.installs
            ],
            "skipped_below_threshold": self.skipped,
            "rejected_atomicity": self.rejected,
            "budget_ratio": self.budget_ratio,
        }

    def trajectory_rows(self):
        for t in range(self.steps):
            yield t, float(self.v_trajectory[t]), int(self.versions[t])


def estimate_contraction_slope(v: np.ndarray) -> float:
    """Least-squares slope of V(t) on V(t-1) over the whole trajectory."""
    x, y = v[:-1], v[1:]
    vx = x - x.mean()
    denom = float(np.dot(vx, vx))
    if denom == 0.0:
        return 0.0
    return float(np.dot(vx, y - y.mean()) / denom)


def run_two_timescale(occupancy, cfg: CadenceConfig, horizon: int,
                      packet_rate: float = 1000.0, n_entries: int = 10_000,
                      recluster_fn=None, true_means=None) -> StabilityReport:
    """Simulate the fast EMA against a slow install loop on one logical clock.

    ``occupancy`` is an (horizon, n_centroids) 0/1 array (or a callable
    step -> vector).  Every t_cp seconds of simulated time the slow path
    produces a candidate mapping (via recluster_fn(step) when given, else a
    synthetic identity-changing stand-in), gates it with try_install, and
    swaps the live version at start + duration.  Every step records the live
    version id; install completions are the only instants it may change.
    """
    if callable(occupancy):
        first = np.asarray(occupancy(0), dtype=np.float64)
        n_c = len(first)
        get = lambda t: np.asarray(occupancy(t), dtype=np.float64)
    else:
        occupancy = np.asarray(occupancy, dtype=np.float64)
        horizon = min(horizon, len(occupancy))
        n_c = occupancy.shape[1]
        get = lambda t: occupancy[t]
    tracker = EmaTracker(n_c, cfg.eta)
    dt = 1.0 / packet_rate
    steps_per_epoch = max(int(round(cfg.t_cp * packet_rate)), 1)

    if true_means is None:
        sums = np.zeros(n_c)
        for t in range(horizon):
            sums += get(t)
        true_means = sums / max(horizon, 1)

    v_traj = np.empty(horizon)
    versions = np.empty(horizon, dtype=np.int64)
    c_tail = np.empty((horizon - horizon // 2, n_c))
    installs: list[InstallEvent] = []
    skipped = rejected = 0
    live_version = 0
    live_table = None
    pending: tuple[float, int, MappingTable | None] | None = None  # (swap time, ver, table)

    duration = install_duration(n_entries, cfg)
    for t in range(horizon):
        now = t * dt
        if pending is not None and now >= pending[0]:
            live_version, live_table = pending[1], pending[2]
            pending = None
        tracker.update_all(get(t))
        v_traj[t] = float(np.mean((tracker.C - true_means) ** 2))
        versions[t] = live_version
        if t >= horizon // 2:
            c_tail[t - horizon // 2] = tracker.C
        if t > 0 and t % steps_per_epoch == 0 and pending is None:
            if recluster_fn is not None:
                cand = recluster_fn(t)
                delta = 1.0 if live_table is None else map_delta(live_table, cand)
            else:
                cand = None
                delta = 1.0
            ev = InstallEvent(start_ts=now, duration=duration,
                              n_entries=n_entries, delta_map=delta)
            verdict = try_install(now, ev, cfg)
            if verdict == ACCEPTED:
                installs.append(ev)
                pending = (now + duration, live_version + 1, cand)
            elif verdict == SKIPPED_BELOW_THRESHOLD:
                skipped += 1
            else:
                rejected += 1

    return StabilityReport(
        eta=cfg.eta, t_cp=cfg.t_cp, steps=horizon,
        steady_mean=c_tail.mean(axis=0),
        steady_var=c_tail.var(axis=0),
        v_trajectory=v_traj,
        contraction_slope=estimate_contraction_slope(v_traj),
        installs=installs, skipped=skipped, rejected=rejected,
        versions=versions,
        budget_ratio=duration / cfg.t_cp,
    )
