"""Synthetic traces: determinism, splits, metric arithmetic."""

import numpy as np
import pytest

from attnplane.features import input_norm_bound
from attnplane.workload import (
    DIURNAL,
    HARD_TRIGGER_DPORT,
    STEP,
    WorkloadSpec,
    class_means,
    from_csv,
    generate,
    score_metrics,
    split_by_flow,
    to_csv,
)


def test_generate_zero_flows_header_only():
    spec = WorkloadSpec(flows=0, seed=1)
    pkts = generate(spec)
    csv = to_csv(pkts, spec.d, spec.d_v)
    lines = csv.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("ts,flow_src,flow_dst,sport,dport,proto,f0")


def test_generate_deterministic_bytes():
    spec = WorkloadSpec(flows=20, seed=42, drift=DIURNAL)
    a = to_csv(generate(spec), spec.d, spec.d_v)
    b = to_csv(generate(spec), spec.d, spec.d_v)
    assert a == b
    c = to_csv(generate(WorkloadSpec(flows=20, seed=43, drift=DIURNAL)), spec.d, spec.d_v)
    assert a != c


def test_generate_norms_within_bounds():
    spec = WorkloadSpec(flows=30, seed=7)
    R = input_norm_bound(spec.d)
    for p in generate(spec):
        assert np.linalg.norm(p.features) <= R + 1e-12
        assert np.linalg.norm(p.values) <= 1.0 + 1e-12


def test_six_sigma_separation_nearest_centroid_oracle():
    # with means 6 sigma apart a nearest-centroid classifier on the true means
    # must be nearly perfect
    spec = WorkloadSpec(flows=120, seed=3, class_sep=0.6, feature_noise=0.1)
    # separation between the two means is 2*0.6*R; sigma per axis is 0.1*R
    pkts = generate(spec)
    means = class_means(spec)
    feats = np.stack([p.features for p in pkts])
    labels = np.array([p.label for p in pkts])
    d2 = ((feats[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    pred = np.argmin(d2, axis=1)
    m = score_metrics(pred, labels)
    assert m.macro_f1 > 0.99


def test_hard_trigger_injection_rate():
    spec = WorkloadSpec(flows=800, seed=9, hard_rule_fraction=0.2)
    pkts = generate(spec)
    attack = [p for p in pkts if p.label != 0]
    frac = np.mean([p.dport == HARD_TRIGGER_DPORT for p in attack])
    assert frac == pytest.approx(0.2, abs=0.05)
    benign = [p for p in pkts if p.label == 0]
    assert not any(p.dport == HARD_TRIGGER_DPORT for p in benign)
    # the trigger is a flow property: a flow either always or never carries it
    by_flow = {}
    for p in attack:
        by_flow.setdefault(p.five_tuple(), set()).add(p.dport == HARD_TRIGGER_DPORT)
    assert all(len(s) == 1 for s in by_flow.values())


def test_csv_roundtrip():
    spec = WorkloadSpec(flows=10, seed=5)
    pkts = generate(spec)
    text = to_csv(pkts, spec.d, spec.d_v)
    back, d, d_v = from_csv(text)
    assert d == spec.d and d_v == spec.d_v
    assert len(back) == len(pkts)
    for a, b in zip(pkts, back):
        assert a.ts == b.ts and a.five_tuple() == b.five_tuple() and a.label == b.label
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.values, b.values)


def test_split_by_flow_ratios_and_disjointness():
    spec = WorkloadSpec(flows=100, seed=11)
    pkts = generate(spec)
    train, val, test = split_by_flow(pkts, (0.75, 0.10, 0.15), seed=2)
    flows = lambda part: {p.five_tuple() for p in part}
    ft, fv, fs = flows(train), flows(val), flows(test)
    assert len(ft) == 75 and len(fv) == 10 and len(fs) == 15
    assert not (ft & fv) and not (ft & fs) and not (fv & fs)
    assert ft | fv | fs == flows(pkts)
    assert len(train) + len(val) + len(test) == len(pkts)


def test_split_single_flow_lands_once():
    spec = WorkloadSpec(flows=1, seed=1)
    pkts = generate(spec)
    parts = split_by_flow(pkts, seed=0)
    non_empty = [p for p in parts if p]
    assert len(non_empty) == 1
    assert len(non_empty[0]) == len(pkts)


def test_metrics_perfect_predictions():
    labels = np.array([0, 1, 0, 1, 1])
    m = score_metrics(labels.astype(int), labels)
    assert m.macro_f1 == 1.0 and m.precision == 1.0 and m.recall == 1.0


def test_metrics_random_scores_auc_near_half():
    rng = np.random.default_rng(0)
    n = 10_000
    labels = rng.integers(0, 2, n)
    scores = rng.random(n)
    m = score_metrics(scores, labels)
    assert abs(m.auc - 0.5) < 0.03


def test_metrics_hand_built_confusion_case():
    # 6 samples, worked by hand:
    #   class 0: predicted {0,4}, TP=1, FP=1 -> P=1/2; actual {0,1,5} -> R=1/3
    #            F1 = 2*(1/2)(1/3)/(1/2+1/3) = 2/5
    #   class 1: predicted {1,2,3,5}, TP=2, FP=2 -> P=1/2; actual {2,3,4} -> R=2/3
    #            F1 = 2*(1/2)(2/3)/(1/2+2/3) = 4/7
    labels = np.array([0, 0, 1, 1, 1, 0])
    preds = np.array([0, 1, 1, 1, 0, 1])
    m = score_metrics(preds, labels)
    assert m.per_class[0]["f1"] == pytest.approx(2.0 / 5.0)
    assert m.per_class[1]["f1"] == pytest.approx(4.0 / 7.0)
    assert m.macro_f1 == pytest.approx((2.0 / 5.0 + 4.0 / 7.0) / 2)


@pytest.mark.parametrize("k", [2, 3])
def test_metrics_all_one_class_predictor(k):
    # balanced k-class labels, constant prediction of class 0:
    # macro F1 = (2 / (k + 1)) / k
    n_per = 30
    labels = np.concatenate([np.full(n_per, c) for c in range(k)])
    preds = np.zeros_like(labels)
    m = score_metrics(preds, labels)
    assert m.macro_f1 == pytest.approx((2.0 / (k + 1)) / k)


def test_metrics_bounds():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, 200)
    scores = rng.random(200)
    m = score_metrics(scores, labels)
    for v in (m.macro_f1, m.precision, m.recall):
        assert 0.0 <= v <= 1.0


def test_step_drift_changes_second_half_means():
    spec = WorkloadSpec(flows=200, seed=13, drift=STEP, drift_magnitude=0.8)
    pkts = generate(spec)
    ts = np.array([p.ts for p in pkts])
    cut = np.quantile(ts, 0.5)
    early = np.stack([p.features for p in pkts if p.ts <= cut and p.label == 0])
    late = np.stack([p.features for p in pkts if p.ts > cut and p.label == 0])
    shift = np.linalg.norm(early.mean(axis=0) - late.mean(axis=0))
    assert shift > 0.2
