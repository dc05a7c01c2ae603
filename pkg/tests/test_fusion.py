"""Cascade fusion semantics: veto dominance, monotone blend, table sigmoid."""

import itertools
import math

import numpy as np
import pytest

from attnplane.fusion import (
    HARD_VETO,
    SIGMOID_TABLE256,
    SOFT_BLEND,
    FusedScore,
    FusionConfig,
    fit_blend_coefficients,
    fuse,
    sigmoid,
    sigmoid_table,
    sigmoid_table_max_error,
)


def test_hard_veto_path():
    cfg = FusionConfig(alpha=3.0, beta=-2.0, lambda_h=1)
    out = fuse(0.9, 1, 0.1, cfg)
    assert out == FusedScore(1.0, HARD_VETO)


def test_zero_logit_gives_half():
    cfg = FusionConfig(alpha=0.0, beta=0.0, lambda_h=1)
    out = fuse(0.7, 0, 0.3, cfg)
    assert out.path == SOFT_BLEND
    assert out.value == pytest.approx(0.5)


def test_soft_blend_closed_form():
    cfg = FusionConfig(alpha=1.0, beta=1.0, lambda_h=0)
    out = fuse(0.3, 1, 0.2, cfg)  # veto disabled: blend even on a hard hit
    assert out.path == SOFT_BLEND
    assert out.value == pytest.approx(1.0 / (1.0 + math.exp(-0.5)))
    assert out.value == pytest.approx(0.62246, abs=5e-6)


def test_veto_dominance_grid():
    for alpha, beta in [(0.0, 0.0), (1.0, 1.0), (5.0, -3.0), (-2.0, 4.0)]:
        cfg = FusionConfig(alpha=alpha, beta=beta, lambda_h=1)
        for s_nn in np.linspace(-1, 1, 7):
            for s_sym in np.linspace(0, 1, 5):
                assert fuse(s_nn, 1, s_sym, cfg).value == 1.0


def test_path_exclusivity():
    for i_sym, lam in itertools.product((0, 1), (0, 1)):
        cfg = FusionConfig(lambda_h=lam)
        path = fuse(0.2, i_sym, 0.2, cfg).path
        assert (path == HARD_VETO) == (i_sym == 1 and lam == 1)


def test_monotonicity_in_both_scores():
    cfg = FusionConfig(alpha=1.3, beta=0.7, lambda_h=1)
    grid = np.linspace(-1, 1, 11)
    for s_sym in np.linspace(0, 1, 5):
        vals = [fuse(s, 0, s_sym, cfg).value for s in grid]
        assert all(b - a >= -1e-12 for a, b in zip(vals, vals[1:]))
    for s_nn in grid:
        vals = [fuse(s_nn, 0, s, cfg).value for s in np.linspace(0, 1, 11)]
        assert all(b - a >= -1e-12 for a, b in zip(vals, vals[1:]))


def test_blend_range_open_interval():
    # open interval (0, 1); logits kept below float64's sigmoid saturation
    cfg = FusionConfig(alpha=10.0, beta=10.0)
    lo = fuse(-1.0, 0, 0.0, cfg).value
    hi = fuse(1.0, 0, 1.0, cfg).value
    assert 0.0 < lo < hi < 1.0


def test_lambda_validation():
    with pytest.raises(ValueError):
        FusionConfig(lambda_h=2)
    with pytest.raises(ValueError):
        fuse(0.0, 2, 0.0, FusionConfig())


def test_table_sigmoid_error_is_small_and_reported():
    err = sigmoid_table_max_error()
    assert err < 5e-4
    xs = np.linspace(-10, 10, 1001)
    worst = max(abs(sigmoid_table(x) - sigmoid(x)) for x in xs)
    assert worst <= err + 1e-12


def test_table_mode_used_when_configured():
    cfg = FusionConfig(alpha=1.0, beta=0.0, lambda_h=0, sigmoid_mode=SIGMOID_TABLE256)
    out = fuse(0.37, 0, 0.0, cfg)
    assert out.value == pytest.approx(sigmoid(0.37), abs=5e-4)
    assert out.value == sigmoid_table(0.37)


def test_fit_blend_separable_scores():
    rng = np.random.default_rng(0)
    n = 400
    y = rng.integers(0, 2, n)
    s_nn = np.where(y == 1, 0.6, -0.6) + rng.normal(0, 0.3, n)
    s_sym = np.where(y == 1, 0.5, 0.1) + rng.normal(0, 0.2, n)
    a, b = fit_blend_coefficients(s_nn, s_sym, y)
    assert a > 0.5
    assert b >= 0.0
    # fitted blend must classify the training data well above chance
    cfg = FusionConfig(alpha=a, beta=b, lambda_h=0)
    scores = np.array([fuse(x, 0, s, cfg).value for x, s in zip(s_nn, s_sym)])
    acc = np.mean((scores > 0.5) == (y == 1))
    assert acc > 0.8
