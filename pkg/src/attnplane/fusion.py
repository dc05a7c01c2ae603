"""Cascade fusion of neural and symbolic evidence.

A hard symbolic hit with the veto enabled forces the score to exactly 1.0;
otherwise the output is sigmoid(alpha * s_nn + beta * s_sym).  The sigmoid can
run either in full precision or through a 256-entry piecewise-linear table,
the kind of lookup a match-action stage could actually hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMOID_EXACT = "exact"
SIGMOID_TABLE256 = "table256"

HARD_VETO = "hard_veto"
SOFT_BLEND = "soft_blend"

_TABLE_LO, _TABLE_HI, _TABLE_N = -8.0, 8.0, 256
_TABLE_X = np.linspace(_TABLE_LO, _TABLE_HI, _TABLE_N)
_TABLE_Y = 1.0 / (1.0 + np.exp(-_TABLE_X))


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_h: int = 1
    sigmoid_mode: str = SIGMOID_EXACT

    def __post_init__(self):
        if self.lambda_h not in (0, 1):
            raise ValueError("lambda_h must be 0 or 1")
        if self.sigmoid_mode not in (SIGMOID_EXACT, SIGMOID_TABLE256):
            raise ValueError(f"unknown sigmoid mode {self.sigmoid_mode!r}")


@dataclass(frozen=True)
class FusedScore:
    value: float
    path: str


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid_table(x: float) -> float:
    """Piecewise-linear interpolation over 256 knots on [-8, 8], clamped outside."""
    return float(np.interp(x, _TABLE_X, _TABLE_Y))


def sigmoid_table_max_error(n_grid: int = 200_001) -> float:
    """Measured worst absolute error of the table mode over a dense grid."""
    xs = np.linspace(_TABLE_LO - 4.0, _TABLE_HI + 4.0, n_grid)
    exact = 1.0 / (1.0 + np.exp(-xs))
    approx = np.interp(xs, _TABLE_X, _TABLE_Y)
    return float(np.max(np.abs(exact - approx)))


def fuse(s_nn: float, i_sym: int, s_sym: float, cfg: FusionConfig) -> FusedScore:
    if i_sym not in (0, 1):
        raise ValueError("i_sym must be 0 or 1")
    if i_sym == 1 and cfg.lambda_h == 1:
        return FusedScore(1.0, HARD_VETO)
    logit = cfg.alpha * s_nn + cfg.beta * s_sym
    fn = sigmoid_table if cfg.sigmoid_mode == SIGMOID_TABLE256 else sigmoid
    return FusedScore(fn(logit), SOFT_BLEND)


def fit_blend_coefficients(s_nn, s_sym, labels, iters: int = 500, step: float = 0.5,
                           nonnegative: bool = True):
    """Fit (alpha, beta) by no-intercept logistic regression on validation scores.

    Plain gradient descent on the binary cross-entropy; with nonnegative=True
    the coefficients are projected onto >= 0 so the blend stays monotone in
    both evidence channels.
    """
    X = np.stack([np.asarray(s_nn, dtype=np.float64),
                  np.asarray(s_sym, dtype=np.float64)], axis=1)
    y = np.asarray(labels, dtype=np.float64)
    w = np.zeros(2)
    n = len(y)
    for t in range(iters):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        grad = X.T @ (p - y) / n
        w -= (step / (1.0 + 0.01 * t)) * grad
        if nonnegative:
            w = np.maximum(w, 0.0)
    return float(w[0]), float(w[1])
