"""Feature maps: determinism, unbiasedness, clipping, sample-size rule."""

import math

import numpy as np
import pytest

from attnplane.features import (
    CLIPPED_PRF,
    PRF,
    RFF,
    BoundedInputSpec,
    FeatureMap,
    InvalidBoundError,
    InvalidDimensionError,
    build_feature_map,
    input_norm_bound,
    kernel_estimate,
    kernel_exact,
    normalize_rows,
    required_m,
)


def test_same_seed_identical_omega():
    a = build_feature_map(PRF, 64, 4, seed=123)
    b = build_feature_map(PRF, 64, 4, seed=123)
    assert np.array_equal(a.omega, b.omega)
    c = build_feature_map(PRF, 64, 4, seed=124)
    assert not np.array_equal(a.omega, c.omega)


def test_zero_vector_estimator_is_exact():
    fm = build_feature_map(PRF, 32, 3, seed=5)
    z = np.zeros(3)
    phi = fm.phi(z)
    assert np.allclose(phi * phi, 1.0 / 32)
    assert kernel_estimate(fm, z, z) == pytest.approx(1.0)
    assert kernel_exact(z, z, 3) == 1.0


def test_invalid_dimensions():
    with pytest.raises(InvalidDimensionError):
        build_feature_map(PRF, 0, 4, seed=1)
    with pytest.raises(InvalidDimensionError):
        build_feature_map(PRF, 16, 0, seed=1)
    with pytest.raises(InvalidDimensionError):
        build_feature_map(RFF, 15, 4, seed=1)  # odd m has no cos/sin pairing


def test_clipped_requires_bound():
    with pytest.raises(ValueError):
        build_feature_map(CLIPPED_PRF, 16, 4, seed=1)


def test_kernel_exact_closed_forms():
    q = np.array([1.0, 0.0])
    k = np.array([0.0, 1.0])
    assert kernel_exact(q, k, 2) == 1.0  # orthogonal -> exp(0)
    # q = k with |q|^2 = sqrt(d) -> e
    d = 4
    q = np.full(d, math.sqrt(math.sqrt(d) / d))
    assert np.dot(q, q) == pytest.approx(math.sqrt(d))
    assert kernel_exact(q, q, d) == pytest.approx(math.e)
    # d=4, q.k = -2 -> exp(-1)
    q = np.array([1.0, 1.0, 0.0, 0.0])
    k = np.array([-1.0, -1.0, 0.0, 0.0])
    assert kernel_exact(q, k, 4) == pytest.approx(math.exp(-1.0))


def test_prf_monte_carlo_mean_matches_kernel():
    # mean over independent seeds approaches the closed-form kernel (d=2, unit inputs)
    rng = np.random.default_rng(7)
    q = rng.standard_normal(2)
    q /= np.linalg.norm(q)
    k = rng.standard_normal(2)
    k /= np.linalg.norm(k)
    exact = kernel_exact(q, k, 2)
    est = np.mean([
        kernel_estimate(build_feature_map(PRF, 4096, 2, seed=7000 + s), q, k)
        for s in range(200)
    ])
    assert abs(est - exact) / exact < 0.02


def test_rff_monte_carlo_mean_matches_kernel():
    rng = np.random.default_rng(11)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    k = rng.standard_normal(4)
    k /= np.linalg.norm(k)
    exact = kernel_exact(q, k, 4)
    est = np.mean([
        kernel_estimate(build_feature_map(RFF, 2048, 4, seed=400 + s), q, k)
        for s in range(200)
    ])
    assert abs(est - exact) / exact < 0.03


def test_prf_unbiasedness_statistical():
    # S=500 maps at m=1024: relative error of the seed-mean under 3%
    for d in (2, 8):
        rng = np.random.default_rng(100 + d)
        q = rng.standard_normal(d)
        q /= np.linalg.norm(q)
        k = rng.standard_normal(d)
        k /= np.linalg.norm(k)
        exact = kernel_exact(q, k, d)
        est = np.mean([
            kernel_estimate(build_feature_map(PRF, 1024, d, seed=9000 + s), q, k)
            for s in range(500)
        ])
        assert abs(est - exact) / exact < 0.03


def test_single_coordinate_estimate():
    fm = build_feature_map(PRF, 1, 2, seed=3)
    q = np.array([0.1, 0.2])
    k = np.array([0.3, -0.1])
    assert kernel_estimate(fm, q, k) == pytest.approx(float(fm.phi(q)[0] * fm.phi(k)[0]))


def test_clipped_products_and_norm_bound():
    C = 1.0
    fm = build_feature_map(CLIPPED_PRF, 128, 4, seed=21, clip_bound=C)
    R = input_norm_bound(4)
    rng = np.random.default_rng(0)
    X = normalize_rows(rng.standard_normal((50, 4)) * 2.0, R)
    P = fm.phi_batch(X)
    # every per-coordinate product bounded by C/m, so |phi| <= sqrt(C)
    assert np.max(P) <= math.sqrt(C / 128) + 1e-15
    prods = P[:25, :] * P[25:, :]
    assert np.max(np.abs(prods)) <= C / 128 + 1e-15
    assert np.all(np.linalg.norm(P, axis=1) <= fm.feature_norm_bound() + 1e-12)
    assert fm.clip_rate(X) > 0.0


def test_required_m_rejects_eps_at_c():
    with pytest.raises(InvalidBoundError):
        required_m(1.0, 1.0, 100, 0.05)


def test_required_m_example():
    # ceil(200 * ln(4000)) computed with 50-digit arithmetic = 1659
    assert required_m(1.0, 0.1, 100, 0.05) == 1659


def test_required_m_monotone_in_n():
    prev = 0
    for n in (1, 10, 100, 1000, 10_000):
        cur = required_m(1.0, 0.1, n, 0.05)
        assert cur >= prev
        prev = cur


def test_bounded_input_spec_validation():
    BoundedInputSpec(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        BoundedInputSpec(0.0, 1.0, 1.0)


def test_normalize_rows():
    X = np.array([[3.0, 4.0], [0.1, 0.0], [0.0, 0.0]])
    out = normalize_rows(X, 1.0)
    assert np.linalg.norm(out[0]) == pytest.approx(1.0)
    assert np.array_equal(out[1], X[1])  # already inside the ball: untouched
    assert np.array_equal(out[2], X[2])


def test_feature_map_serialization_roundtrip(tmp_path):
    fm = build_feature_map(CLIPPED_PRF, 64, 4, seed=99, clip_bound=2.0)
    path = tmp_path / "fm.json"
    fm.save(path)
    back = FeatureMap.load(path)
    assert back.kind == fm.kind and back.m == fm.m and back.d == fm.d
    assert back.seed == fm.seed and back.clip_bound == fm.clip_bound
    assert np.array_equal(back.omega, fm.omega)
