import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajstack.errors import NumericalRankError, ParameterDomainError
from trajstack.kernels import (
    KernelSpec,
    SpaceTimePoint,
    corr_matrix,
    cross_corr,
    gneiting_st_corr,
    gram,
    matern_corr,
    sqexp_corr,
)
from trajstack._bessel import kv

mpmath = pytest.importorskip("mpmath")


def test_bessel_k_matches_arbitrary_precision_oracle():
    rng = np.random.default_rng(7)
    for nu in [0.0, 1e-7, 0.2, 1 / 3, 0.5, 1.0, 1.5, 2.0, 3.0, 5.5]:
        xs = np.concatenate([10 ** rng.uniform(-8, 2.5, 25), [2.0, 1.999999, 2.000001]])
        got = kv(nu, xs)
        for x, g in zip(xs, got):
            ref = float(mpmath.besselk(nu, x))
            assert g == pytest.approx(ref, rel=5e-13), (nu, x)


def test_matern_at_zero_distance_is_one():
    for phi, nu in [(1.0, 0.5), (0.3, 2.0), (5.0, 1.0)]:
        assert matern_corr(0.0, phi, nu) == 1.0


def test_matern_half_reduces_to_exponential():
    assert matern_corr(1.0, 1.0, 0.5) == pytest.approx(math.exp(-1.0), rel=1e-12)
    d = np.array([0.1, 0.7, 3.0])
    assert matern_corr(d, 2.0, 0.5) == pytest.approx(np.exp(-d / 2.0), rel=1e-12)


def test_matern_nu_one_matches_bessel_oracle():
    # (d/phi) K_1(d/phi) at d=phi=1, value frozen from the mpmath oracle
    assert matern_corr(1.0, 1.0, 1.0) == pytest.approx(0.6019072301972346, rel=1e-12)


def test_matern_rejects_bad_parameters():
    with pytest.raises(ParameterDomainError):
        matern_corr(1.0, -1.0, 1.0)
    with pytest.raises(ParameterDomainError):
        matern_corr(1.0, 1.0, 0.0)
    with pytest.raises(ParameterDomainError):
        matern_corr(-0.5, 1.0, 1.0)
    with pytest.raises(ParameterDomainError):
        matern_corr(np.inf, 1.0, 1.0)


@given(
    nu=st.sampled_from([1 / 3, 0.5, 1.0, 2.0, 3.0]),
    phi=st.floats(0.05, 10.0),
)
@settings(max_examples=25, deadline=None)
def test_matern_nonincreasing_in_distance(nu, phi):
    d = np.linspace(0.0, 12.0, 200)
    vals = matern_corr(d, phi, nu)
    assert (np.diff(vals) <= 1e-12).all()
    assert (vals > 0).all() and (vals <= 1.0).all()


def test_matern_near_zero_distance_continuity():
    # values just above the small-argument switch stay glued to 1
    for nu in [0.3, 0.5, 1.0, 2.5]:
        v = matern_corr(np.array([1e-12, 1e-9, 1e-7]), 1.0, nu)
        assert (v <= 1.0).all() and (v > 0.999).all()


def test_gneiting_zero_separation_is_one():
    p = SpaceTimePoint(2.0, (1.0, -1.0))
    assert gneiting_st_corr(p, p, 0.7, 1.3) == 1.0


def test_gneiting_pure_time_separation():
    p = SpaceTimePoint(0.0, (0.0, 0.0))
    q = SpaceTimePoint(1.0, (0.0, 0.0))
    assert gneiting_st_corr(p, q, 0.5, 1.0) == pytest.approx(1 / 1.5, rel=1e-14)


def test_gneiting_frozen_value():
    # |dt|=1, ds=1, phi1=phi2=1/2, high-precision scalar evaluation
    p = SpaceTimePoint(0.0, (0.0, 0.0))
    q = SpaceTimePoint(1.0, (1.0, 0.0))
    assert gneiting_st_corr(p, q, 0.5, 0.5) == pytest.approx(0.4432091942691893, rel=1e-14)


def test_gneiting_rejects_nonfinite():
    with pytest.raises(ParameterDomainError):
        SpaceTimePoint(np.nan, (0.0, 0.0))
    with pytest.raises(ParameterDomainError):
        gneiting_st_corr((0.0, (np.inf, 0.0)), (1.0, (0.0, 0.0)), 1.0, 1.0)
    with pytest.raises(ParameterDomainError):
        gneiting_st_corr((0.0, (0.0, 0.0)), (1.0, (0.0, 0.0)), -1.0, 1.0)


def test_sqexp_values():
    assert sqexp_corr(3.0, 3.0, 0.8) == 1.0
    assert sqexp_corr(0.0, 1.0, 0.5) == pytest.approx(math.exp(-0.25), rel=1e-14)
    assert sqexp_corr(0.0, 2.0, 1.0) == pytest.approx(math.exp(-4.0), rel=1e-14)


def test_gram_single_point():
    g = gram([SpaceTimePoint(0.0, (0.0, 0.0))], KernelSpec.gneiting(1.0, 1.0))
    assert g.matrix.shape == (1, 1) and g.matrix[0, 0] == 1.0 and g.jitter == 0.0


def test_gram_duplicate_points_without_jitter_raises():
    pts = [SpaceTimePoint(1.0, (0.5, 0.5)), SpaceTimePoint(1.0, (0.5, 0.5))]
    with pytest.raises(NumericalRankError, match="closest points"):
        gram(pts, KernelSpec.gneiting(1.0, 1.0), jitter=False)


def test_gram_duplicate_points_with_jitter_records_ladder_step():
    pts = [(0.5, 0.5), (0.5, 0.5)]
    g = gram(pts, KernelSpec.matern(1.0, 1.0))
    assert g.jitter in (1e-10, 1e-8, 1e-6)
    np.linalg.cholesky(g.matrix)


def test_gram_matches_elementwise_scalar_evaluations():
    rng = np.random.default_rng(3)
    pts = [SpaceTimePoint(t, (x, y)) for t, x, y in rng.normal(size=(3, 3))]
    spec = KernelSpec.gneiting(0.4, 1.1)
    m = corr_matrix(spec, pts)
    for i in range(3):
        for j in range(3):
            assert m[i, j] == pytest.approx(
                gneiting_st_corr(pts[i], pts[j], 0.4, 1.1), abs=1e-15
            )
    locs = rng.normal(size=(3, 2))
    mm = corr_matrix(KernelSpec.matern(0.7, 1.5), locs)
    for i in range(3):
        for j in range(3):
            d = np.linalg.norm(locs[i] - locs[j])
            assert mm[i, j] == pytest.approx(float(matern_corr(d, 0.7, 1.5)), abs=1e-15)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_gram_exact_symmetry_and_unit_diagonal(seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(0, 10, 12), rng.uniform(-5, 5, (12, 2))])
    m = corr_matrix(KernelSpec.gneiting(0.5, 0.5), pts)
    assert (m == m.T).all()
    assert (np.diag(m) == 1.0).all()


def test_gneiting_gram_positive_definite_on_random_configurations():
    rng = np.random.default_rng(11)
    for _ in range(5):
        pts = np.column_stack([rng.uniform(0, 20, 50), rng.uniform(0, 5, (50, 2))])
        m = corr_matrix(KernelSpec.gneiting(0.5, 0.5), pts)
        assert np.linalg.eigvalsh(m).min() >= -1e-8


def test_gram_revisited_location_distinct_times_stays_pd():
    # same place at different times: temporal factor keeps the matrix PD
    pts = [SpaceTimePoint(float(t), (0.0, 0.0)) for t in range(6)]
    g = gram(pts, KernelSpec.gneiting(0.5, 0.5), jitter=False)
    assert g.jitter == 0.0


def test_cross_corr_consistent_with_square():
    rng = np.random.default_rng(5)
    locs = rng.normal(size=(4, 2))
    spec = KernelSpec.matern(1.0, 0.5)
    full = corr_matrix(spec, locs)
    rect = cross_corr(spec, locs[:2], locs)
    assert rect == pytest.approx(full[:2, :], abs=1e-15)
