import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ionrelax import lattice as lat

from support import brute_force_triplets, random_lattice


def test_volume_and_reciprocal_cubic():
    L = 2.0 * np.eye(3)
    assert lat.volume(L) == pytest.approx(8.0)
    np.testing.assert_allclose(lat.reciprocal(L), math.pi * np.eye(3))


@pytest.mark.parametrize("bad", [np.zeros((3, 3)), np.diag([1.0, 1.0, -1.0]),
                                 np.array([[1, 0, 0], [2, 0, 0], [0, 0, 1.0]])])
def test_degenerate_cells_rejected(bad):
    with pytest.raises(lat.DegenerateCellError):
        lat.volume(bad)


def test_duality_on_random_cells():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        L = random_lattice(rng, rng.uniform(5, 500), skew=0.4)
        K = lat.reciprocal(L)
        np.testing.assert_allclose(K @ L.T, 2 * math.pi * np.eye(3), atol=1e-10)
        assert lat.volume(L) * abs(np.linalg.det(K)) == pytest.approx((2 * math.pi) ** 3)


def test_alpha_and_derivative():
    a = lat.ewald_alpha(15, 1000.0)
    assert a == pytest.approx(0.27835, abs=1e-5)
    assert lat.ewald_alpha_derivative(15, 1000.0) == pytest.approx(-9.278e-5, rel=1e-3)
    assert lat.ewald_alpha_derivative(15, 1000.0) == pytest.approx(-a / 3000.0)


def test_cutoffs_example():
    a = lat.ewald_alpha(15, 1000.0)
    r_real, r_recip = lat.cutoffs(a, 1e-17)
    assert r_real == pytest.approx(22.477, abs=1e-3)
    assert r_real * r_recip == pytest.approx(-2 * math.log(1e-17))


@pytest.mark.parametrize("acc", [0.0, 1.0, -1e-3, 2.0])
def test_cutoffs_reject_bad_accuracy(acc):
    with pytest.raises(ValueError):
        lat.cutoffs(0.3, acc)


@pytest.mark.parametrize("edge, r_off, count", [(1.0, 1.0, 26), (1.0, 2.0, 124),
                                                 (5.0, 5.0, 26), (5.0, 10.0, 124)])
def test_cubic_spot_checks(edge, r_off, count):
    trip = lat.inflated_cell_truncation(edge * np.eye(3), r_off)
    assert len(trip) == count


def test_short_cutoff_clamps_with_warning():
    with pytest.warns(lat.CutoffWarning):
        t = lat.layer_counts(np.eye(3) * 10.0, 2.0)
    assert t == (1, 1, 1)
    with pytest.raises(ValueError):
        lat.layer_counts(np.eye(3) * 10.0, 2.0, strict=True)


def test_ict_matches_plane_bounds_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        L = random_lattice(rng, rng.uniform(20, 200), skew=0.35)
        r_off = rng.uniform(1.0, 3.0) * np.max(np.linalg.norm(L, axis=1))
        got = {tuple(int(v) for v in n) for n in lat.inflated_cell_truncation(L, r_off)}
        assert got == brute_force_triplets(L, r_off)


def test_triplets_symmetric_and_origin_free():
    L = random_lattice(np.random.default_rng(2), 60.0)
    trip = lat.inflated_cell_truncation(L, 12.0)
    s = {tuple(n) for n in trip}
    assert (0, 0, 0) not in s
    assert all(tuple(-v for v in n) in s for n in s)


@settings(max_examples=50, deadline=None)
@given(r=st.floats(1.0, 6.0), dr=st.floats(0.0, 3.0))
def test_layer_counts_monotone_in_cutoff(r, dr):
    L = np.array([[1.0, 0.1, 0.0], [0.2, 1.1, 0.0], [0.1, -0.2, 0.9]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", lat.CutoffWarning)
        a = lat.layer_counts(L, r)
        b = lat.layer_counts(L, r + dr)
    assert all(x <= y for x, y in zip(a, b))


@pytest.mark.parametrize("scale", [0.5, 2.0, 3.7])
def test_layer_counts_scale_covariant(scale):
    L = random_lattice(np.random.default_rng(3), 50.0)
    assert lat.layer_counts(L, 11.0) == lat.layer_counts(scale * L, 11.0 * scale)


def test_translations_are_lattice_combinations():
    L = random_lattice(np.random.default_rng(4), 40.0)
    trip = np.array([[1, 0, 0], [0, -1, 2]])
    np.testing.assert_allclose(lat.translations(trip, L), [L[0], -L[1] + 2 * L[2]])
