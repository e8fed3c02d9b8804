import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fragchoice.measures import (
    GridCDF, StepCDF, candy_norm, dist_L1loc, dist_tv, log_grid, read_cdf_csv,
    right_cont_inverse, rn_derivative_psi, size_biased_cdf, write_cdf_csv,
)
from fragchoice.rules import make_rule

lengths_st = arrays(float, st.integers(1, 30), elements=st.floats(1e-3, 1.0))


def test_size_biased_examples():
    F = size_biased_cdf([0.5, 0.3, 0.2])
    np.testing.assert_allclose(F([0.2, 0.3, 0.5]), [0.2, 0.5, 1.0])
    F1 = size_biased_cdf([1.0])
    assert F1.x.tolist() == [1.0] and F1(1.0) == 1.0
    F2 = size_biased_cdf([0.25, 0.25, 0.5])
    assert F2.x.tolist() == [0.25, 0.5] and F2.m.tolist() == [0.5, 0.5]


def test_size_biased_rejects_nonpositive():
    with pytest.raises(ValueError):
        size_biased_cdf([0.5, 0.0])


def test_inverse_examples():
    F = size_biased_cdf([0.5, 0.3, 0.2])
    assert right_cont_inverse(F, 0.5) == 0.5
    assert right_cont_inverse(F, 0.1) == 0.2
    assert right_cont_inverse(F, 0.99) == 0.5
    for p in (0.0, 1.5):
        with pytest.raises(ValueError):
            right_cont_inverse(F, p)


def test_rn_derivative_examples():
    F = StepCDF.from_atoms([1 / 3, 2 / 3], [0.5, 0.5])
    sq = make_rule("max", k=2)
    np.testing.assert_allclose(rn_derivative_psi(F, sq), [0.5, 1.5])
    # the naive density evaluation would give different numbers
    np.testing.assert_allclose(sq.psi(F(F.x)), [1.0, 2.0])
    np.testing.assert_allclose(rn_derivative_psi(F, make_rule("uniform")), [1.0, 1.0])
    unit = StepCDF.from_atoms([1.0], [1.0])
    assert rn_derivative_psi(unit, sq)[0] == pytest.approx(1.0)


@given(lengths_st)
def test_rn_derivative_telescopes(lengths):
    F = size_biased_cdf(lengths / lengths.sum())
    rule = make_rule("min", k=3)
    rn = rn_derivative_psi(F, rule)
    cum = np.concatenate(([0.0], np.cumsum(rn * F.m)))
    hi = np.clip(F.cum, 0, 1)
    np.testing.assert_allclose(cum[1:], rule.Psi(hi), atol=1e-12)


def test_candy_examples():
    assert candy_norm(StepCDF.from_atoms([1 / 3, 2 / 3], [0.5, 0.5])) == pytest.approx(2.25)
    assert candy_norm(StepCDF.from_atoms([1.0], [1.0])) == 1.0
    g = log_grid(1e-4, 50, 4096)
    G = GridCDF.from_function(lambda x: 1 - (1 + x) * np.exp(-x), g)
    assert candy_norm(G) == pytest.approx(1.0, abs=1e-4)


def test_candy_counts_intervals():
    assert candy_norm(size_biased_cdf([0.5, 0.3, 0.2])) == pytest.approx(3.0)


@given(lengths_st)
def test_candy_is_interval_count(lengths):
    F = size_biased_cdf(lengths / lengths.sum())
    # equal lengths merge but each still contributes 1
    assert candy_norm(F) == pytest.approx(lengths.size, rel=1e-9)


@given(lengths_st, st.floats(0.01, 1.0))
def test_inverse_galois(lengths, p_frac):
    F = size_biased_cdf(lengths)
    p = p_frac * F.total_mass
    x = right_cont_inverse(F, p)
    if p < F.total_mass * (1 - 1e-12):
        assert F(x) > p or math.isclose(F(x), p, rel_tol=1e-12)
    assert np.all(F(F.x[F.x < x]) <= p + 1e-12)


def test_L1loc_examples():
    F = StepCDF.from_atoms([1.0], [1.0])
    G = StepCDF.from_atoms([2.0], [1.0])
    assert dist_L1loc(F, F) == 0.0
    ks = np.arange(1, 41)
    oracle = np.sum(np.minimum(2.0**-ks, np.minimum(ks, 2) - np.minimum(ks, 1)))
    assert dist_L1loc(F, G) == pytest.approx(oracle, abs=1e-15)


@given(lengths_st, lengths_st)
def test_L1loc_symmetric(a, b):
    F, G = size_biased_cdf(a / a.sum() * 3), size_biased_cdf(b)
    assert dist_L1loc(F, G) == pytest.approx(dist_L1loc(G, F), abs=1e-14)
    assert dist_L1loc(F, G) >= 0


def test_L1loc_grid_exact_for_linear():
    g = np.array([0.5, 1.0, 3.0, 50.0])
    F = GridCDF(g, np.array([0.0, 0.5, 1.0, 1.0]))
    G = GridCDF(g, np.zeros(4) + 0.0)
    # |F - G| = F: below 0.5 the grid model is F(0.5)(x/0.5)^2 = 0
    ks = np.arange(1, 41, dtype=float)
    integ = np.where(ks >= 3, 0.125 + 0.75 + (ks - 3), np.where(ks >= 1, 0.125 + 0.375 * (ks - 1) + 0.0625 * (ks - 1) ** 2, 0))
    oracle = np.sum(np.minimum(2.0**-ks, integ))
    assert dist_L1loc(F, G) == pytest.approx(oracle, abs=1e-12)


def test_tv_examples(rng):
    g = log_grid(1e-4, 50, 4096)
    gam = GridCDF.from_function(lambda x: 1 - (1 + x) * np.exp(-x), g)
    assert dist_tv(gam, gam) == 0.0
    samples = rng.gamma(2.0, 1.0, 100_000)
    assert dist_tv(samples, gam) <= 0.02
    lo = GridCDF.from_function(lambda x: np.clip((x - 0.1) / 0.1, 0, 1), log_grid(1e-3, 100, 20_000))
    hi = GridCDF.from_function(lambda x: np.clip((x - 10) / 10, 0, 1), log_grid(1e-3, 100, 20_000))
    assert dist_tv(lo, hi) == pytest.approx(1.0, abs=2e-3)


def test_tv_sample_errors():
    g = GridCDF.from_function(lambda x: 1 - np.exp(-x), log_grid())
    with pytest.raises(ValueError):
        dist_tv(np.array([]), g)
    with pytest.raises(ValueError):
        dist_tv(np.ones(10), g)


def test_gridcdf_validation():
    with pytest.raises(ValueError):
        GridCDF(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        GridCDF(np.array([1.0, 0.5]), np.array([0.0, 1.0]))


def test_csv_round_trip(tmp_path):
    g = log_grid(1e-3, 10, 64)
    F = 1 - np.exp(-g)
    write_cdf_csv(tmp_path / "F.csv", g, F)
    back = read_cdf_csv(tmp_path / "F.csv")
    np.testing.assert_array_equal(back.grid, g)
    np.testing.assert_array_equal(back.values, F)
    assert open(tmp_path / "F.csv").readline().strip() == "x,F"
