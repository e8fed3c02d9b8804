import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import psi_rate
from fragchoice.cell_pdmp import (
    hitting_time, hitting_times, jump_time_from_clock, marginal_ensemble, occupation_average,
    sample_jump_time, simulate_path, survivor, CellPath,
)
from fragchoice.fixed_point import const_rate, stationary_law, table_rate
from fragchoice.frag_sim import substream
from fragchoice.measures import dist_tv, log_grid

ONE = const_rate(1.0)
ZERO = const_rate(0.0)


def gamma21(x):
    return stats.gamma(2.0).cdf(x)


def test_survivor_examples():
    assert survivor(ONE, 1.0, math.log(2)) == pytest.approx(math.exp(-1), rel=1e-12)
    assert survivor(psi_rate("max:2"), 0.7, 0.0) == 1.0
    np.testing.assert_array_equal(survivor(ZERO, 1.0, [0.0, 1.0, 10.0]), 1.0)


def test_jump_time_examples():
    assert jump_time_from_clock(ONE, 1.0, 1.0) == pytest.approx(math.log(2), rel=1e-12)
    rng = np.random.default_rng(0)
    assert all(math.isinf(sample_jump_time(ZERO, z, rng)) for z in (0.1, 1.0, 5.0))


@given(st.floats(0.1, 5.0), st.floats(1e-3, 2.0), st.floats(1e-4, 20.0))
def test_const_rate_closed_form(c, z, E):
    R = const_rate(c)
    assert jump_time_from_clock(R, z, E) == pytest.approx(math.log1p(E / (c * z)), rel=1e-9, abs=1e-12)


@given(st.sampled_from(["max:2", "min:2", "uniform"]), st.floats(1e-3, 30.0), st.floats(1e-6, 30.0))
def test_inversion_consistency(rule, z, E):
    R = psi_rate(rule)
    tau = jump_time_from_clock(R, z, E)
    assert survivor(R, z, tau) == pytest.approx(math.exp(-E), rel=1e-9)


@given(st.floats(1e-3, 30.0), st.lists(st.floats(0, 5), min_size=2, max_size=20))
def test_survivor_monotone(z, ts):
    R = psi_rate("max:2")
    S = survivor(R, z, np.sort(ts))
    assert np.all(np.diff(S) <= 0) and np.all(S <= 1)


def test_jump_factor_moments():
    rng = np.random.default_rng(1)
    J = np.sqrt(rng.random(1_000_000))
    n = J.size
    assert abs(J.mean() - 2 / 3) <= 3 * math.sqrt(1 / 2 - 4 / 9) / math.sqrt(n)
    assert abs((J**2).mean() - 0.5) <= 3 * math.sqrt(1 / 3 - 1 / 4) / math.sqrt(n)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 5.0))
def test_path_invariants(seed, x0):
    path = simulate_path(psi_rate("max:2"), x0, 20.0, np.random.default_rng(seed))
    tau = path.segment_starts()
    assert np.all(np.diff(tau) > 0)
    assert np.all(path.factors < 1) and np.all(path.values > 0)
    pred = path.values[:-1] * np.exp(np.diff(tau)) * path.factors
    np.testing.assert_allclose(path.values[1:], pred, rtol=1e-12)
    # first segment is the flow x0 e^t
    if path.n_jumps:
        t = 0.5 * path.times[0]
        assert path.value_at(t) == pytest.approx(x0 * math.exp(t))
        # jump decreases, flow increases
        before = path.values[0] * math.exp(path.times[0])
        assert path.values[1] < before


def test_jump_counts_finite():
    ens = marginal_ensemble(ONE, 1.0, 1.0, 100_000, seed=3)
    assert ens.jumps.max() < 1_000_000
    assert ens.n_absorbed == 0 and ens.n_exploded == 0
    # from x0 = 1 the expected count is close to the integral of the rate along the flow, e - 1
    assert 1.0 < ens.jumps.mean() < 2.0


def test_time_zero_returns_start():
    ens = marginal_ensemble(ONE, 2.5, 0.0, 1000, seed=1)
    np.testing.assert_array_equal(ens.samples, 2.5)


@pytest.mark.parametrize("T", [0.5, 1.0, 2.0])
def test_gamma_is_invariant(T):
    ens = marginal_ensemble(ONE, lambda rng, n: rng.gamma(2.0, 1.0, n), T, 100_000, seed=int(10 * T))
    assert stats.kstest(ens.finite_samples(), gamma21).statistic <= 0.01


def test_ergodicity_from_three():
    pi = stationary_law(ONE, log_grid(1e-4, 50, 4096))
    ens = marginal_ensemble(ONE, 3.0, 10.0, 100_000, seed=4)
    assert dist_tv(ens.finite_samples(), pi.cdf) <= 0.05


def test_ensemble_independent_of_threads():
    a = marginal_ensemble(ONE, 1.0, 3.0, 5000, seed=9, block=1024)
    b = marginal_ensemble(ONE, 1.0, 3.0, 5000, seed=9, block=1024, threads=4)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.jumps, b.jumps)


def test_explosion_is_reported():
    g = log_grid(1e-3, 10, 400)
    # rate switched off above x = 1: the integral of R to infinity is finite
    R = table_rate(g, np.where(g <= 1.0, 1.0, 0.0), extrapolate=True)
    assert math.isfinite(R.rho_sup)
    # from 0.5 only rho_sup - rho(0.5) = 0.5 of clock remains, so the first
    # draw explodes with probability e^-1/2; a short horizon sees no other jumps
    M = 20_000
    ens = marginal_ensemble(R, 0.5, 1e-3, M, seed=2)
    p = math.exp(-0.5)
    assert abs(ens.n_exploded / M - p) <= 4 * math.sqrt(p * (1 - p) / M)
    assert np.all(np.isfinite(ens.samples))
    assert marginal_ensemble(R, 0.5, 50.0, 500, seed=2).n_exploded == 500


def test_absorption_is_reported():
    ens = marginal_ensemble(ONE, 1.0, 20.0, 2000, seed=5, x_floor=0.3)
    assert ens.n_absorbed > 0
    assert np.all(np.isnan(ens.samples[ens.absorbed]))
    path = simulate_path(ONE, 1.0, 1e6, np.random.default_rng(0), max_jumps=5)
    assert path.absorbed and path.n_jumps == 5 and path.zeta == path.times[-1]


def test_hitting_first_segment_bound():
    M = 5000
    H, first = hitting_times(ONE, 0.5, 1.0, M, seed=6, T_max=100.0)
    p = math.exp(-0.5)
    assert first.mean() >= p - 3 * math.sqrt(p * (1 - p) / M)
    np.testing.assert_allclose(H[first], math.log(2))
    assert np.all(H[~first] > math.log(2))


def test_hitting_timeouts():
    rng = np.random.default_rng(0)
    # no jumps: the flow leaves the start upward and never returns
    assert hitting_time(ZERO, 1.0, 1.0, rng, 50.0) == (math.inf, False)
    H, _ = hitting_times(ONE, 0.5, 1e6, 50, seed=1, T_max=2.0)
    assert np.all(np.isinf(H))


def test_occupation_examples():
    path = CellPath(1.0, 1.0, np.array([]), np.array([]), np.array([1.0]))
    assert occupation_average(path, math.exp(-5), 10.0) == 1.0
    assert occupation_average(path, 1.0, math.exp(0.5)) == pytest.approx(0.5)


def test_birkhoff_average():
    path = simulate_path(ONE, 1.0, 2000.0, substream(11, 0))
    target, _ = integrate.quad(lambda x: x * math.exp(-x), 0.5, 1.0)
    assert target == pytest.approx(1.5 * math.exp(-0.5) - 2 * math.exp(-1), abs=1e-14)
    assert abs(occupation_average(path, 0.5, 1.0) - target) <= 0.02


@given(st.integers(0, 2**32 - 1))
def test_occupation_matches_fine_sampling(seed):
    path = simulate_path(ONE, 0.8, 5.0, np.random.default_rng(seed))
    t = (np.arange(200_000) + 0.5) / 200_000 * 5.0
    x = path.value_at(t)
    approx = np.mean((x >= 0.5) & (x <= 1.5))
    assert occupation_average(path, 0.5, 1.5) == pytest.approx(approx, abs=1e-3)
