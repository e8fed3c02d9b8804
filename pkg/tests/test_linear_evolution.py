import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import psi_rate, solved
from fragchoice import linear_evolution as lin
from fragchoice.cell_pdmp import marginal_ensemble
from fragchoice.fixed_point import const_rate, stationary_law
from fragchoice.measures import GridCDF, StepCDF, dist_tv, log_grid, write_cdf_csv
from fragchoice.rules import make_rule

GRID = log_grid(1e-4, 50, 4096)
ONE = const_rate(1.0)
ZERO = const_rate(0.0)
PI1 = stationary_law(ONE, GRID)


def gamma21():
    return lin.gamma_cdf(2.0, 1.0, GRID)


# ---------------------------------------------------------------------------
# evolve_R


@pytest.mark.parametrize("dt", [None, 1e-3])
def test_zero_rate_is_transport(dt):
    F0 = lin.gamma_cdf(2.0, 2.0, GRID)
    T = 1.0 if dt else 400 * lin.log_spacing(GRID)
    tr = lin.evolve_R(ZERO, F0, T, dt)
    t = tr.final.t
    exact = stats.gamma(2.0, scale=0.5).cdf(GRID * math.exp(-t))
    assert np.max(np.abs(tr.final.F.values - exact)) <= 1e-6 * max(t, 1.0)
    assert tr.exact_shift == (dt is None)


@pytest.mark.parametrize("dt", [1e-3, 5e-4])
def test_stationary_within_five_dt(dt):
    F0 = gamma21()
    tr = lin.evolve_R(ONE, F0, 1.0, dt, record_every=50)
    worst = max(np.max(np.abs(s.F.values - F0.values)) for s in tr.states)
    assert worst <= 5 * dt


def test_first_order_in_dt():
    F0 = gamma21()
    d = [np.max(np.abs(lin.evolve_R(ONE, F0, 1.0, dt, record_every=10**6).final.F.values - F0.values))
         for dt in (1e-3, 5e-4)]
    assert 0.4 <= d[1] / d[0] <= 0.6


def test_converges_to_pi():
    h = lin.log_spacing(GRID)
    n = math.ceil(12.0 / h)
    tr = lin.evolve_R(ONE, lin.gamma_cdf(2.0, 2.0, GRID), n * h, None, record_every=10**6)
    assert tr.final.t >= 12.0
    assert lin.tv_to(tr.final, PI1) <= 0.01


def test_projection_and_mass_diagnostics():
    F0 = lin.gamma_cdf(2.0, 2.0, GRID)
    dt = 1e-3
    tr = lin.evolve_R(ONE, F0, 10.0, dt, record_every=100)
    assert tr.projected <= 1e-6 * 10.0
    for s in tr.states:
        assert abs(s.F.values[-1] - 1.0) <= F0.tail_mass + 5 * dt
        assert np.all(np.diff(s.F.values) >= 0) and s.F.values[0] >= 0


def test_mass_drift_aborts():
    small = log_grid(1e-4, 5, 2048)
    with pytest.raises(lin.MassDriftError):
        lin.evolve_R(ZERO, lin.gamma_cdf(2.0, 1.0, small), 2.0, 1e-3)


def test_step_argument_checks():
    F0 = gamma21()
    with pytest.raises(ValueError):
        lin.evolve_R(ONE, F0, 1.0, 0.02)
    with pytest.raises(ValueError):
        lin.evolve_R(ONE, F0, 1.00005, 1e-3)
    with pytest.raises(ValueError):
        lin.evolve_R(ONE, GridCDF(np.array([0.1, 0.2, 0.5]), np.array([0.0, 0.5, 1.0])), 0.01, 0.01)


def test_time_zero_is_identity():
    F0 = gamma21()
    tr = lin.evolve_R(ONE, F0, 0.0, 1e-3)
    assert len(tr.states) == 1 and tr.final.F is F0


def test_agrees_with_pdmp():
    F0 = lin.gamma_cdf(2.0, 2.0, GRID)
    tr = lin.evolve_R(ONE, F0, 2.0, 1e-3, record_every=10**6)
    ens = marginal_ensemble(ONE, lambda rng, n: rng.gamma(2.0, 0.5, n), 2.0, 100_000, seed=14)
    assert dist_tv(ens.finite_samples(), tr.final.F) <= 0.03


def test_parse_init(tmp_path):
    F = lin.parse_init("gamma:2:2", GRID)
    assert F(1.0) == pytest.approx(1 - 3 * math.exp(-2))
    write_cdf_csv(tmp_path / "F0.csv", GRID, F.values)
    back = lin.parse_init(f"table:{tmp_path / 'F0.csv'}", GRID)
    np.testing.assert_allclose(back.values, F.values, atol=1e-15)
    for bad in ("gamma:2", "gamma:-1:2", "normal:0:1"):
        with pytest.raises(ValueError):
            lin.parse_init(bad, GRID)


# ---------------------------------------------------------------------------
# evolve_C


def remark_drive():
    return StepCDF.from_atoms([1 / 3, 2 / 3], [0.5, 0.5])


def test_atomic_gain_uses_jump_ratios():
    drive, rule = remark_drive(), make_rule("max", k=2)
    y = np.array([0.1, 0.2, 0.4, 0.6, 0.7])
    rn = lin.atomic_gain(drive, rule, drive, y, "rn")
    naive = lin.atomic_gain(drive, rule, drive, y, "naive")
    # sum over atoms z > y of w(z) * mass / z
    np.testing.assert_allclose(rn, [1.875, 1.875, 1.125, 1.125, 0.0])
    np.testing.assert_allclose(naive, [3.0, 3.0, 1.5, 1.5, 0.0])


def test_evolve_C_single_atomic_step():
    drive, rule = remark_drive(), make_rule("max", k=2)
    dt = 1e-3
    tr = lin.evolve_C(drive, rule, drive, dt, grid=GRID)
    naive = lin.evolve_C(drive, rule, drive, dt, grid=GRID, weights="naive")
    y = GRID * math.exp(-dt)
    diff = tr.final.F.values - naive.final.F.values
    expect = np.where(y < 1 / 3, -1.125, np.where(y < 2 / 3, -0.375, 0.0)) * dt * y * y
    np.testing.assert_allclose(diff, expect, atol=1e-15)
    with pytest.raises(ValueError):
        lin.evolve_C(drive, rule, drive, 2 * dt, dt, grid=GRID)


def test_evolve_C_uniform_self_term():
    drive = remark_drive()
    y = np.array([0.2, 0.5])
    gain = lin.atomic_gain(drive, make_rule("uniform"), drive, y)
    # int_{(y, inf)} z^-1 dF
    np.testing.assert_allclose(gain, [0.5 * 3 + 0.5 * 1.5, 0.5 * 1.5])


def test_evolve_C_support_violation():
    G0 = StepCDF.from_atoms([0.5], [1.0])
    with pytest.raises(lin.SupportError):
        lin.evolve_C(remark_drive(), make_rule("uniform"), G0, 1e-3, grid=GRID)


def test_evolve_C_reduces_to_evolve_R():
    rule, F = solved("max:2")
    G0 = lin.gamma_cdf(2.0, 2.0, F.grid)
    a = lin.evolve_C(F, rule, G0, 0.5, 1e-3, record_every=10**6)
    b = lin.evolve_R(psi_rate("max:2"), G0, 0.5, 1e-3, record_every=10**6)
    assert np.max(np.abs(a.final.F.values - b.final.F.values)) <= 1e-8


# ---------------------------------------------------------------------------
# generator pieces


def test_L_is_B_plus_K():
    rng = np.random.default_rng(3)
    for R in (ONE, psi_rate("max:2")):
        f = lin.random_bumps(GRID, rng)
        L, B, K = lin.apply_L(R, f), lin.apply_B(R, f), lin.apply_K(R, f)
        assert np.max(np.abs(L - (B + K))) <= 1e-12 * max(1.0, np.max(np.abs(L)))


def test_zero_rate_generator():
    f = lin.bump(GRID, 1.0, 0.8)
    np.testing.assert_array_equal(lin.apply_K(ZERO, f), 0.0)
    np.testing.assert_allclose(lin.apply_L(ZERO, f), GRID * f.deriv, atol=1e-15)


def test_bump_derivative():
    f = lin.bump(GRID, 2.0, 0.5)
    eps = 1e-6 * GRID
    fd = (f(GRID + eps) - f(GRID - eps)) / (2 * eps)
    assert np.max(np.abs(fd - f.deriv)) <= 1e-7 * np.max(np.abs(f.deriv))


def test_K_on_truncated_linear():
    # f(u) = u on [0.5, 4] with linear ramps to zero at 0.1 and 10
    g = GRID
    knots = [g[np.searchsorted(g, v)] for v in (0.1, 0.5, 4.0, 10.0)]
    f = lin.piecewise_linear(g, knots, [0.0, knots[1], knots[2], 0.0])
    K = lin.apply_K(ONE, f)
    for x in (0.3, 1.0, 2.0, 3.0, 8.0):
        i = int(np.searchsorted(g, x))
        xi = g[i]
        inner, _ = integrate.quad(lambda u: u * float(f(u)), 0, xi, points=knots, limit=200)
        assert K[i] == pytest.approx(xi * 2 * inner / xi**2, rel=1e-10)
    # on the linear stretch the bracket is the formal -x/3 plus the ramp correction
    i = int(np.searchsorted(g, 2.0))
    x = g[i]
    ramp, _ = integrate.quad(lambda u: u * float(f(u)), knots[0], knots[1])
    bracket = K[i] / x - f.values[i]
    formal = -x / 3 + 2 * (ramp - knots[1] ** 3 / 3) / x**2
    assert bracket == pytest.approx(formal, rel=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_K_positive(seed):
    f = lin.random_piecewise_linear(GRID, np.random.default_rng(seed), signed=False)
    assert np.all(lin.apply_K(psi_rate("max:2"), f) >= 0)


def test_K_bound():
    rng = np.random.default_rng(12)
    for R in (ONE, psi_rate("max:2")):
        pi = stationary_law(R, GRID)
        for _ in range(20):
            f = lin.random_piecewise_linear(GRID, rng)
            assert lin.norm_L1(pi, lin.apply_K(R, f)) <= 2 * lin.norm_L1(pi, f) * (1 + 1e-9)


def test_K_bound_is_equality_for_positive_f():
    # for f >= 0 the bound holds with equality, a sharp check of the quadrature
    f = lin.random_piecewise_linear(GRID, np.random.default_rng(1), signed=False)
    ratio = lin.norm_L1(PI1, lin.apply_K(ONE, f)) / lin.norm_L1(PI1, f)
    assert ratio == pytest.approx(2.0, abs=1e-3)


def test_resolvent_bound():
    rng = np.random.default_rng(21)
    for R in (ONE, psi_rate("max:2")):
        pi = stationary_law(R, GRID)
        for lam in (0.5, 1.0, 4.0):
            for _ in range(7):
                g = lin.random_piecewise_linear(GRID, rng)
                f = lin.resolvent_B(R, pi, g, lam)
                assert lin.norm_L1(pi, f) <= lin.norm_L1(pi, g) / (2 + lam) * (1 + 1e-9)


def test_resolvent_residual():
    rng = np.random.default_rng(22)
    for R in (ONE, psi_rate("max:2")):
        pi = stationary_law(R, GRID)
        for lam in (0.5, 2.0):
            g = lin.random_bumps(GRID, rng)
            f = lin.resolvent_B(R, pi, g, lam)
            assert lin.resolvent_residual(R, pi, f, g, lam) <= 1e-3 * lin.norm_L1(pi, g)


def test_resolvent_zero_and_values_path():
    np.testing.assert_array_equal(lin.resolvent_B(ONE, PI1, np.zeros(GRID.size), 1.0), 0.0)
    g = lin.bump(GRID, 1.0, 0.7)
    a = lin.resolvent_B(ONE, PI1, g, 1.0)
    b = lin.resolvent_B(ONE, PI1, g.values, 1.0)
    assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(a))
    with pytest.raises(ValueError):
        lin.resolvent_B(ONE, PI1, g, 0.0)


def test_support_checked():
    f = lin.TestFunction(GRID, np.ones(GRID.size))
    with pytest.raises(lin.SupportError):
        lin.apply_B(ONE, f)


# ---------------------------------------------------------------------------
# weak form


def test_weak_form_stationary():
    dt = 1e-3
    f = lin.bump(GRID, 1.5, 0.8)
    tr = lin.evolve_R(ONE, gamma21(), 1.0, dt)
    assert lin.weak_form_residual(ONE, tr, f, PI1) <= 5 * dt


def test_weak_form_transport():
    dt = 1e-3
    f = lin.bump(GRID, 0.5, 0.6)
    tr = lin.evolve_R(ZERO, lin.gamma_cdf(2.0, 2.0, GRID), 1.0, dt)
    scale = lin.norm_L1(PI1, lin.apply_L(ZERO, f))
    assert lin.weak_form_residual(ZERO, tr, f) <= 5 * dt * scale


def test_weak_form_halves_with_dt():
    f = lin.bump(GRID, 1.0, 0.8)
    F0 = lin.gamma_cdf(2.0, 2.0, GRID)
    r = [lin.weak_form_residual(ONE, lin.evolve_R(ONE, F0, 1.0, dt), f) for dt in (2e-3, 1e-3)]
    assert r[1] <= 0.6 * r[0]


def test_weak_form_at_time_zero():
    tr = lin.evolve_R(ONE, gamma21(), 0.0, 1e-3)
    assert lin.weak_form_residual(ONE, tr, lin.bump(GRID, 1.0, 0.5)) == 0.0
