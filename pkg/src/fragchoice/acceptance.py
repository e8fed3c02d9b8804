"""The acceptance suite, shared by ``fragchoice verify`` and the pytest run.

Each criterion is a function returning an :class:`Outcome`.  Criteria
tagged ``fast`` run in ``verify fast``; ``verify full`` runs everything,
including the 10^6-step fragmentation runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import cell_pdmp, frag_sim, linear_evolution as lin
from .fixed_point import (
    const_rate, rate_from_solution, residual_fixed_point, solve_FPsi, stationary_law, tail_fit,
)
from .measures import GridCDF, StepCDF, candy_norm, dist_L1loc, dist_tv, ks_distance, log_grid, rn_derivative_psi
from .rules import make_rule, parse_rule

LIGHT = log_grid(1e-4, 50.0, 4096)
EQUI_RULES = ("uniform", "max:2", "max:3", "min:2")
EQUI_ALPHAS = (0.1, 0.25, 0.5, 0.75, 0.9)
EQUI_SEEDS = range(5)
EQUI_STEPS = 1_000_000


@dataclass
class Outcome:
    passed: bool
    summary: str


@dataclass(frozen=True)
class Criterion:
    number: int
    name: str
    func: object
    fast: bool = True

    def run(self):
        t0 = time.perf_counter()
        out = self.func()
        return out, time.perf_counter() - t0


def uniform_closed_form(x):
    return 1.0 - (1.0 + x) * np.exp(-x)


def _pi_const1():
    return stationary_law(const_rate(1.0))


# ---------------------------------------------------------------------------
# fixed point


def c01_closed_form():
    t0 = time.perf_counter()
    F = solve_FPsi(make_rule("uniform"), LIGHT)
    dt = time.perf_counter() - t0
    err = float(np.max(np.abs(F.values - uniform_closed_form(LIGHT))))
    return Outcome(err <= 1e-5 and dt < 5.0, f"sup error {err:.2e} (<= 1e-5), runtime {dt:.2f} s (< 5 s)")


def c02_norm_identity():
    devs = {r: abs(candy_norm(solve_FPsi(parse_rule(r))) - 1.0) for r in ("uniform", "max:2", "max:3", "min:2")}
    worst = max(devs.values())
    detail = ", ".join(f"{r} {d:.1e}" for r, d in devs.items())
    return Outcome(worst <= 1e-4, f"|candy - 1|: {detail} (<= 1e-4)")


def c03_residual():
    parts, ok = [], True
    for r in ("uniform", "max:2", "max:3", "min:2", "min:3"):
        rule = parse_rule(r)
        lo, hi = (1e-4, 1e6) if rule.psi_survival(0.0) == 0.0 else (1e-4, 50.0)
        coarse = residual_fixed_point(solve_FPsi(rule, log_grid(lo, hi, 4096)), rule)
        fine = residual_fixed_point(solve_FPsi(rule, log_grid(lo, hi, 8191)), rule)
        ok &= coarse <= 5e-3 and fine <= 0.5 * coarse
        parts.append(f"{r} {coarse:.1e}->{fine:.1e}")
    return Outcome(ok, "residual 4096->8191 nodes: " + ", ".join(parts) + " (<= 5e-3, halving)")


def c04_tails():
    k = tail_fit(solve_FPsi(make_rule("max", k=2)), "exp-linear").rate
    p = tail_fit(solve_FPsi(make_rule("min", k=3)), "power").rate
    ok = 1.9 <= k <= 2.1 and 0.45 <= p <= 0.55
    return Outcome(ok, f"max-2 rate {k:.4f} in [1.9, 2.1], min-3 exponent {p:.4f} in [0.45, 0.55]")


# ---------------------------------------------------------------------------
# fragmentation


@lru_cache(maxsize=None)
def frag_result(rule_text, seed, n_steps=EQUI_STEPS):
    """Final fractions and rescaled size-biased law of one run (cached)."""
    cfg = frag_sim.init_config(alphas=EQUI_ALPHAS)
    stats_ = frag_sim.run(cfg, parse_rule(rule_text), n_steps, frag_sim.substream(seed, 0))
    return stats_.final_fractions, stats_.snapshots[-1].cdf


def c05_equidistribution():
    lines, ok = [], True
    for r in EQUI_RULES:
        devs = [np.max(np.abs(frag_result(r, s)[0] - np.array(EQUI_ALPHAS))) for s in EQUI_SEEDS]
        ok &= max(devs) <= 0.01
        lines.append(f"{r} max {max(devs):.4f}")
    return Outcome(ok, "max |N^a/n - a| over alphas and 5 seeds: " + ", ".join(lines) + " (<= 0.01)")


def c06_size_biased():
    A = frag_result("max:2", 0)[1]
    d_max = dist_L1loc(A, solve_FPsi(make_rule("max", k=2)))
    Au = frag_result("uniform", 0)[1]
    d_uni = dist_L1loc(Au, GridCDF(LIGHT, uniform_closed_form(LIGHT)))
    ok = d_max <= 0.02 and d_uni <= 0.02
    return Outcome(ok, f"d_L1loc max-2 {d_max:.4f}, uniform {d_uni:.4f} (<= 0.02)")


def c07_martingale():
    rule = make_rule("max", k=2)
    xs, alphas = (0.1, 0.3), (0.3, 1.0)
    # alpha = 0.3 on a cut point: no interval ever straddles it
    aligned = frag_sim.martingale_experiment(rule, (0.3, 0.75), 100, 10_000, xs, alphas, seed=1)
    generic = frag_sim.martingale_experiment(rule, (0.2, 0.5), 100, 10_000, xs, alphas, seed=2,
                                             exact_straddler=True)
    za, zg = aligned.max_abs_z(), generic.max_abs_z()
    ok = aligned.passes(4.0) and generic.passes(4.0)
    return Outcome(ok, f"max |z| aligned start {za:.2f}, generic start with exact straddler {zg:.2f} "
                       "(M = 1e4, 4 sigma)")


# ---------------------------------------------------------------------------
# cell process


def c08_invariance():
    R, pi = const_rate(1.0), _pi_const1()
    ks = {}
    for i, T in enumerate((0.5, 1.0, 2.0)):
        ens = cell_pdmp.marginal_ensemble(R, lambda rng, n: rng.gamma(2.0, 1.0, n), T, 100_000, seed=80 + i)
        ks[T] = ks_distance(ens.finite_samples(), pi.cdf)
    worst = max(ks.values())
    return Outcome(worst <= 0.01, "KS " + ", ".join(f"T={T:g} {v:.4f}" for v, T in zip(ks.values(), ks)) + " (<= 0.01)")


def c09_stationary_identity():
    vals = {}
    for name, R in (("const:1", const_rate(1.0)),
                    ("psi:max:2", rate_from_solution(make_rule("max", k=2), solve_FPsi(make_rule("max", k=2))))):
        pi = stationary_law(R)
        vals[name] = pi.expect(pi.grid * R(pi.grid))
    ok = all(abs(v - 2.0) <= 1e-3 for v in vals.values())
    return Outcome(ok, "int x R dpi: " + ", ".join(f"{k} {v:.6f}" for k, v in vals.items()) + " (2 +- 1e-3)")


def tv_with_sigma(samples, ref, rng, boot=50):
    """Binned TV and its bootstrap standard deviation."""
    tv = dist_tv(samples, ref)
    reps = [dist_tv(rng.choice(samples, samples.size), ref) for _ in range(boot)]
    return tv, float(np.std(reps, ddof=1))


def ergodicity_trace(R, pi, x0, times, M, seed):
    rng = frag_sim.substream(seed, 1 << 20)
    out = []
    for T in times:
        ens = cell_pdmp.marginal_ensemble(R, x0, T, M, seed)
        out.append(tv_with_sigma(ens.finite_samples(), pi.cdf, rng))
    return out


def monotone_within(trace, sigmas=2.0):
    return all(b[0] <= a[0] + sigmas * math.hypot(a[1], b[1]) for a, b in zip(trace, trace[1:]))


def c10_ergodicity():
    R, pi = const_rate(1.0), _pi_const1()
    ok, parts = True, []
    for i, x0 in enumerate((0.1, 1.0, 3.0)):
        trace = ergodicity_trace(R, pi, x0, (1.0, 2.0, 5.0, 10.0), 100_000, seed=100 + i)
        ok &= trace[-1][0] <= 0.05 and monotone_within(trace)
        parts.append(f"x0={x0:g}: " + "/".join(f"{tv:.3f}" for tv, _ in trace))
    return Outcome(ok, "TV at T=1/2/5/10 " + "; ".join(parts) + " (final <= 0.05, monotone up to 2 sigma)")


def c11_birkhoff():
    R, pi = const_rate(1.0), _pi_const1()
    path = cell_pdmp.simulate_path(R, 1.0, 2000.0, frag_sim.substream(11, 0))
    occ = cell_pdmp.occupation_average(path, 0.5, 1.0)
    target = float(pi.cdf(1.0) - pi.cdf(0.5))
    return Outcome(abs(occ - target) <= 0.02, f"occupation {occ:.4f} vs pi([1/2,1]) {target:.4f} (+- 0.02)")


# ---------------------------------------------------------------------------
# generator and linear evolution


def c12_resolvent_K():
    rng = frag_sim.substream(12, 0)
    rates = {"const:1": const_rate(1.0),
             "psi:max:2": rate_from_solution(make_rule("max", k=2), solve_FPsi(make_rule("max", k=2)))}
    worst_K = worst_res = worst_norm = 0.0
    for R in rates.values():
        pi = stationary_law(R)
        for _ in range(20):
            f = lin.random_piecewise_linear(pi.grid, rng)
            worst_K = max(worst_K, lin.norm_L1(pi, lin.apply_K(R, f)) / lin.norm_L1(pi, f))
        for lam in (0.5, 1.0, 5.0):
            for _ in range(20):
                g = lin.random_piecewise_linear(pi.grid, rng)
                f = lin.resolvent_B(R, pi, g, lam)
                worst_norm = max(worst_norm, lin.norm_L1(pi, f) * (2.0 + lam) / lin.norm_L1(pi, g))
                # the residual needs f'' to exist, so it is checked on smooth g
                g = lin.random_bumps(pi.grid, rng)
                f = lin.resolvent_B(R, pi, g, lam)
                worst_res = max(worst_res, lin.resolvent_residual(R, pi, f, g, lam) / lin.norm_L1(pi, g))
    ok = worst_K <= 2.0 and worst_norm <= 1.0 and worst_res <= 1e-3
    return Outcome(ok, f"max ||Kf||/||f|| {worst_K:.6f} (<= 2), max (2+l)||f||/||g|| {worst_norm:.6f} (<= 1), "
                       f"max residual {worst_res:.1e} (<= 1e-3)")


def c13_linear_convergence():
    R, pi = const_rate(1.0), _pi_const1()
    piL = stationary_law(R, LIGHT)
    tr = lin.evolve_R(R, lin.gamma_cdf(2.0, 2.0, LIGHT), 12.0, 1e-3, record_every=12_000)
    tv = lin.tv_to(tr.final, piL)
    defects = []
    for dt in (1e-3, 5e-4):
        run = lin.evolve_R(R, piL.cdf, 1.0, dt, record_every=max(1, int(0.05 / dt)))
        defects.append(max(float(np.max(np.abs(s.F.values - piL.cdf.values))) for s in run.states))
    ratio = defects[1] / defects[0]
    ok = tv <= 0.01 and defects[0] <= 5e-3 and defects[1] <= 2.5e-3 and 0.4 <= ratio <= 0.6
    return Outcome(ok, f"TV(t=12) {tv:.2e} (<= 0.01); stationary defect {defects[0]:.2e} @1e-3, "
                       f"{defects[1]:.2e} @5e-4 (<= 5 dt), ratio {ratio:.3f} (halving)")


def c14_pdmp_pde():
    R = const_rate(1.0)
    tr = lin.evolve_R(R, lin.gamma_cdf(2.0, 2.0, LIGHT), 2.0, 1e-3, record_every=2000)
    ens = cell_pdmp.marginal_ensemble(R, lambda rng, n: rng.gamma(2.0, 0.5, n), 2.0, 100_000, seed=14)
    tv = dist_tv(ens.finite_samples(), tr.final.F)
    return Outcome(tv <= 0.03, f"binned TV(PDE, Monte Carlo) {tv:.4f} (<= 0.03)")


def c15_atomic_rn():
    drive = StepCDF.from_atoms([1 / 3, 2 / 3], [0.5, 0.5])
    rule = make_rule("max", k=2)
    rn = rn_derivative_psi(drive, rule)
    dt = 1e-3
    grid = np.array([0.1, 0.2, 0.3, 0.34, 0.5, 0.6, 0.7, 1.0])
    a = lin.evolve_C(drive, rule, drive, dt, grid=grid).final.F.values
    b = lin.evolve_C(drive, rule, drive, dt, grid=grid, weights="naive").final.F.values
    y = grid * math.exp(-dt)
    expected = dt * y * y * np.where(y < 1 / 3, -1.125, np.where(y < 2 / 3, -0.375, 0.0))
    err = float(np.max(np.abs((a - b) - expected)))
    ok = rn.tolist() == [0.5, 1.5] and err <= 1e-15
    return Outcome(ok, f"RN {rn.tolist()} (== [0.5, 1.5]); gain difference error {err:.1e}")


CRITERIA = (
    Criterion(1, "closed-form fixed point", c01_closed_form),
    Criterion(2, "norm identity", c02_norm_identity),
    Criterion(3, "fixed-point residual", c03_residual),
    Criterion(4, "tail asymptotics", c04_tails),
    Criterion(5, "equidistribution", c05_equidistribution, fast=False),
    Criterion(6, "size-biased convergence", c06_size_biased, fast=False),
    Criterion(7, "martingale drift", c07_martingale),
    Criterion(8, "invariance of pi", c08_invariance),
    Criterion(9, "stationary-law identity", c09_stationary_identity),
    Criterion(10, "ergodicity", c10_ergodicity),
    Criterion(11, "Birkhoff occupation", c11_birkhoff),
    Criterion(12, "resolvent and K bounds", c12_resolvent_K),
    Criterion(13, "linearized convergence", c13_linear_convergence),
    Criterion(14, "PDMP/PDE consistency", c14_pdmp_pde),
    Criterion(15, "atomic RN regression", c15_atomic_rn),
)

SUITES = ("fast", "full")


def select(suite):
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    return [c for c in CRITERIA if suite == "full" or c.fast]


def format_line(c, out, seconds):
    return f"[{'PASS' if out.passed else 'FAIL'}] {c.number:2d} {c.name}: {out.summary} [{seconds:.1f} s]"
