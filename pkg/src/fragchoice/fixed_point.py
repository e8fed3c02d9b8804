"""Limiting size-biased law F^Psi, rate functions R and stationary laws.

The fixed point satisfies ``F'(x)/x = int_x^inf psi(F(z)) F'(z)/z dz``.
Writing ``G = F'/x`` and using the mass coordinate ``u = F(x)`` instead of
``x`` turns this into the pair

    G(u) = int_u^1 psi(v) / x(v) dv,        x(u)**2 = 2 int_0^u dv / G(v),

which lives on the compact interval [0, 1]: no normalisation constant and no
truncated tail.  :func:`solve_FPsi` runs a damped fixed-point iteration on
``log x(u)``; :func:`shoot_FPsi` is an independent oracle that integrates
``F' = xG, G' = -psi(F) G`` forward in ``x`` and brackets ``G(0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, cumulative_trapezoid, quad, simpson, solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import expit, gammainccinv, gammaincinv

from .measures import GridCDF, log_grid, parse_grid
from .rules import ChoiceRule, parse_rule

LIGHT_GRID = (1e-4, 50.0, 4096)
HEAVY_GRID = (1e-4, 1e6, 4096)
MAX_ITER = 500

# quantile mesh: u = expit(w) for w in [W_LO, W_HI]
W_LO, W_HI, N_QUANTILE = -36.0, 80.0, 16385


class DivergedNormalization(ArithmeticError):
    """Z^R is infinite: the stationary integrand does not decay."""


class ConvergenceError(RuntimeError):
    pass


def default_grid(rule=None):
    """Light-tailed rules use [1e-4, 50]; rules with psi(1) = 0 reach 1e6."""
    heavy = rule is not None and float(rule.psi_survival(0.0)) == 0.0
    return log_grid(*(HEAVY_GRID if heavy else LIGHT_GRID))


def as_grid(grid, rule=None):
    if grid is None:
        return default_grid(rule)
    if isinstance(grid, str):
        return parse_grid(grid)
    if isinstance(grid, tuple) and len(grid) == 3:
        return log_grid(*grid)
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 3 or g[0] <= 0 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be positive and strictly increasing")
    return g


# ---------------------------------------------------------------------------
# rate functions


@dataclass(frozen=True, eq=False)
class RateFunction:
    """Nonnegative rate ``R`` tabulated on a grid, with ``rho = int_1^x R``.

    ``R`` is linear between nodes and ``rho`` is tabulated by cumulative
    trapezoid, anchored so that ``rho(1) = 0``.  Between nodes ``rho`` is
    interpolated linearly, which is exact for piecewise constant ``R``.
    Outside the table ``R`` is held constant when ``extrapolate`` is set;
    otherwise evaluation there raises ``ValueError``.
    """

    grid: np.ndarray
    values: np.ndarray
    extrapolate: bool = False
    label: str = ""
    rho_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        R = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != R.shape or g.size < 2:
            raise ValueError("rate grid and values must be 1-d arrays of equal length")
        if g[0] <= 0 or np.any(np.diff(g) <= 0):
            raise ValueError("rate grid must be positive and strictly increasing")
        if not np.all(np.isfinite(R)) or np.any(R < 0):
            raise ValueError("rate values must be finite and nonnegative")
        if not g[0] <= 1.0 <= g[-1]:
            raise ValueError("rate grid must contain x = 1 (rho is anchored there)")
        cum = cumulative_trapezoid(R, g, initial=0.0)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", R)
        object.__setattr__(self, "rho_table", cum - np.interp(1.0, g, cum))

    def __str__(self):
        return self.label or "table"

    def _check_domain(self, x):
        if not self.extrapolate and (np.any(x < self.grid[0]) or np.any(x > self.grid[-1])):
            raise ValueError(
                f"rate {self} evaluated outside its table [{self.grid[0]:g}, {self.grid[-1]:g}]; "
                "enable extrapolation explicitly"
            )

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        out = np.interp(x, self.grid, self.values)
        return out[()] if out.ndim == 0 else out

    def rho(self, x):
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        g, r, R = self.grid, self.rho_table, self.values
        out = np.interp(x, g, r)
        out = np.where(x < g[0], r[0] - R[0] * (g[0] - x), out)
        out = np.where(x > g[-1], r[-1] + R[-1] * (x - g[-1]), out)
        return out[()] if out.ndim == 0 else out

    @property
    def rho_sup(self):
        """``lim rho(x)`` as x grows: infinite unless R vanishes at the end."""
        if self.extrapolate and self.values[-1] == 0.0:
            return float(self.rho_table[-1])
        return math.inf

    @property
    def rho_inf(self):
        """``lim rho(x)`` as x goes to 0."""
        if self.extrapolate and self.values[0] > 0:
            return float(self.rho_table[0] - self.values[0] * self.grid[0])
        return float(self.rho_table[0])

    def rho_inverse(self, y):
        """``inf{x : rho(x) >= y}``; flat stretches resolve to their left end."""
        y = np.asarray(y, dtype=float)
        g, r, R = self.grid, self.rho_table, self.values
        if np.any(y > r[-1]):
            if not self.extrapolate:
                raise ValueError(f"rho^-1 beyond the table of rate {self}")
            if R[-1] == 0.0 and np.any(y > r[-1]):
                raise ValueError("rho^-1 of a value above rho_sup")
        i = np.searchsorted(r, y, side="left")
        ic = np.clip(i, 1, g.size - 1)
        dr = r[ic] - r[ic - 1]
        frac = np.divide(y - r[ic - 1], dr, out=np.ones_like(y), where=dr > 0)
        out = g[ic - 1] + frac * (g[ic] - g[ic - 1])
        if R[-1] > 0:
            out = np.where(i >= g.size, g[-1] + (y - r[-1]) / R[-1], out)
        if R[0] > 0:
            below = g[0] - (r[0] - y) / R[0]
        else:
            below = np.zeros_like(y)
        out = np.where(i == 0, np.where(y >= r[0], g[0], np.maximum(below, 0.0)), out)
        return out[()] if out.ndim == 0 else out


def const_rate(c, grid=None):
    c = float(c)
    if not np.isfinite(c) or c < 0:
        raise ValueError(f"constant rate must be finite and >= 0, got {c}")
    g = log_grid(1e-4, 1e3, 4096) if grid is None else as_grid(grid)
    return RateFunction(g, np.full(g.size, c), extrapolate=True, label=f"const:{c:g}")


def table_rate(x, R, extrapolate=False, label="table"):
    return RateFunction(np.asarray(x, dtype=float), np.asarray(R, dtype=float), extrapolate, label)


def read_rate_table(path, extrapolate=False):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return table_rate(data[:, 0], data[:, 1], extrapolate, label=f"table:{path}")


def write_rate_table(path, rate):
    with open(path, "w") as fh:
        fh.write("x,R\n")
        for x, r in zip(rate.grid, rate.values):
            fh.write(f"{float(x)!r},{float(r)!r}\n")


def rate_from_solution(rule, F):
    """``R = psi o F`` on the grid of ``F``, held constant beyond it."""
    S = np.clip(1.0 - F.values, 0.0, 1.0)
    R = np.asarray(rule.psi_survival(S), dtype=float)
    return RateFunction(F.grid, R, extrapolate=True, label=f"psi:{rule}")


def parse_rate(text, grid=None, tol=1e-10):
    """``const:C``, ``table:PATH`` or ``psi:RULE`` (solves for F^Psi first)."""
    head, _, rest = text.strip().partition(":")
    if head == "const":
        try:
            return const_rate(float(rest), grid)
        except ValueError as exc:
            raise ValueError(f"bad rate descriptor {text!r}: {exc}") from None
    if head == "table":
        return read_rate_table(rest)
    if head == "psi":
        rule = parse_rule(rest)
        return rate_from_solution(rule, solve_FPsi(rule, grid, tol))
    raise ValueError(f"cannot parse rate descriptor {text!r}")


# ---------------------------------------------------------------------------
# stationary law


@dataclass(frozen=True, eq=False)
class StationaryLaw:
    """Law with density ``x exp(-rho(x)) / Z`` and its GridCDF."""

    Z: float
    cdf: GridCDF
    density: np.ndarray
    rate: RateFunction
    tail: tuple  # (a, b) of the closure R ~ a/x + b beyond the grid

    @property
    def grid(self):
        return self.cdf.grid

    def sample(self, rng, size=None):
        U = 1.0 - rng.random(size)
        U = np.minimum(U, self.cdf.values[-1])
        x = np.asarray(self.cdf.inverse(U))
        return float(x) if size is None else x

    def expect(self, f_values):
        """``int f dpi`` for ``f`` given on the grid (mass outside the grid ignored)."""
        return float(simpson(np.asarray(f_values) * self.density * self.grid, x=np.log(self.grid)))


def _tail_closure(x, R, span=0.5):
    """Fit ``R ~ a/x + b`` at the grid end from two nodes ``span`` apart in log x."""
    xm, Rm = x[-1], R[-1]
    j = int(np.searchsorted(np.log(x), np.log(xm) - span))
    j = min(max(j, 0), x.size - 2)
    x1, R1 = x[j], R[j]
    a = (R1 - Rm) / (1.0 / x1 - 1.0 / xm)
    b = Rm - a / xm
    if b < 0:
        a, b = xm * Rm, 0.0
    if a < 0:
        a, b = 0.0, Rm
    return float(a), float(b)


def _tail_integral(xm, a, b):
    """``int_xm^inf y (y/xm)^-a exp(-b (y - xm)) dy``."""
    if b <= 0.0:
        if a <= 2.0:
            return math.inf
        return xm * xm / (a - 2.0)
    c = b * xm

    def integrand(t):
        return math.exp((1.0 - a) * math.log(t) - c * (t - 1.0))

    val, _ = quad(integrand, 1.0, math.inf, limit=200)
    return xm * xm * val


def stationary_law(rate, grid=None):
    """Normalised law ``F^R`` of density ``x exp(-rho(x)) / Z^R``.

    Raises :class:`DivergedNormalization` when the integrand does not decay
    at the end of the grid (so ``Z^R`` is infinite).
    """
    g = rate.grid if grid is None else as_grid(grid)
    rho = rate.rho(g)
    R = rate(g)
    a, b = _tail_closure(g, R)
    if not (b > 0 or a > 2):
        raise DivergedNormalization(
            f"Z^R diverges for rate {rate}: integrand y exp(-rho(y)) is not decaying "
            f"at x = {g[-1]:g} (x R(x) = {g[-1] * R[-1]:.3g})"
        )
    shift = float(np.min(rho))
    w = np.exp(-(rho - shift))
    head = 0.5 * w[0] * g[0] ** 2
    # int y e^-rho dy = int y^2 e^-rho dlog y
    cum = head + cumulative_simpson(w * g * g, x=np.log(g), initial=0.0)
    tail = w[-1] * _tail_integral(g[-1], a, b)
    Zs = cum[-1] + tail
    if not np.isfinite(Zs):
        raise DivergedNormalization(f"Z^R is not finite for rate {rate}")
    F = GridCDF(g, cum / Zs, tail / Zs)
    return StationaryLaw(Zs * math.exp(-shift), F, w * g / Zs, rate, (a, b))


# ---------------------------------------------------------------------------
# fixed point of the size-biased law


@dataclass(frozen=True, eq=False)
class QuantileSolution:
    """Converged quantile function ``x(u)`` on the mesh ``u = expit(w)``."""

    rule: ChoiceRule
    w: np.ndarray
    logx: np.ndarray
    G: np.ndarray
    iterations: int
    change: float

    @property
    def u(self):
        return expit(self.w)

    def candy(self):
        """``int x^-1 dF = int_0^1 du / x(u)``."""
        du = expit(self.w) * expit(-self.w)
        # x ~ sqrt(2u / G(0)) below the mesh
        head = math.sqrt(2.0 * self.G[0] * expit(self.w[0]))
        return head + float(simpson(du * np.exp(-self.logx), x=self.w))

    def to_grid(self, grid):
        grid = as_grid(grid)
        spline = CubicSpline(self.logx, self.w)
        lx = np.log(grid)
        inside = lx <= self.logx[-1]
        w = np.where(inside, spline(np.clip(lx, self.logx[0], self.logx[-1])), self.w[-1])
        low = lx < self.logx[0]
        F = expit(w)
        if np.any(low):
            F = np.where(low, 0.5 * self.G[0] * grid**2, F)
        return GridCDF(grid, F, float(expit(-w[-1])))


def _from_right(f, w):
    """``int_w^{w[-1]} f``, accumulated from the right to keep small tails exact."""
    return cumulative_simpson(f[::-1], x=-w[::-1], initial=0.0)[::-1]


def _quantile_map(psi, u, du, w, logx):
    x = np.exp(logx)
    # beyond the mesh: int_{u_hi}^1 psi/x du ~ psi S / x
    G = _from_right(psi * du / x, w) + psi[-1] * expit(-w[-1]) / x[-1]
    ok = G > 1e-280
    last = int(np.argmin(ok)) if not ok.all() else G.size
    P = u[0] / G[0] + cumulative_simpson(du[:last] / G[:last], x=w[:last], initial=0.0)
    new = np.empty_like(logx)
    new[:last] = 0.5 * np.log(2.0 * P)
    if last < G.size:
        # G underflows only absurdly far out; continue log x linearly in w
        slope = (new[last - 1] - new[last - 2]) / (w[last - 1] - w[last - 2])
        new[last:] = new[last - 1] + slope * (w[last:] - w[last - 1])
    return new, G


def solve_quantiles(rule, tol=1e-10, damping=0.5, max_iter=MAX_ITER, n=N_QUANTILE,
                    w_range=(W_LO, W_HI)):
    """Damped fixed-point iteration for the quantile function of F^Psi.

    ``damping`` is the weight kept on the previous iterate of ``log x(u)``.
    The stopping rule bounds the implied sup change of ``F`` by ``tol``.
    """
    if tol < 1e-12:
        raise ValueError("tol must be >= 1e-12")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    w = np.linspace(w_range[0], w_range[1], int(n))
    u, S = expit(w), expit(-w)
    du = u * S
    psi = np.asarray(rule.psi_survival(S), dtype=float)
    # start from the uniform-rule answer, the Gamma(2, 1) quantile
    logx = np.log(np.where(u < 0.5, gammaincinv(2.0, u), gammainccinv(2.0, S)))
    change = math.inf
    for it in range(1, max_iter + 1):
        new, G = _quantile_map(psi, u, du, w, logx)
        if not np.all(np.isfinite(new)):
            raise DivergedNormalization(f"quantile iteration for rule {rule} left the floating range")
        # |dF| ~ (dF/dlog x) |d log x| with dF/dlog x = du/dw / (dlog x/dw)
        slope = du / np.maximum(np.gradient(new, w), 1e-300)
        change = float(np.max(slope * np.abs(new - logx)))
        logx = damping * logx + (1.0 - damping) * new
        if change <= tol:
            return QuantileSolution(rule, w, logx, G, it, change)
    raise ConvergenceError(
        f"fixed-point iteration for rule {rule} did not reach tol={tol:g} "
        f"in {max_iter} iterations (last change {change:.3g})"
    )


def solve_FPsi(rule, grid=None, tol=1e-10, damping=0.5, max_iter=MAX_ITER):
    """F^Psi on ``grid`` (default: light or heavy grid chosen from the rule)."""
    grid = as_grid(grid, rule)
    return solve_quantiles(rule, tol, damping, max_iter).to_grid(grid)


# ---------------------------------------------------------------------------
# shooting oracle


def _shoot(rule, g0, xm, dense=False, x_start=1e-8):
    psi1 = float(rule.psi_survival(0.0))

    # state (F, log G) in log x: G' = -psi G is stiff once G is tiny, log G is not
    def rhs(t, y):
        x = math.exp(t)
        return [x * x * math.exp(y[1]), -x * float(rule.psi(y[0]))]

    def full(t, y):
        return y[0] - 1.0

    full.terminal = True
    full.direction = 1
    y0 = [0.5 * g0 * x_start**2, math.log(g0) - float(rule.psi(0.0)) * x_start]
    t1 = math.log(xm)
    sol = solve_ivp(rhs, (math.log(x_start), t1), y0, method="DOP853", rtol=1e-12,
                    atol=1e-15, events=full, dense_output=dense)
    if sol.t_events[0].size:
        # overshoot: F reached 1 inside the domain; earlier means larger g0
        return 2.0 + (t1 - sol.t_events[0][0]), sol, 0.0
    F_end, G_end = sol.y[0, -1], math.exp(sol.y[1, -1])
    a = max(xm * (float(rule.psi(F_end)) - psi1), 0.0)
    tail = G_end * _tail_integral(xm, a, psi1) / xm
    return F_end + tail, sol, tail


def shoot_FPsi(rule, grid=None, tol=1e-10, bracket=(1e-6, 1e3)):
    """Shooting oracle: bracket ``G(0)`` so that the total mass equals 1.

    The terminal mass (F at the grid end plus the closed-form tail of the
    linearised equation) must be monotone in ``G(0)``; this is checked on a
    16-point geometric scan of the bracket before root finding.
    """
    grid = as_grid(grid, rule)
    xm = float(grid[-1])

    def excess(g0):
        return _shoot(rule, g0, xm)[0] - 1.0

    lo, hi = bracket
    for _ in range(20):
        if excess(lo) < 0:
            break
        lo /= 1e3
    for _ in range(20):
        if excess(hi) > 0:
            break
        hi *= 1e3
    scan = [excess(g) for g in np.geomspace(lo, hi, 16)]
    finite = [s for s in scan if np.isfinite(s)]
    if np.any(np.diff(finite) < -1e-12):
        raise ConvergenceError(f"terminal mass is not monotone in G(0) for rule {rule}")
    g0 = brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    err = abs(excess(g0))
    if err > 10 * tol:
        raise ConvergenceError(f"shooting reached |F(inf) - 1| = {err:.3g} only")
    _, sol, tail = _shoot(rule, g0, xm, dense=True)
    lx = np.log(grid)
    F = np.where(lx >= sol.t[0], sol.sol(np.clip(lx, sol.t[0], None))[0], 0.5 * g0 * grid**2)
    return GridCDF(grid, F, float(tail))


# ---------------------------------------------------------------------------
# diagnostics


def _log_density(F):
    """dF/dlog x by centered differences on the log grid."""
    return np.gradient(F.values, np.log(F.grid))


def residual_fixed_point(F, rule, floor=1e-8):
    """Relative sup residual of ``F'(x)/x = int_x^inf psi(F) F'/z dz``.

    Taken over interior nodes where ``1 - F >= floor``; below that the
    finite-difference density is dominated by rounding in ``F``.
    """
    g = F.grid
    dlog = _log_density(F)
    lhs = dlog / g**2
    S = np.clip(1.0 - F.values, 0.0, 1.0)
    integrand = np.asarray(rule.psi_survival(S)) * dlog / g
    rhs = -cumulative_trapezoid(integrand[::-1], np.log(g)[::-1], initial=0.0)[::-1]
    rhs = rhs + _residual_tail(F, rule)
    mask = np.zeros(g.size, dtype=bool)
    mask[1:-1] = True
    mask &= (S >= floor) & (lhs > 0)
    if not mask.any():
        raise ValueError("no interior grid points above the residual floor")
    return float(np.max(np.abs(lhs[mask] - rhs[mask]) / lhs[mask]))


def _residual_tail(F, rule, span=0.5):
    """``int_xm^inf d(Psi o F)/z`` for a power-law ``1 - Psi(F)`` at the end."""
    g = F.grid
    j = int(np.searchsorted(np.log(g), np.log(g[-1]) - span))
    j = min(j, g.size - 2)
    T = np.asarray(rule.upper_tail(np.clip(1.0 - F.values[[j, -1]], 0.0, 1.0)))
    if T[-1] <= 0:
        return 0.0
    if T[0] <= T[-1]:
        return float(T[-1] / g[-1])
    q = np.log(T[0] / T[-1]) / np.log(g[-1] / g[j])
    return float(q / (q + 1.0) * T[-1] / g[-1])


@dataclass(frozen=True)
class TailFit:
    form: str
    rate: float  # k for exp-linear, the power exponent for power
    log_prefactor: float
    residual: float
    points: int


def tail_fit(F, form, window=(1e-8, 1e-2)):
    """Least-squares tail fit on the nodes with ``1 - F`` inside ``window``.

    ``exp-linear``: ``log(1-F) - log x = log C - k x``;
    ``power``: ``log(1-F) = log c - p log x``.
    """
    S = 1.0 - F.values
    mask = (S >= window[0]) & (S <= window[1])
    if mask.sum() < 3:
        raise ValueError(f"tail window {window} holds fewer than 3 grid points")
    x, s = F.grid[mask], np.log(S[mask])
    if form == "exp-linear":
        X, y = x, s - np.log(x)
    elif form == "power":
        X, y = np.log(x), s
    else:
        raise ValueError(f"unknown tail form {form!r}")
    coef, res, *_ = np.polyfit(X, y, 1, full=True)
    rms = math.sqrt(float(res[0]) / X.size) if res.size else 0.0
    return TailFit(form, -float(coef[0]), float(coef[1]), rms, int(X.size))
