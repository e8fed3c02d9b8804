"""Distribution functions on (0, inf) and the distances used to compare them.

Two flavours are used throughout the package: :class:`StepCDF` for atomic
(empirical, size-biased) distribution functions and :class:`GridCDF` for
absolutely continuous ones sampled on a log-spaced grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

L1LOC_TERMS = 40
TV_BINS = 200


def log_grid(lo=1e-4, hi=50.0, n=4096):
    if not (0 < lo < hi) or n < 3:
        raise ValueError(f"bad grid {lo}:{hi}:{n}")
    return np.geomspace(lo, hi, int(n))


def parse_grid(text):
    """``"1e-4:50:4096"`` -> log-spaced grid."""
    try:
        lo, hi, n = text.split(":")
        return log_grid(float(lo), float(hi), int(n))
    except ValueError as exc:
        raise ValueError(f"grid spec must look like LO:HI:N, got {text!r}") from exc


@dataclass(frozen=True, eq=False)
class StepCDF:
    """Right-continuous step function with atoms at ``x`` of mass ``m``."""

    x: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cum", np.cumsum(self.m))

    @classmethod
    def from_atoms(cls, x, m):
        x = np.asarray(x, dtype=float)
        m = np.asarray(m, dtype=float)
        if x.size and np.any(x <= 0):
            raise ValueError("atom locations must be positive")
        order = np.argsort(x, kind="stable")
        x, m = x[order], m[order]
        ux, start = np.unique(x, return_index=True)
        um = np.add.reduceat(m, start) if x.size else m
        keep = um > 0
        return cls(ux[keep], um[keep])

    @property
    def total_mass(self):
        return float(self.cum[-1]) if self.cum.size else 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.x, x, side="right")
        out = np.where(idx > 0, self.cum[np.maximum(idx - 1, 0)], 0.0)
        return out[()] if out.ndim == 0 else out

    def left_limit(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.x, x, side="left")
        out = np.where(idx > 0, self.cum[np.maximum(idx - 1, 0)], 0.0)
        return out[()] if out.ndim == 0 else out

    def inverse(self, p):
        return right_cont_inverse(self, p)


@dataclass(frozen=True, eq=False)
class GridCDF:
    """Distribution function sampled on an increasing grid.

    Between nodes the function is linear; below the first node it behaves
    like ``x**2`` (bounded density over ``x``, as for every size-biased law
    here), above the last node it is held at ``values[-1]`` and the missing
    mass is reported as ``tail_mass``.
    """

    grid: np.ndarray
    values: np.ndarray
    tail_mass: float = 0.0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if g[0] <= 0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be positive and strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, F, grid, tail_mass=None):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(F(grid), dtype=float)
        if tail_mass is None:
            tail_mass = max(0.0, 1.0 - float(values[-1]))
        return cls(grid, values, tail_mass)

    @property
    def total_mass(self):
        return float(self.values[-1] + self.tail_mass)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        g, v = self.grid, self.values
        out = np.interp(x, g, v)
        low = x < g[0]
        if np.any(low):
            out = np.where(low, v[0] * (np.maximum(x, 0.0) / g[0]) ** 2, out)
        return out[()] if out.ndim == 0 else out

    def density(self):
        """dF/dx on the grid by second-order differences."""
        return np.gradient(self.values, self.grid)

    def inverse(self, p):
        return right_cont_inverse(self, p)


def size_biased_cdf(lengths, weights=None):
    """Size-biased empirical distribution function of a set of lengths.

    Each length ``l`` contributes an atom at ``l`` of mass ``l`` (times
    ``weights`` when given, e.g. the fraction of the interval inside
    ``[0, alpha]``).  Equal lengths share one atom.
    """
    lengths = np.asarray(lengths, dtype=float)
    if np.any(lengths <= 0):
        raise ValueError("lengths must be positive")
    mass = lengths if weights is None else lengths * np.asarray(weights, dtype=float)
    return StepCDF.from_atoms(lengths, mass)


def right_cont_inverse(F, p):
    """Generalized right-continuous inverse ``inf{x : F(x) > p}``.

    For ``p`` equal to the total mass the set is empty; the largest atom
    (or last grid node) is returned so that sampling with ``u = 1`` is
    well defined.
    """
    p = np.asarray(p, dtype=float)
    total = F.total_mass
    if np.any(p <= 0) or np.any(p > total * (1 + 1e-12)):
        raise ValueError(f"p must lie in (0, {total}]")
    if isinstance(F, StepCDF):
        idx = np.searchsorted(F.cum, p, side="right")
        out = F.x[np.minimum(idx, F.x.size - 1)]
    else:
        g, v = F.grid, F.values
        idx = np.searchsorted(v, p, side="right")
        i = np.clip(idx, 1, g.size - 1)
        dv = v[i] - v[i - 1]
        frac = np.divide(p - v[i - 1], dv, out=np.zeros_like(p), where=dv > 0)
        out = g[i - 1] + np.clip(frac, 0.0, 1.0) * (g[i] - g[i - 1])
        out = np.where(idx == 0, g[0] * np.sqrt(p / v[0]) if v[0] > 0 else g[0], out)
        out = np.where(idx >= g.size, np.inf if F.tail_mass > 0 else g[-1], out)
    return out[()] if out.ndim == 0 else out


def rn_derivative_psi(F, rule):
    """Radon-Nikodym derivative of ``Psi o F`` with respect to ``F`` on atoms.

    At an atom with jump ``dF`` the derivative is the ratio of jumps
    ``(Psi(F(x)) - Psi(F(x-))) / dF``.  This is *not* ``psi(F(x))``.
    """
    if F.x.size == 0:
        raise ValueError("F has no atoms")
    hi = np.clip(F.cum, 0.0, 1.0)
    lo = np.concatenate(([0.0], hi[:-1]))
    return (rule.Psi(hi) - rule.Psi(lo)) / F.m


def candy_norm(F):
    """The weighted norm ``int x^-2 |F(x)| dx``.

    For size-biased distribution functions this equals ``int x^-1 dF(x)``,
    which is what is computed: a sum over atoms, or a trapezoid rule on the
    grid density (with the region below the first node treated as
    ``F ~ x^2``).
    """
    if isinstance(F, StepCDF):
        if np.any(F.x <= 0):
            raise ValueError("atom at 0")
        return float(np.sum(F.m / F.x))
    g = F.grid
    if g[0] <= 0:
        raise ValueError("grid must start above 0")
    # int F'(x)/x dx = int F'(x) d(log x)
    integrand = F.density()
    head = 2.0 * F.values[0] / g[0]
    return float(np.trapezoid(integrand, np.log(g)) + head)


def _segment_values(F, b):
    """Values of F at the left and right ends of the segments [b_i, b_{i+1})."""
    if isinstance(F, StepCDF):
        left = F(b[:-1])
        return left, left
    return F(b[:-1]), F(b[1:])


def _abs_linear_integral(dl, dr, w):
    """Exact integral of |d| for d linear from dl to dr over width w."""
    same = dl * dr >= 0
    s = np.abs(dl) + np.abs(dr)
    cross = np.divide(dl * dl + dr * dr, 2.0 * s, out=np.zeros_like(s), where=s > 0)
    return w * np.where(same, 0.5 * s, cross)


def _breakpoints(F, upto):
    if isinstance(F, StepCDF):
        return F.x[F.x < upto]
    return F.grid[F.grid < upto]


def dist_L1loc(F, G, terms=L1LOC_TERMS):
    """``sum_k min(2^-k, int_0^k |F - G| dx)`` for k = 1..terms.

    The integrals are exact for the interpolation model of each argument:
    step functions are constant between atoms and grid functions linear
    between nodes.
    """
    ks = np.arange(1, terms + 1, dtype=float)
    b = np.unique(np.concatenate(([0.0], ks, _breakpoints(F, terms), _breakpoints(G, terms))))
    fl, fr = _segment_values(F, b)
    gl, gr = _segment_values(G, b)
    seg = _abs_linear_integral(fl - gl, fr - gr, np.diff(b))
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    at_k = cum[np.searchsorted(b, ks)]
    return float(np.sum(np.minimum(2.0**-ks, at_k)))


def dist_tv(a, b, bins=TV_BINS):
    """Total variation distance to a reference GridCDF ``b``.

    ``a`` is either a GridCDF (the densities are compared with a trapezoid
    rule, plus the mass below the grid and in the tail) or an array of
    samples.  For samples the reference is cut into ``bins`` bins of equal
    reference mass and the binned distance is returned; binning can only
    lower the distance, so this is a lower-bound estimator.
    """
    if isinstance(a, GridCDF):
        return _tv_grid(a, b)
    samples = np.asarray(a, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("no samples")
    if samples.size < 100:
        raise ValueError("need at least 100 samples for a binned TV estimate")
    emp, ref = binned_masses(samples, b, bins)
    return 0.5 * float(np.sum(np.abs(emp - ref)))


def binned_masses(samples, ref, bins=TV_BINS):
    """Empirical and reference masses of ``bins`` equal-reference-mass bins."""
    total = ref.total_mass
    edges = np.asarray(right_cont_inverse(ref, total * np.arange(1, bins) / bins))
    edges = np.maximum.accumulate(edges)
    finite = np.isfinite(edges)
    inner = np.where(finite, ref(np.where(finite, edges, 0.0)), total)
    ref_mass = np.diff(np.concatenate(([0.0], inner, [total]))) / total
    idx = np.searchsorted(edges, samples, side="right")
    counts = np.bincount(idx, minlength=bins)
    return counts / samples.size, ref_mass


def _tv_grid(a, b):
    if a.grid.shape == b.grid.shape and np.array_equal(a.grid, b.grid):
        g = a.grid
        fa, fb = a.values, b.values
    else:
        g = np.union1d(a.grid, b.grid)
        fa, fb = a(g), b(g)
    da = np.gradient(fa, g)
    db = np.gradient(fb, g)
    body = np.trapezoid(np.abs(da - db), g)
    head = abs(fa[0] - fb[0])
    tail = abs(a.tail_mass - b.tail_mass)
    return 0.5 * float(body + head + tail)


def ks_distance(samples, cdf):
    """Kolmogorov-Smirnov statistic of ``samples`` against a callable CDF."""
    return float(stats.kstest(np.asarray(samples, dtype=float), cdf).statistic)


def write_cdf_csv(path, x, F):
    with open(path, "w") as fh:
        fh.write("x,F\n")
        for xi, fi in zip(np.asarray(x, dtype=float), np.asarray(F, dtype=float)):
            fh.write(f"{float(xi)!r},{float(fi)!r}\n")


def read_cdf_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return GridCDF(data[:, 0], data[:, 1], max(0.0, 1.0 - float(data[-1, 1])))
