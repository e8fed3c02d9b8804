"""Selection laws Psi on [0, 1] for interval fragmentation with choice.

A rule is the distribution function of the size-biased quantile ``u`` used
to pick which interval gets the next point.  Builtin kinds carry closed-form
densities and exact inverse samplers; mixtures and tabulated rules fall back
on monotone bisection.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

KINDS = ("uniform", "max", "min", "mixture", "table")

# centered-difference step for tabulated rules
TABLE_FD_STEP = 1e-5
BISECTION_TOL = 1e-12


class RuleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ChoiceRule:
    """Distribution function Psi of the quantile used to select intervals.

    Use :func:`make_rule` or :func:`parse_rule` rather than the constructor.
    ``c`` and ``kappa`` are the constants of the lower bound
    ``1 - Psi(u) >= c (1 - u)**kappa`` when known.
    """

    kind: str
    k: float = 1.0
    weights: tuple = ()
    parts: tuple = ()
    table_u: np.ndarray | None = None
    table_Psi: np.ndarray | None = None
    c: float | None = None
    kappa: float | None = None
    label: str = ""
    _interp: object = field(default=None, repr=False)

    def __str__(self):
        return self.label or self.kind

    def Psi(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.kind == "uniform":
            out = u.copy()
        elif self.kind == "max":
            out = u**self.k
        elif self.kind == "min":
            out = 1.0 - (1.0 - u) ** self.k
        elif self.kind == "mixture":
            out = sum(w * p.Psi(u) for w, p in zip(self.weights, self.parts))
        else:
            out = np.clip(self._interp(u), 0.0, 1.0)
        return out[()] if out.ndim == 0 else out

    def psi(self, u):
        """Density of the rule, i.e. the derivative of :meth:`Psi`."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.kind == "uniform":
            out = np.ones_like(u)
        elif self.kind == "max":
            out = self.k * u ** (self.k - 1.0)
        elif self.kind == "min":
            out = self.k * (1.0 - u) ** (self.k - 1.0)
        elif self.kind == "mixture":
            out = sum(w * p.psi(u) for w, p in zip(self.weights, self.parts))
        else:
            h = TABLE_FD_STEP
            lo = np.clip(u - h, 0.0, 1.0)
            hi = np.clip(u + h, 0.0, 1.0)
            out = (self.Psi(hi) - self.Psi(lo)) / (hi - lo)
            out = np.maximum(out, 0.0)
        return out[()] if out.ndim == 0 else out

    def psi_survival(self, S):
        """psi(1 - S), accurate when ``S`` is far below machine epsilon."""
        S = np.clip(np.asarray(S, dtype=float), 0.0, 1.0)
        if self.kind == "min":
            out = self.k * S ** (self.k - 1.0)
        elif self.kind == "max":
            out = self.k * (1.0 - S) ** (self.k - 1.0)
        elif self.kind == "mixture":
            out = sum(w * p.psi_survival(S) for w, p in zip(self.weights, self.parts))
        else:
            out = np.asarray(self.psi(1.0 - S), dtype=float)
        return out[()] if out.ndim == 0 else out

    def upper_tail(self, S):
        """``1 - Psi(1 - S)`` without cancellation for small ``S``."""
        S = np.clip(np.asarray(S, dtype=float), 0.0, 1.0)
        if self.kind == "uniform":
            out = S.copy()
        elif self.kind == "min":
            out = S**self.k
        elif self.kind == "max":
            out = -np.expm1(self.k * np.log1p(-np.minimum(S, 1.0 - 1e-300)))
            out = np.where(S >= 1.0, 1.0, out)
        elif self.kind == "mixture":
            out = sum(w * p.upper_tail(S) for w, p in zip(self.weights, self.parts))
        else:
            out = 1.0 - np.asarray(self.Psi(1.0 - S), dtype=float)
        return out[()] if out.ndim == 0 else out

    def inverse(self, U):
        """Quantile map u = Psi^{-1}(U), the smallest u with Psi(u) >= U."""
        U = np.clip(np.asarray(U, dtype=float), 0.0, 1.0)
        if self.kind == "uniform":
            out = U.copy()
        elif self.kind == "max":
            out = U ** (1.0 / self.k)
        elif self.kind == "min":
            out = 1.0 - (1.0 - U) ** (1.0 / self.k)
        else:
            out = self._bisect(U)
        return out[()] if out.ndim == 0 else out

    def _bisect(self, U):
        lo = np.zeros_like(U)
        hi = np.ones_like(U)
        # 2**-45 < 1e-12
        for _ in range(45):
            mid = 0.5 * (lo + hi)
            below = self.Psi(mid) < U
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi

    def sample(self, rng, size=None):
        """Inverse-transform draws in (0, 1]."""
        U = 1.0 - rng.random(size)  # (0, 1]
        u = np.maximum(self.inverse(U), np.finfo(float).tiny)
        return float(u) if size is None else u


def _check_k(k):
    k = float(k)
    if not np.isfinite(k) or k < 1.0:
        raise RuleError(f"k must be a real number >= 1, got {k}")
    return k


def make_rule(kind, k=None, weights=None, parts=None, table=None, c=None, kappa=None):
    """Build a :class:`ChoiceRule`.

    ``kind`` is one of ``uniform``, ``max``, ``min``, ``mixture`` or ``table``.
    ``table`` is a pair ``(u, Psi)`` of ascending samples with endpoints
    ``(0, 0)`` and ``(1, 1)``.
    """
    if kind == "uniform":
        rule = ChoiceRule("uniform", c=1.0, kappa=1.0, label="uniform")
    elif kind == "max":
        k = _check_k(k)
        # 1 - u^k >= 1 - u for k >= 1
        rule = ChoiceRule("max", k=k, c=1.0, kappa=1.0, label=f"max:{k:g}")
    elif kind == "min":
        k = _check_k(k)
        rule = ChoiceRule("min", k=k, c=1.0, kappa=k, label=f"min:{k:g}")
    elif kind == "mixture":
        weights = tuple(float(w) for w in weights)
        parts = tuple(parts)
        if len(weights) != len(parts) or not parts:
            raise RuleError("mixture needs one weight per sub-rule")
        if any(w < 0 for w in weights):
            raise RuleError("mixture weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise RuleError(f"mixture weights sum to {sum(weights)!r}, not 1")
        # sum w_i (1 - Psi_i) >= min_i c_i (1 - u)^{max kappa_i}, since (1-u) <= 1
        if all(p.c is not None for p in parts):
            c_mix = sum(w * p.c for w, p in zip(weights, parts))
            kappa_mix = max(p.kappa for w, p in zip(weights, parts) if w > 0)
        else:
            c_mix = kappa_mix = None
        label = "mix:" + "+".join(f"{w:g}*{p}" for w, p in zip(weights, parts))
        rule = ChoiceRule("mixture", weights=weights, parts=parts, c=c_mix, kappa=kappa_mix, label=label)
    elif kind == "table":
        u, P = (np.asarray(a, dtype=float) for a in table)
        if u.ndim != 1 or u.shape != P.shape or u.size < 2:
            raise RuleError("table needs two equal-length 1-d columns")
        if np.any(np.diff(u) <= 0):
            raise RuleError("table u column must be strictly increasing")
        if np.any(np.diff(P) < 0):
            raise RuleError("table Psi column is not monotone")
        if u[0] != 0.0 or u[-1] != 1.0 or P[0] != 0.0 or P[-1] != 1.0:
            raise RuleError("table must run from (0, 0) to (1, 1)")
        interp = PchipInterpolator(u, P, extrapolate=False)
        rule = ChoiceRule("table", table_u=u, table_Psi=P, label="table", _interp=interp)
    else:
        raise RuleError(f"unknown rule kind {kind!r}")

    if c is not None or kappa is not None:
        rule = _with_constants(rule, c, kappa)
    elif rule.c is None:
        warnings.warn(
            f"no lower-bound constants for rule {rule}; the choice assumption is unverified",
            stacklevel=2,
        )
    return rule


def _with_constants(rule, c, kappa):
    ok, worst = check_assumption(rule, c, kappa)
    if not ok:
        warnings.warn(
            f"rule {rule} violates 1-Psi(u) >= {c}(1-u)^{kappa} (worst ratio {worst:.3g})",
            stacklevel=3,
        )
    return ChoiceRule(
        rule.kind, rule.k, rule.weights, rule.parts, rule.table_u, rule.table_Psi,
        float(c), float(kappa), rule.label, rule._interp,
    )


def sample_u(rule, rng, size=None):
    return rule.sample(rng, size)


def check_assumption(rule, c, kappa, grid_points=10_000):
    """Check ``1 - Psi(u) >= c (1 - u)**kappa`` on ``u = i/grid_points``.

    Returns ``(holds, worst)`` where ``worst`` is the minimum over the grid
    of ``(1 - Psi(u)) / (1 - u)**kappa``.
    """
    if c <= 0 or kappa < 1:
        raise RuleError("need c > 0 and kappa >= 1")
    if grid_points < 100:
        raise RuleError("grid_points must be at least 100")
    u = np.arange(1, grid_points) / grid_points
    ratio = (1.0 - rule.Psi(u)) / (1.0 - u) ** kappa
    worst = float(ratio.min())
    # tolerate roundoff on the boundary of equality (e.g. uniform, c = 1)
    return bool(worst >= c * (1.0 - 1e-12)), worst


def parse_rule(text):
    """Parse a CLI rule descriptor.

    Grammar: ``uniform``, ``max:K``, ``min:K``, ``mix:w1*max:2+w2*min:3``
    or ``table:PATH`` (CSV with columns ``u,Psi``).
    """
    text = text.strip()
    if text == "uniform":
        return make_rule("uniform")
    head, _, rest = text.partition(":")
    if head in ("max", "min"):
        try:
            k = float(rest)
        except ValueError:
            raise RuleError(f"bad exponent in rule {text!r}") from None
        return make_rule(head, k=k)
    if head == "mix":
        weights, parts = [], []
        for term in rest.split("+"):
            w, star, sub = term.partition("*")
            if not star:
                raise RuleError(f"mixture term {term!r} is not of the form w*rule")
            weights.append(float(w))
            parts.append(parse_rule(sub))
        return make_rule("mixture", weights=weights, parts=parts)
    if head == "table":
        return make_rule("table", table=read_rule_table(rest))
    raise RuleError(f"cannot parse rule descriptor {text!r}")


def read_rule_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    data = np.array([[float(a), float(b)] for a, b in rows])
    return data[:, 0], data[:, 1]


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True
