"""Event-driven simulation of interval fragmentation with choice.

Intervals live in flat arrays indexed by an integer id.  A split keeps the
parent id for the left child and hands out a fresh id for the right child,
so ids ``0 .. next_id-1`` are exactly the live intervals and the left
endpoints of ids ``>= n0`` are the added points.

Selection by size-biased quantile goes through a treap keyed by
``(length, id)`` whose nodes carry subtree length sums and counts; insert,
delete, cumulative-weight search and rank queries are all O(log n).  The
treap priorities are a fixed hash of the id, so the tree shape is a pure
function of the configuration and consumes no randomness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .measures import StepCDF, rn_derivative_psi, size_biased_cdf

BLOCK = 1 << 16
NIL = -1
_KIND_CODES = {"uniform": 0, "max": 1, "min": 2}


def substream(seed, index):
    """Generator for replica ``index`` of master ``seed``: PCG64 on SeedSequence([seed, index])."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _splitmix64(ids):
    with np.errstate(over="ignore"):
        z = ids.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


# ---------------------------------------------------------------------------
# treap kernels
#
# One 64-byte record per node keeps a tree walk at one cache line per level.

NODE = np.dtype([
    ("ln", np.float64), ("sum", np.float64), ("lc", np.int64), ("rc", np.int64),
    ("cnt", np.int64), ("prio", np.uint64), ("pad0", np.int64), ("pad1", np.int64),
])


def _new_nodes(cap):
    nd = np.zeros(cap, dtype=NODE)
    nd["lc"] = NIL
    nd["rc"] = NIL
    nd["prio"] = _splitmix64(np.arange(cap))
    return nd


@njit(cache=True)
def _less(nd, a, b):
    return nd[a].ln < nd[b].ln or (nd[a].ln == nd[b].ln and a < b)


@njit(cache=True)
def _pull(nd, t):
    s = nd[t].ln
    c = 1
    a = nd[t].lc
    b = nd[t].rc
    if a != NIL:
        s += nd[a].sum
        c += nd[a].cnt
    if b != NIL:
        s += nd[b].sum
        c += nd[b].cnt
    nd[t].sum = s
    nd[t].cnt = c


@njit(cache=True)
def _merge(nd, a, b):
    if a == NIL:
        return b
    if b == NIL:
        return a
    if nd[a].prio > nd[b].prio:
        nd[a].rc = _merge(nd, nd[a].rc, b)
        _pull(nd, a)
        return a
    nd[b].lc = _merge(nd, a, nd[b].lc)
    _pull(nd, b)
    return b


@njit(cache=True)
def _split(nd, t, node):
    """Split subtree t into keys < node and keys > node."""
    if t == NIL:
        return NIL, NIL
    if _less(nd, t, node):
        a, b = _split(nd, nd[t].rc, node)
        nd[t].rc = a
        _pull(nd, t)
        return t, b
    a, b = _split(nd, nd[t].lc, node)
    nd[t].lc = b
    _pull(nd, t)
    return a, t


@njit(cache=True)
def _insert(nd, t, node):
    if t == NIL:
        nd[node].lc = NIL
        nd[node].rc = NIL
        _pull(nd, node)
        return node
    if nd[node].prio > nd[t].prio:
        a, b = _split(nd, t, node)
        nd[node].lc = a
        nd[node].rc = b
        _pull(nd, node)
        return node
    if _less(nd, node, t):
        nd[t].lc = _insert(nd, nd[t].lc, node)
    else:
        nd[t].rc = _insert(nd, nd[t].rc, node)
    _pull(nd, t)
    return t


@njit(cache=True)
def _erase(nd, t, node):
    if t == node:
        return _merge(nd, nd[t].lc, nd[t].rc)
    if _less(nd, node, t):
        nd[t].lc = _erase(nd, nd[t].lc, node)
    else:
        nd[t].rc = _erase(nd, nd[t].rc, node)
    _pull(nd, t)
    return t


@njit(cache=True)
def _find(nd, root, p):
    """Node holding the cumulative weight ``p``: first in order with cum > p."""
    t = root
    last = root
    while t != NIL:
        last = t
        a = nd[t].lc
        sl = nd[a].sum if a != NIL else 0.0
        if p < sl:
            t = a
        elif p < sl + nd[t].ln:
            return t
        else:
            p -= sl + nd[t].ln
            t = nd[t].rc
    # p at (or, by rounding, beyond) the total: take the largest key
    t = last
    while nd[t].rc != NIL:
        t = nd[t].rc
    return t


@njit(cache=True)
def _count_below(nd, root, ell, inclusive):
    c = 0
    t = root
    while t != NIL:
        x = nd[t].ln
        if x < ell or (inclusive and x == ell):
            a = nd[t].lc
            c += 1 + (nd[a].cnt if a != NIL else 0)
            t = nd[t].rc
        else:
            t = nd[t].lc
    return c


@njit(cache=True)
def _select(nd, root, r):
    """Node of in-order rank r (0-based)."""
    t = root
    while True:
        a = nd[t].lc
        cl = nd[a].cnt if a != NIL else 0
        if r < cl:
            t = a
        elif r == cl:
            return t
        else:
            r -= cl + 1
            t = nd[t].rc


@njit(cache=True)
def _advance(nd, lf, root, next_id, us, vs, ties, alphas, counts, chosen, chosen_len):
    for s in range(us.size):
        p = us[s] * nd[root].sum
        t = _find(nd, root, p)
        ell = nd[t].ln
        lo = _count_below(nd, root, ell, False)
        hi = _count_below(nd, root, ell, True)
        if hi - lo > 1:
            r = lo + int(ties[s] * (hi - lo))
            t = _select(nd, root, min(r, hi - 1))
        a = lf[t]
        c1 = vs[s] * ell
        c2 = ell - c1
        root = _erase(nd, root, t)
        nd[t].ln = c1
        root = _insert(nd, root, t)
        nid = next_id
        next_id += 1
        nd[nid].ln = c2
        lf[nid] = a + c1
        root = _insert(nd, root, nid)
        pos = a + c1
        for j in range(alphas.size):
            if pos <= alphas[j]:
                counts[j] += 1
        chosen[s] = t
        chosen_len[s] = ell
    return root, next_id


# ---------------------------------------------------------------------------
# configuration


@dataclass(eq=False)
class IntervalConfig:
    """Mutable fragmentation state; see the module docstring for the layout."""

    nodes: np.ndarray = field(repr=False)
    lefts: np.ndarray = field(repr=False)
    n0: int
    alphas: np.ndarray
    counts: np.ndarray
    mode: str = "discrete"
    exp_t: float = 1.0  # e^t in poissonized mode
    next_id: int = 0
    root: int = NIL

    @property
    def n_points(self):
        return self.next_id - self.n0

    @property
    def n_intervals(self):
        return self.next_id

    @property
    def live_lengths(self):
        return np.ascontiguousarray(self.nodes["ln"][: self.next_id])

    @property
    def live_lefts(self):
        return self.lefts[: self.next_id]

    @property
    def points(self):
        """Positions of the added points, in insertion order."""
        return self.lefts[self.n0 : self.next_id]

    @property
    def t(self):
        return math.log(self.exp_t)

    @property
    def scale(self):
        return float(self.next_id) if self.mode == "discrete" else self.exp_t

    def total_length(self):
        return float(self.nodes[self.root]["sum"])

    def reserve(self, extra):
        need = self.next_id + int(extra)
        cap = self.lefts.size
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        nodes = _new_nodes(new_cap)
        nodes[:cap] = self.nodes
        lefts = np.zeros(new_cap)
        lefts[:cap] = self.lefts
        self.nodes, self.lefts = nodes, lefts

    def rebuild_index(self):
        """Rebuild the treap from the interval lengths alone."""
        nd = self.nodes
        nd["lc"][: self.next_id] = NIL
        nd["rc"][: self.next_id] = NIL
        root = NIL
        for i in range(self.next_id):
            root = _insert(nd, root, i)
        self.root = root

    def find(self, u):
        """Id selected by quantile ``u`` before tie-breaking."""
        return int(_find(self.nodes, self.root, u * self.nodes[self.root]["sum"]))


@dataclass(frozen=True)
class SplitEvent:
    interval: int
    length: float
    u: float
    v: float
    children: tuple
    position: float


def init_config(cut_points=(), alphas=(), capacity=None, mode="discrete"):
    """Partition of [0, 1] at ``cut_points`` (strictly increasing, inside (0, 1))."""
    cuts = np.asarray(cut_points, dtype=float).ravel()
    if cuts.size and (np.any(cuts <= 0) or np.any(cuts >= 1)):
        raise ValueError("cut points must lie strictly inside (0, 1)")
    if np.any(np.diff(cuts) <= 0):
        raise ValueError("cut points must be strictly increasing (no duplicates)")
    if mode not in ("discrete", "poissonized"):
        raise ValueError(f"unknown mode {mode!r}")
    alphas = np.asarray(alphas, dtype=float).ravel()
    if np.any((alphas < 0) | (alphas > 1)):
        raise ValueError("alphas must lie in [0, 1]")
    edges = np.concatenate(([0.0], cuts, [1.0]))
    n0 = edges.size - 1
    cap = max(int(capacity or 0), n0 + 16)
    nodes = _new_nodes(cap)
    lefts = np.zeros(cap)
    nodes["ln"][:n0] = np.diff(edges)
    lefts[:n0] = edges[:-1]
    cfg = IntervalConfig(
        nodes, lefts, n0, alphas, np.zeros(alphas.size, dtype=np.int64), mode,
        exp_t=float(n0), next_id=n0,
    )
    cfg.rebuild_index()
    return cfg


def _apply(config, us, vs, ties, Es=None):
    n = us.size
    config.reserve(n)
    chosen = np.empty(n, dtype=np.int64)
    chosen_len = np.empty(n)
    config.root, config.next_id = _advance(
        config.nodes, config.lefts, config.root, config.next_id,
        us, vs, ties, config.alphas, config.counts, chosen, chosen_len,
    )
    if config.mode == "poissonized" and Es is not None:
        # next event at t' = log(e^t + E)
        config.exp_t += float(np.sum(Es))
    return chosen, chosen_len


def _open_unit(rng, size=None):
    """Uniform draws in the open interval (0, 1)."""
    return rng.random(size) + 2.0**-54


def split_at(config, u, v, tie=0.0):
    """Deterministic step: select by quantile ``u``, split at fraction ``v``."""
    if not 0.0 < v < 1.0:
        raise ValueError("split fraction v must lie in (0, 1)")
    nid = config.next_id
    chosen, chosen_len = _apply(config, np.array([float(u)]), np.array([float(v)]), np.array([float(tie)]))
    t = int(chosen[0])
    return SplitEvent(t, float(chosen_len[0]), float(u), float(v), (t, nid), float(config.lefts[nid]))


def step(config, rule, rng):
    """One step of the process; draws ``u``, ``v`` and a tie-break uniform from ``rng``."""
    u = rule.sample(rng)
    v = float(_open_unit(rng))
    tie = float(rng.random())
    ev = split_at(config, u, v, tie)
    if config.mode == "poissonized":
        config.exp_t += float(rng.exponential())
    return ev


# ---------------------------------------------------------------------------
# runs


@dataclass
class Snapshot:
    step: int
    n_points: int
    fractions: np.ndarray  # N^alpha / n_points per alpha
    cdf: StepCDF | None


@dataclass
class FragStats:
    rule: str
    alphas: np.ndarray
    snapshots: list
    config: IntervalConfig

    @property
    def final_fractions(self):
        return self.snapshots[-1].fractions


def snapshot_schedule(n_steps, count):
    """``count`` roughly geometric step counts ending at ``n_steps``."""
    if count <= 0:
        return np.array([], dtype=np.int64)
    s = np.unique(np.round(np.geomspace(1, n_steps, count)).astype(np.int64))
    return s[s >= 1]


def run(config, rule, n_steps, rng, snapshots=None, keep_cdfs=True):
    """Advance ``config`` by ``n_steps`` steps, recording snapshots.

    Random draws are taken in blocks of ``BLOCK`` steps (all ``u`` of the
    block, then ``v``, then tie-break uniforms, then exponential clocks in
    poissonized mode), so results depend on the seed only, not on the
    snapshot schedule.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    marks = sorted(set(int(s) for s in (snapshots if snapshots is not None else [n_steps])))
    if marks and (marks[0] < 1 or marks[-1] > n_steps):
        raise ValueError("snapshot steps must lie in [1, n_steps]")
    config.reserve(n_steps)
    out = []
    done = 0
    mi = 0
    while done < n_steps:
        b = min(BLOCK, n_steps - done)
        us = np.asarray(rule.sample(rng, b), dtype=float)
        vs = _open_unit(rng, b)
        ties = rng.random(b)
        Es = rng.exponential(size=b) if config.mode == "poissonized" else None
        pos = 0
        while pos < b:
            stop = b
            if mi < len(marks):
                stop = min(stop, pos + marks[mi] - done)
            _apply(config, us[pos:stop], vs[pos:stop], ties[pos:stop],
                   None if Es is None else Es[pos:stop])
            done += stop - pos
            pos = stop
            if mi < len(marks) and done == marks[mi]:
                out.append(_snapshot(config, done, keep_cdfs))
                mi += 1
    return FragStats(str(rule), config.alphas.copy(), out, config)


def _snapshot(config, step_no, keep_cdf):
    n = max(config.n_points, 1)
    frac = config.counts / n
    return Snapshot(step_no, config.n_points, frac, rescaled_size_biased(config) if keep_cdf else None)


def rescaled_size_biased(config, alpha=None):
    """``A(x) = Atilde(scale * x)``: atoms at ``scale * length`` of mass ``length``.

    ``scale`` is ``n0 + n_points`` in discrete mode and ``e^t`` in
    poissonized mode.  With ``alpha`` each mass is weighted by the fraction
    of the interval inside ``[0, alpha]``.
    """
    ln = config.live_lengths
    if ln.size == 0:
        raise ValueError("empty configuration")
    w = None if alpha is None else alpha_fractions(config, alpha)
    F = size_biased_cdf(ln, w)
    return StepCDF(F.x * config.scale, F.m)


def alpha_fractions(config, alpha):
    """``|I ∩ [0, alpha]| / |I|`` for every live interval."""
    return np.clip((alpha - config.live_lefts) / config.live_lengths, 0.0, 1.0)


def points_in(config, alpha):
    """Points in [0, alpha] counting 0 and the initial cuts."""
    return int(np.sum(config.live_lefts <= alpha))


# ---------------------------------------------------------------------------
# drift of the size-biased process


def drift_estimate(config, rule, alpha, x, exact_straddler=False):
    """Expected one-step increment of ``Atilde^alpha(x)``.

    ``x^2 * sum_{z > x} (dAtilde^alpha / dAtilde)(z) * dPsi(Atilde)(z) / z``,
    where ``dPsi`` is the jump of ``Psi o Atilde`` at the atom ``z``.

    This compensator treats both children of a split as inheriting the
    parent's fraction ``g`` inside ``[0, alpha]``, which is exact except for
    the one interval straddling ``alpha``.  ``exact_straddler=True`` uses the
    true expected gain for that interval instead.
    """
    ln = config.live_lengths
    F = size_biased_cdf(ln)
    rn = rn_derivative_psi(F, rule)[np.searchsorted(F.x, ln)]
    g = alpha_fractions(config, alpha)
    big = ln > x
    if not exact_straddler:
        return float(x * x * np.sum(g[big] * rn[big]))
    lb, gb = ln[big], g[big]
    return float(np.sum(rn[big] * lb * lb * _straddle_gain(gb, x / lb)))


def _straddle_gain(g, c):
    """``E[gain] / length`` when an interval with fraction g is split, for c = x / length < 1.

    Left child ``[0, v)`` keeps ``min(v, g)``, right child keeps
    ``max(0, g - v)``; each counts only when its length is at most ``c``.
    """
    g = np.asarray(g, dtype=float)
    c = np.asarray(c, dtype=float)
    left = np.where(c <= g, 0.5 * c * c, 0.5 * g * g + g * (c - g))
    over = np.maximum(g - (1.0 - c), 0.0)
    return left + 0.5 * over * over


def size_biased_alpha(config, alpha, x):
    """``Atilde^alpha(x) = sum_i |I_i ∩ [0, alpha]| 1[|I_i| <= x]``."""
    ln = config.live_lengths
    g = alpha_fractions(config, alpha)
    return float(np.sum((ln * g)[ln <= x]))


@njit(cache=True)
def _Psi(kind, k, u):
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    if kind == 1:
        return u**k
    if kind == 2:
        return 1.0 - (1.0 - u) ** k
    return u


@njit(cache=True)
def _drift_and_level(nd, lf, n, kind, k, xs, alphas, exact, drift, level):
    """Drift and current level of Atilde^alpha(x) for every (x, alpha) pair."""
    ln = np.empty(n)
    for m in range(n):
        ln[m] = nd[m].ln
    order = np.argsort(ln)
    rn = np.empty(n)
    cum = 0.0
    i = 0
    while i < n:
        j = i
        mass = 0.0
        while j < n and ln[order[j]] == ln[order[i]]:
            mass += ln[order[j]]
            j += 1
        prev = min(cum, 1.0)
        cum += mass
        r = (_Psi(kind, k, min(cum, 1.0)) - _Psi(kind, k, prev)) / mass
        for m in range(i, j):
            rn[order[m]] = r
        i = j
    for a in range(alphas.size):
        for b in range(xs.size):
            x = xs[b]
            d = 0.0
            lev = 0.0
            for m in range(n):
                g = (alphas[a] - lf[m]) / ln[m]
                g = min(max(g, 0.0), 1.0)
                if ln[m] > x:
                    if exact and 0.0 < g < 1.0:
                        c = x / ln[m]
                        if c <= g:
                            gain = 0.5 * c * c
                        else:
                            gain = 0.5 * g * g + g * (c - g)
                        over = max(g - (1.0 - c), 0.0)
                        gain += 0.5 * over * over
                        d += rn[m] * ln[m] * ln[m] * gain
                    else:
                        d += g * rn[m] * x * x
                else:
                    lev += ln[m] * g
            drift[a, b] = d
            level[a, b] = lev


@dataclass
class MartingaleReport:
    xs: np.ndarray
    alphas: np.ndarray
    mean: np.ndarray  # (alpha, x) mean of the compensated increment
    stderr: np.ndarray
    replicas: int

    @property
    def z(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.mean / self.stderr

    def passes(self, sigmas=4.0, atol=1e-12):
        """``|mean| <= sigmas * stderr + atol`` everywhere.

        ``atol`` covers cells where the increment is deterministic zero and
        the standard error is pure roundoff.
        """
        return bool(np.all(np.abs(self.mean) <= sigmas * self.stderr + atol))

    def max_abs_z(self, atol=1e-12):
        """Largest ``|z|`` over cells whose increment is not deterministic."""
        noisy = self.stderr > atol
        return float(np.max(np.abs(self.z[noisy]))) if noisy.any() else 0.0


def martingale_experiment(rule, cut_points, n_steps, replicas, xs, alphas, seed,
                          exact_straddler=False):
    """Replicated check that Atilde^alpha(x) minus its summed drift is a martingale.

    Each replica contributes ``Atilde^alpha_T(x) - Atilde^alpha_0(x) - sum of
    per-step drift``; the report holds the mean and standard error over
    replicas.  Supports the uniform, max and min rule kinds.
    """
    if rule.kind not in _KIND_CODES:
        raise ValueError(f"martingale experiment supports uniform/max/min rules, not {rule.kind}")
    kind, k = _KIND_CODES[rule.kind], float(rule.k)
    xs = np.asarray(xs, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    vals = np.empty((replicas, alphas.size, xs.size))
    for r in range(replicas):
        rng = substream(seed, r)
        cfg = init_config(cut_points, capacity=len(cut_points) + 1 + n_steps)
        us = np.asarray(rule.sample(rng, n_steps), dtype=float)
        vs = _open_unit(rng, n_steps)
        ties = rng.random(n_steps)
        vals[r] = _martingale_kernel(cfg.nodes, cfg.lefts, cfg.root, cfg.next_id, kind, k,
                                     xs, alphas, bool(exact_straddler), us, vs, ties)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(replicas)
    return MartingaleReport(xs, alphas, mean, se, replicas)


@njit(cache=True)
def _martingale_kernel(nd, lf, root, next_id, kind, k, xs, alphas, exact, us, vs, ties):
    no_alpha = np.empty(0)
    counts = np.zeros(0, dtype=np.int64)
    chosen = np.empty(1, dtype=np.int64)
    chosen_len = np.empty(1)
    drift = np.empty((alphas.size, xs.size))
    level = np.empty((alphas.size, xs.size))
    _drift_and_level(nd, lf, next_id, kind, k, xs, alphas, exact, drift, level)
    start = level.copy()
    acc = np.zeros_like(level)
    for s in range(us.size):
        _drift_and_level(nd, lf, next_id, kind, k, xs, alphas, exact, drift, level)
        acc += drift
        root, next_id = _advance(nd, lf, root, next_id, us[s:s + 1], vs[s:s + 1],
                                 ties[s:s + 1], no_alpha, counts, chosen, chosen_len)
    _drift_and_level(nd, lf, next_id, kind, k, xs, alphas, exact, drift, level)
    return level - start - acc
