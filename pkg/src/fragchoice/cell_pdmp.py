"""The cell process: exponential growth ``x e^t`` interrupted by jumps.

From state ``z`` the next jump comes after time ``tau`` with survivor
function ``S_z(t) = exp(-(rho(z e^t) - rho(z)))`` and multiplies the state
by ``J = sqrt(U)`` (density ``2u`` on (0, 1)).  Jump times are drawn by
inverting the survivor function exactly through the tabulated ``rho``, so
there is no time discretisation anywhere.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .frag_sim import substream
from .measures import GridCDF

X_FLOOR = 1e-12
MAX_JUMPS = 1_000_000
ENSEMBLE_BLOCK = 1 << 14


def survivor(R, z, t):
    """``P(no jump in [0, t])`` from state ``z``."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(z <= 0) or np.any(t < 0):
        raise ValueError("need z > 0 and t >= 0")
    out = np.exp(-(R.rho(z * np.exp(t)) - R.rho(z)))
    return out[()] if out.ndim == 0 else out


def jump_time_from_clock(R, z, E):
    """Invert the survivor function: the time at which ``rho`` has grown by ``E``.

    ``inf`` where the remaining integral ``rho_sup - rho(z)`` is at most ``E``.
    """
    z = np.asarray(z, dtype=float)
    E = np.asarray(E, dtype=float)
    rz = R.rho(z)
    target = rz + E
    never = (R.rho_sup - rz) <= E
    safe = np.where(never, rz, target)
    out = np.where(never, np.inf, np.log(np.maximum(R.rho_inverse(safe), z) / z))
    return out[()] if out.ndim == 0 else out


def sample_jump_time(R, z, rng):
    """One draw of the next jump time from ``z``; may be ``inf``."""
    return float(jump_time_from_clock(R, z, rng.exponential()))


@dataclass
class CellPath:
    x0: float
    horizon: float
    times: np.ndarray  # jump times tau_k
    factors: np.ndarray  # J_k
    values: np.ndarray  # Y_k after the k-th jump (values[0] = x0)
    absorbed: bool = False
    exploded: bool = False
    zeta: float = math.inf  # absorption time estimate when absorbed

    @property
    def n_jumps(self):
        return self.times.size

    def segment_starts(self):
        return np.concatenate(([0.0], self.times))

    def value_at(self, t):
        """``X_t = Y_k e^{t - tau_k}`` on ``[tau_k, tau_{k+1})``."""
        t = np.asarray(t, dtype=float)
        starts = self.segment_starts()
        k = np.searchsorted(starts, t, side="right") - 1
        out = self.values[k] * np.exp(t - starts[k])
        return out[()] if out.ndim == 0 else out


def simulate_path(R, x0, T, rng, max_jumps=MAX_JUMPS, x_floor=X_FLOOR):
    """One trajectory on ``[0, T]``; each jump draws ``E`` then ``U``."""
    if x0 <= 0 or T < 0:
        raise ValueError("need x0 > 0 and T >= 0")
    times, factors, values = [], [], [float(x0)]
    t, y = 0.0, float(x0)
    absorbed = exploded = False
    zeta = math.inf
    while True:
        tau = sample_jump_time(R, y, rng)
        if math.isinf(tau):
            exploded = True
            break
        if t + tau > T:
            break
        J = math.sqrt(rng.random())
        t += tau
        y = y * math.exp(tau) * J
        times.append(t)
        factors.append(J)
        values.append(y)
        if y < x_floor or len(times) >= max_jumps:
            absorbed, zeta = True, t
            break
    return CellPath(float(x0), float(T), np.array(times), np.array(factors), np.array(values),
                    absorbed, exploded, zeta)


@dataclass
class Ensemble:
    samples: np.ndarray  # X_T; nan for absorbed paths
    jumps: np.ndarray
    absorbed: np.ndarray
    exploded: np.ndarray

    @property
    def n_absorbed(self):
        return int(self.absorbed.sum())

    @property
    def n_exploded(self):
        return int(self.exploded.sum())

    def finite_samples(self):
        return self.samples[~self.absorbed]


def _init_sampler(init):
    if callable(getattr(init, "sample", None)):
        return lambda rng, n: np.asarray(init.sample(rng, n), dtype=float)
    if isinstance(init, GridCDF):
        def draw(rng, n):
            U = np.minimum(1.0 - rng.random(n), init.values[-1])
            return np.asarray(init.inverse(U), dtype=float)
        return draw
    if callable(init):
        return init
    x = float(init)
    if x <= 0:
        raise ValueError("initial point must be positive")
    return lambda rng, n: np.full(n, x)


def _run_block(R, draw, T, n, rng, max_jumps, x_floor):
    y = draw(rng, n)
    t = np.zeros(n)
    jumps = np.zeros(n, dtype=np.int64)
    absorbed = np.zeros(n, dtype=bool)
    exploded = np.zeros(n, dtype=bool)
    out = np.full(n, np.nan)
    active = np.arange(n)
    if T == 0:
        return y.copy(), jumps, absorbed, exploded
    while active.size:
        E = rng.exponential(size=active.size)
        U = rng.random(active.size)
        tau = np.asarray(jump_time_from_clock(R, y[active], E), dtype=float)
        done = t[active] + tau > T
        fin = active[done]
        out[fin] = y[fin] * np.exp(T - t[fin])
        exploded[fin] = np.isinf(tau[done])
        go = ~done
        idx = active[go]
        tg = tau[go]
        t[idx] += tg
        y[idx] = y[idx] * np.exp(tg) * np.sqrt(U[go])
        jumps[idx] += 1
        dead = (y[idx] < x_floor) | (jumps[idx] >= max_jumps)
        absorbed[idx[dead]] = True
        active = idx[~dead]
    return out, jumps, absorbed, exploded


def marginal_ensemble(R, init, T, M, seed, max_jumps=MAX_JUMPS, x_floor=X_FLOOR,
                      threads=1, block=ENSEMBLE_BLOCK):
    """``M`` independent values of ``X_T``.

    ``init`` is a point, a GridCDF, or anything with ``sample(rng, n)``.
    Paths are simulated in blocks of ``block``; block ``b`` uses
    ``substream(seed, b)``, so the output does not depend on ``threads``.
    Within a block each round draws the exponential clocks then the jump
    uniforms for all paths still running.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if T < 0:
        raise ValueError("T must be >= 0")
    draw = _init_sampler(init)
    sizes = [min(block, M - s) for s in range(0, M, block)]

    def work(b):
        return _run_block(R, draw, T, sizes[b], substream(seed, b), max_jumps, x_floor)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, range(len(sizes))))
    else:
        parts = [work(b) for b in range(len(sizes))]
    cols = [np.concatenate([p[i] for p in parts]) for i in range(4)]
    return Ensemble(*cols)


def hitting_time(R, y0, x_target, rng, T_max):
    """First ``t > 0`` with ``X_t = x_target`` from ``X_0 = y0``.

    Returns ``(H, first_segment)``; ``H`` is ``inf`` on timeout.  Levels are
    only reached while flowing upward, so on the segment starting from
    ``Y_k`` the hit happens ``log(x_target / Y_k)`` after its start if that
    is before the next jump.  Starting exactly at the target does not count
    as a hit at time 0.
    """
    if y0 <= 0 or x_target <= 0:
        raise ValueError("need positive levels")
    t, y, k = 0.0, float(y0), 0
    while t < T_max:
        tau = sample_jump_time(R, y, rng)
        if y < x_target or (k > 0 and y == x_target):
            dt = math.log(x_target / y)
            if dt < tau and t + dt <= T_max:
                return t + dt, k == 0
        if math.isinf(tau):
            break
        t += tau
        y = y * math.exp(tau) * math.sqrt(rng.random())
        k += 1
        if y < X_FLOOR:
            break
    return math.inf, False


def hitting_times(R, y0, x_target, M, seed, T_max):
    """``M`` hitting-time draws; replica ``i`` uses ``substream(seed, i)``."""
    H = np.empty(M)
    first = np.zeros(M, dtype=bool)
    for i in range(M):
        H[i], first[i] = hitting_time(R, y0, x_target, substream(seed, i), T_max)
    return H, first


def occupation_average(path, a, b):
    """Fraction of ``[0, T]`` with ``X_t`` in ``[a, b]``, exact per flow segment."""
    if not 0 <= a < b:
        raise ValueError("need 0 <= a < b")
    T = path.horizon if not path.absorbed else path.zeta
    if T <= 0:
        return float(a <= path.x0 <= b)
    starts = path.segment_starts()
    ends = np.append(path.times, T)
    Y = path.values[: starts.size]
    with np.errstate(divide="ignore"):
        lo = starts + np.log(a / Y)
    hi = starts + np.log(b / Y)
    inside = np.clip(np.minimum(hi, ends) - np.maximum(lo, starts), 0.0, None)
    return float(inside.sum() / T)
