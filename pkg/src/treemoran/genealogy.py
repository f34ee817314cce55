"""Ancestral lines, ancestor counts, descendant frequencies, and the dominating
birth--death process.

Ancestry is reconstructed from a completed event log by a backward scan: a
line sitting on the victim of a replacement jumps to the parent.  Queries are
evaluated "just after" the lookback time s, i.e. replacement events at times
u with s < u <= t are applied.

The dominating process J jumps j -> j+1 at rate j*alpha and j -> j-1 at rate
gamma * j(j-1)/2; its running minimum J* bounds the number of ancestors of
any j sampled individuals stochastically.  The mean number of ancestors of
the whole population over a lookback window is bounded by the logistic-ODE
solution exposed as ``ancestor_mean_bound``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import EventLog

__all__ = [
    "JPath",
    "ancestor_count_curve",
    "trace_ancestor",
    "ancestor_count",
    "descendant_frequency",
    "simulate_J",
    "ancestor_mean_bound",
    "simulate_frequency_sde",
    "replacement_arrays",
    "trace_ancestors_arrays",
]


def replacement_arrays(log: EventLog):
    """Flat (times, parents, victims) arrays of the replacement events of a log."""
    ts, ps, vs = [], [], []
    for ev in log:
        if ev.kind == "R":
            ts.append(ev.time)
            ps.append(ev.parent)
            vs.append(ev.victim)
    return np.asarray(ts), np.asarray(ps, dtype=np.int64), np.asarray(vs, dtype=np.int64)


def _check_window(log: EventLog, s: float, t: float) -> None:
    # The log records events from t0 on; times past the last event are fine
    # (no events to apply there), times before t0 are not covered.
    if s > t:
        raise ValueError("need s <= t")
    if s < log.t0:
        raise ValueError(f"lookback {s} before log start {log.t0}")


def trace_ancestors_arrays(
    times: np.ndarray,
    parents: np.ndarray,
    victims: np.ndarray,
    lines: np.ndarray,
    t: float,
    s: float,
) -> np.ndarray:
    """Backward-trace several lines at once over replacement event arrays.

    Applies events with time u in (s, t], newest first; all lines currently
    on the victim jump to the parent.
    """
    pos = np.asarray(lines, dtype=np.int64).copy()
    lo = int(np.searchsorted(times, s, side="right"))
    hi = int(np.searchsorted(times, t, side="right"))
    for e in range(hi - 1, lo - 1, -1):
        v = victims[e]
        hit = pos == v
        if hit.any():
            pos[hit] = parents[e]
    return pos


def ancestor_count_curve(
    times: np.ndarray,
    parents: np.ndarray,
    victims: np.ndarray,
    N: int,
    t: float,
    s_grid: np.ndarray,
) -> np.ndarray:
    """Number of distinct time-s ancestors of the whole population, for each s.

    Sweeps the replacement events backward once, maintaining occupancy counts
    (all lines sitting on a victim hop to the parent), and records the
    running number of occupied individuals at each lookback time.  The grid
    must be sorted increasing; counts are returned in the same order.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    order = np.argsort(times)
    times = np.asarray(times)[order]
    parents = np.asarray(parents)[order]
    victims = np.asarray(victims)[order]
    hi = int(np.searchsorted(times, t, side="right"))
    cnt = np.ones(N, dtype=np.int64)
    distinct = N
    out = np.empty(s_grid.size, dtype=np.int64)
    gi = s_grid.size - 1
    e = hi - 1
    while gi >= 0:
        s = s_grid[gi]
        while e >= 0 and times[e] > s:
            v = victims[e]
            p = parents[e]
            c = cnt[v]
            if c > 0:
                if cnt[p] > 0:
                    distinct -= 1
                cnt[p] += c
                cnt[v] = 0
            e -= 1
        out[gi] = distinct
        gi -= 1
    return out


def trace_ancestor(log: EventLog, l: int, t: float, s: float) -> int:
    """Index of the time-s ancestor of individual l alive at time t."""
    _check_window(log, s, t)
    if not 0 <= l < log.N:
        raise IndexError(f"individual {l} out of range for N={log.N}")
    times, parents, victims = replacement_arrays(log)
    return int(trace_ancestors_arrays(times, parents, victims, np.array([l]), t, s)[0])


def ancestor_count(log: EventLog, s: float, t: float, subset: Optional[Sequence] = None) -> int:
    """Number of distinct time-s ancestors of ``subset`` (default: everyone) at time t."""
    _check_window(log, s, t)
    lines = np.arange(log.N) if subset is None else np.asarray(list(subset), dtype=np.int64)
    if lines.size == 0:
        return 0
    times, parents, victims = replacement_arrays(log)
    anc = trace_ancestors_arrays(times, parents, victims, lines, t, s)
    return int(np.unique(anc).size)


def descendant_frequency(log: EventLog, V: Iterable, s: float, t: float) -> float:
    """Fraction of the time-t population whose time-s ancestor lies in V."""
    _check_window(log, s, t)
    vset = np.zeros(log.N, dtype=bool)
    for v in V:
        vset[v] = True
    times, parents, victims = replacement_arrays(log)
    anc = trace_ancestors_arrays(times, parents, victims, np.arange(log.N), t, s)
    return float(vset[anc].sum() / log.N)


@dataclass
class JPath:
    """Piecewise-constant path of the dominating birth--death process.

    ``times[i]`` is the i-th jump time, ``values[i]`` the value from then on;
    values[0] holds from times[0] = 0.  ``running_min(u)`` evaluates J*_u.
    """

    times: np.ndarray
    values: np.ndarray

    def value_at(self, u: float) -> int:
        i = int(np.searchsorted(self.times, u, side="right")) - 1
        return int(self.values[i])

    def running_min(self, u: float) -> int:
        i = int(np.searchsorted(self.times, u, side="right"))
        return int(self.values[:i].min())


def simulate_J(
    j0: int, horizon: float, gamma: float, alpha: float, rng: np.random.Generator
) -> JPath:
    """Exact jump path of J on [0, horizon], started at j0.

    Up-rate j*alpha, down-rate gamma*j(j-1)/2.  At alpha = 0 the state 1 is
    absorbing and the path is cut short there.
    """
    if j0 < 1:
        raise ValueError("j0 must be >= 1")
    t = 0.0
    j = j0
    times = [0.0]
    values = [j0]
    while True:
        up = j * alpha
        down = gamma * j * (j - 1) / 2.0
        total = up + down
        if total <= 0.0:
            break
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        j = j + 1 if rng.random() * total < up else j - 1
        times.append(t)
        values.append(j)
    return JPath(np.asarray(times), np.asarray(values, dtype=np.int64))


def ancestor_mean_bound(N, delta: float, gamma: float, alpha: float) -> float:
    """Logistic bound on E[number of time-(t-delta) ancestors of all N individuals].

    Evaluates (gamma+2alpha) e^{(gamma/2+alpha) delta} N /
    (2alpha + gamma + gamma (e^{(gamma/2+alpha) delta} - 1) N); pass
    N = math.inf for the displayed large-population limit.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    e = math.exp((gamma / 2.0 + alpha) * delta)
    if math.isinf(N):
        return (gamma + 2 * alpha) * e / (gamma * (e - 1.0))
    if N < 1:
        raise ValueError("N must be >= 1")
    return (gamma + 2 * alpha) * e * N / (2 * alpha + gamma + gamma * (e - 1.0) * N)


def simulate_frequency_sde(
    x0: float,
    horizon: float,
    gamma: float,
    alpha: float,
    rng: np.random.Generator,
    n_paths: int = 1,
    dt: float = 1e-3,
) -> np.ndarray:
    """Euler--Maruyama endpoint samples of dX = alpha X(1-X) dt + sqrt(gamma X(1-X)) dW.

    Reflecting clamp to [0, 1] after each step; the comparison oracle for
    descendant-frequency paths.  Returns the n_paths values X_horizon.
    """
    steps = int(round(horizon / dt))
    x = np.full(n_paths, float(x0))
    for _ in range(steps):
        drift = alpha * x * (1.0 - x)
        diff = np.sqrt(np.maximum(gamma * x * (1.0 - x), 0.0))
        x = x + drift * dt + diff * math.sqrt(dt) * rng.standard_normal(n_paths)
        np.clip(x, 0.0, 1.0, out=x)
    return x
