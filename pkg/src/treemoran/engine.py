"""Exact event-driven simulation of the Moran dynamics.

Mechanisms and proposal rates (all state-independent, which keeps the clocks
homogeneous):

  resampling   every ordered pair (k, l), k != l, at rate gamma/2
               -> total gamma * N(N-1)/2
  mutation     every individual at rate theta -> total theta * N
  selection    haploid: ordered pairs at alpha/N -> total alpha*(N-1)
               diploid/distance: ordered pairwise-distinct triples at
               alpha/N^2 -> total alpha*N(N-1)(N-2)/N^2

Selection proposals are thinned: a haploid proposal (k, l) is accepted with
probability chi(u_k), a diploid/distance proposal (k, l, m) with probability
chi'(u_k, u_m) resp. chi'(u_k, u_m, r(k, m)).  Upon acceptance the victim l
becomes a copy of the parent k, exactly as in a resampling event.

The engine runs three independent event streams (resampling, mutation,
selection) plus an observation stream, all derived from one master seed.
Because the per-category rates are constant, each stream is a homogeneous
Poisson process and an alpha = 0 run never touches the selection stream;
coupled runs that share a master seed therefore see identical resampling and
mutation histories (common random numbers).

Every accepted event is appended to an ``EventLog`` which can be serialized
to a line-oriented text format and replayed bit-exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .model import (
    ModelParams,
    PopulationState,
    VARIANT_HAPLOID,
    VARIANT_NEUTRAL,
)

__all__ = [
    "Replacement",
    "Mutation",
    "EventLog",
    "RateTable",
    "Proposal",
    "total_rates",
    "draw_event",
    "apply_replacement",
    "apply_mutation",
    "MoranEngine",
    "run_until",
    "replay",
    "save_log",
    "load_log",
]

CAUSE_RESAMPLING = "res"
CAUSE_SELECTION = "sel"


def seed_sequence(seed) -> np.random.SeedSequence:
    """SeedSequence from an int or a mixed tuple (strings hashed to ints).

    Replicates derive their streams as ``seed_sequence((master, label, i))``,
    which is the deterministic per-replicate seed discipline used throughout.
    """
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        parts = []
        for p in seed:
            if isinstance(p, str):
                parts.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "little"))
            else:
                parts.append(int(p))
        return np.random.SeedSequence(parts)
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class Replacement:
    time: float
    parent: int
    victim: int
    cause: str
    partner: Optional[int] = None  # diploid fitness partner, metadata only

    kind = "R"


@dataclass(frozen=True)
class Mutation:
    time: float
    individual: int
    new_type: int

    kind = "M"


@dataclass
class EventLog:
    N: int
    t0: float = 0.0
    events: List = field(default_factory=list)

    def append(self, ev) -> None:
        self.events.append(ev)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def horizon(self) -> float:
        return self.events[-1].time if self.events else self.t0


@dataclass(frozen=True)
class RateTable:
    resampling_total: float
    mutation_total: float
    selection_proposal_total: float

    @property
    def total(self) -> float:
        return self.resampling_total + self.mutation_total + self.selection_proposal_total


@dataclass(frozen=True)
class Proposal:
    kind: str  # "res" | "mut" | "sel"
    k: int = -1
    l: int = -1
    m: int = -1  # diploid partner, -1 if absent


def total_rates(state: PopulationState, params: ModelParams) -> RateTable:
    """Total proposal rates of the three mechanisms (thinning happens at apply time)."""
    N = state.N
    res = params.gamma * N * (N - 1) / 2.0
    mut = params.mutation.rate * N
    if params.alpha == 0.0 or params.fitness.variant == VARIANT_NEUTRAL:
        sel = 0.0
    elif params.fitness.variant == VARIANT_HAPLOID:
        sel = params.alpha * (N - 1)
    else:
        sel = params.alpha * N * (N - 1) * (N - 2) / N**2
    return RateTable(res, mut, sel)


# -- uniform decoding helpers (shared with the numba fast path, keep in sync) --


def _decode_pair(u: float, N: int) -> Tuple[int, int]:
    """Uniform ordered pair (k, l), k != l, from one uniform."""
    i = int(u * N * (N - 1))
    k = i // (N - 1)
    j = i % (N - 1)
    l = j + (1 if j >= k else 0)
    return k, l

def _decode_triple(u: float, N: int) -> Tuple[int, int, int]:
    """Uniform ordered pairwise-distinct triple (k, l, m) from one uniform."""
    i = int(u * N * (N - 1) * (N - 2))
    a = i // ((N - 1) * (N - 2))
    rem = i % ((N - 1) * (N - 2))
    b = rem // (N - 2)
    c = rem % (N - 2)
    k = a
    l = b + (1 if b >= k else 0)
    lo, hi = (k, l) if k < l else (l, k)
    m = c + (1 if c >= lo else 0)
    m = m + (1 if m >= hi else 0)
    return k, l, m

def _categorical(cdf: np.ndarray, u: float) -> int:
    v = 0
    last = cdf.size - 1
    while v < last and u >= cdf[v]:
        v += 1
    return v

def _exp_time(u: float, rate: float) -> float:
    return -math.log1p(-u) / rate


def draw_event(state: PopulationState, params: ModelParams, rng: np.random.Generator):
    """Draw (dt, proposal) with dt ~ Exp(total proposal rate).

    The proposal is chosen proportionally to the category rates and carries
    the sampled individuals before thinning.  If every rate is zero, returns
    (inf, None): the population is frozen and the caller advances time
    deterministically.
    """
    rates = total_rates(state, params)
    R = rates.total
    if R <= 0.0:
        return math.inf, None
    dt = _exp_time(rng.random(), R)
    u = rng.random() * R
    if u < rates.resampling_total:
        k, l = _decode_pair(rng.random(), state.N)
        return dt, Proposal("res", k, l)
    if u < rates.resampling_total + rates.mutation_total:
        k = int(rng.random() * state.N)
        return dt, Proposal("mut", k)
    if params.fitness.variant == VARIANT_HAPLOID:
        k, l = _decode_pair(rng.random(), state.N)
        return dt, Proposal("sel", k, l)
    k, l, m = _decode_triple(rng.random(), state.N)
    return dt, Proposal("sel", k, l, m)


def apply_replacement(state: PopulationState, k: int, l: int) -> None:
    """Victim l becomes a copy of parent k at the current time.

    Copies type and MRCA row/column, then pins mrca[k, l] to the current time:
    from now on r(k, l) = 2(t - t_event) grows from zero.
    """
    if k == l:
        raise ValueError("parent and victim must differ")
    t = state.t
    mrca = state.mrca
    state.types[l] = state.types[k]
    mrca[l, :] = mrca[k, :]
    mrca[:, l] = mrca[:, k]
    mrca[k, l] = t
    mrca[l, k] = t
    mrca[l, l] = t


def apply_mutation(
    state: PopulationState, k: int, params: ModelParams, rng: np.random.Generator
) -> int:
    """Redraw the type of individual k from the mutation kernel; returns the new type.

    The new type may equal the old one (kernels may carry diagonal mass).
    Distances are untouched.
    """
    kern = params.mutation
    u_z = rng.random()
    u_v = rng.random()
    v = _mutation_target(kern, int(state.types[k]), u_z, u_v)
    state.types[k] = v
    return v


def _mutation_target(kern, current: int, u_z: float, u_v: float) -> int:
    bar_cdf = np.cumsum(kern.bar_beta)
    tilde_cdf = np.cumsum(kern.tilde_beta, axis=1)
    if u_z < kern.z:
        return _categorical(bar_cdf, u_v)
    return _categorical(tilde_cdf[current], u_v)


class MoranEngine:
    """One sequential simulation instance.

    Replicates should be separate instances with independently derived seeds
    (e.g. ``seed=(master, replicate_index)``); the four internal streams are
    spawned from that seed in the fixed order resampling, mutation,
    selection, observation.
    """

    def __init__(self, state: PopulationState, params: ModelParams, seed, record_log: bool = True):
        if params.N != state.N:
            raise ValueError("params.N and state.N disagree")
        self.state = state
        self.params = params
        children = seed_sequence(seed).spawn(4)
        self.rng_res = np.random.Generator(np.random.PCG64(children[0]))
        self.rng_mut = np.random.Generator(np.random.PCG64(children[1]))
        self.rng_sel = np.random.Generator(np.random.PCG64(children[2]))
        self.rng_obs = np.random.Generator(np.random.PCG64(children[3]))
        self.rates = total_rates(state, params)
        self.log = EventLog(N=state.N, t0=state.t) if record_log else None
        # mutation kernel cdfs, precomputed once
        self._bar_cdf = np.cumsum(params.mutation.bar_beta)
        self._tilde_cdf = np.cumsum(params.mutation.tilde_beta, axis=1)
        # absolute next-arrival times per stream
        self._next_res = self._arm(self.rng_res, self.rates.resampling_total)
        self._next_mut = self._arm(self.rng_mut, self.rates.mutation_total)
        self._next_sel = self._arm(self.rng_sel, self.rates.selection_proposal_total)

    def _arm(self, rng, rate: float, now: Optional[float] = None) -> float:
        if rate <= 0.0:
            return math.inf
        base = self.state.t if now is None else now
        return base + _exp_time(rng.random(), rate)

    def run_until(self, t_end: float, observers: Iterable = ()) -> PopulationState:
        """Advance the state to exactly t_end, applying and logging every accepted event."""
        state = self.state
        if t_end < state.t:
            raise ValueError("t_end lies in the past")
        observers = tuple(observers)
        fit = self.params.fitness
        haploid = fit.variant == VARIANT_HAPLOID
        neutral = fit.variant == VARIANT_NEUTRAL
        while True:
            t_next = min(self._next_res, self._next_mut, self._next_sel)
            if t_next > t_end:
                break
            ev = None
            if t_next == self._next_res:
                state.t = t_next
                k, l = _decode_pair(self.rng_res.random(), state.N)
                apply_replacement(state, k, l)
                ev = Replacement(t_next, k, l, CAUSE_RESAMPLING)
                self._next_res = self._arm(self.rng_res, self.rates.resampling_total, t_next)
            elif t_next == self._next_mut:
                state.t = t_next
                k = int(self.rng_mut.random() * state.N)
                u_z = self.rng_mut.random()
                u_v = self.rng_mut.random()
                cur = int(state.types[k])
                if u_z < self.params.mutation.z:
                    v = _categorical(self._bar_cdf, u_v)
                else:
                    v = _categorical(self._tilde_cdf[cur], u_v)
                state.types[k] = v
                ev = Mutation(t_next, k, v)
                self._next_mut = self._arm(self.rng_mut, self.rates.mutation_total, t_next)
            else:
                state.t = t_next
                if neutral:
                    raise AssertionError("selection stream fired with neutral fitness")
                if haploid:
                    k, l = _decode_pair(self.rng_sel.random(), state.N)
                    m = -1
                    p_acc = fit.acceptance(int(state.types[k]), None, 0.0)
                else:
                    k, l, m = _decode_triple(self.rng_sel.random(), state.N)
                    r_km = 2.0 * (state.t - state.mrca[k, m])
                    p_acc = fit.acceptance(int(state.types[k]), int(state.types[m]), r_km)
                u_acc = self.rng_sel.random()
                if u_acc < p_acc:
                    apply_replacement(state, k, l)
                    ev = Replacement(t_next, k, l, CAUSE_SELECTION, None if m < 0 else m)
                self._next_sel = self._arm(self.rng_sel, self.rates.selection_proposal_total, t_next)
            if ev is not None:
                if self.log is not None:
                    self.log.append(ev)
                for obs in observers:
                    obs(t_next, ev, state)
        state.t = t_end
        return state


def run_until(
    state: PopulationState,
    t_end: float,
    params: ModelParams,
    seed,
    observers: Iterable = (),
    record_log: bool = True,
):
    """Convenience wrapper: build an engine, run it, return (state, log)."""
    eng = MoranEngine(state, params, seed, record_log=record_log)
    eng.run_until(t_end, observers)
    return state, eng.log


def replay(log: EventLog, initial: PopulationState) -> PopulationState:
    """Re-apply a log to a copy of the initial state; reproduces the final state bit-exactly."""
    state = initial.copy()
    if state.t != log.t0:
        raise ValueError("initial state time does not match log t0")
    for ev in log:
        state.t = ev.time
        if ev.kind == "R":
            apply_replacement(state, ev.parent, ev.victim)
        else:
            state.types[ev.individual] = ev.new_type
    return state


# -- log text format: one event per line, `t kind args...` ---------------------


def save_log(log: EventLog, path) -> None:
    with open(path, "w") as fh:
        fh.write("# treemoran-eventlog v1\n")
        fh.write(f"# N={log.N}\n")
        fh.write(f"# t0={log.t0!r}\n")
        for ev in log:
            if ev.kind == "R":
                part = "" if ev.partner is None else f" {ev.partner}"
                fh.write(f"{ev.time!r} R {ev.parent} {ev.victim} {ev.cause}{part}\n")
            else:
                fh.write(f"{ev.time!r} M {ev.individual} {ev.new_type}\n")


def load_log(path) -> EventLog:
    N = None
    t0 = 0.0
    events = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("N="):
                    N = int(body[2:])
                elif body.startswith("t0="):
                    t0 = float(body[3:])
                continue
            parts = line.split()
            t = float(parts[0])
            if parts[1] == "R":
                partner = int(parts[5]) if len(parts) > 5 else None
                events.append(Replacement(t, int(parts[2]), int(parts[3]), parts[4], partner))
            elif parts[1] == "M":
                events.append(Mutation(t, int(parts[2]), int(parts[3])))
            else:
                raise ValueError(f"unknown event kind {parts[1]!r}")
    if N is None:
        raise ValueError("log file missing '# N=' header")
    return EventLog(N=N, t0=t0, events=events)
