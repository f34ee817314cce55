"""Numba-accelerated simulation path.

Same event discipline as ``engine.MoranEngine`` (three homogeneous Poisson
proposal streams plus an observation stream, fixed uniform consumption per
event), consuming pre-drawn uniform blocks so that a fast run is bit-exactly
the run the pure-Python engine would produce from the same seed.  Used by the
experiment drivers for long stationary runs; the pure engine remains the
reference implementation and contract surface.

Observation statistics computed in-kernel at scheduled times:

  * Laplace transform of the pair distance over a lambda grid (exact average
    over unordered pairs),
  * the nine two-type subtree-length moment estimators on random 4-tuples,
  * type frequency and mean pair distance,
  * marked Laplace average over ordered pairs (for the duality checks).

Accepted events can optionally be recorded into flat arrays (times, parent,
victim, kind, aux) for ancestry tracing at scale.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .model import (
    ModelParams,
    PopulationState,
    VARIANT_DIPLOID,
    VARIANT_DISTANCE,
    VARIANT_HAPLOID,
    VARIANT_NEUTRAL,
    PROFILE_CONSTANT,
    PROFILE_EXPONENTIAL,
)
from .engine import seed_sequence, total_rates

__all__ = ["FastSim"]

_STATUS_DONE = 0
_STATUS_RES = 1
_STATUS_MUT = 2
_STATUS_SEL = 3
_STATUS_OBS = 4
_STATUS_REC = 5

_BLOCK = 1 << 16


@njit(cache=True, inline="always")
def _decode_pair_nb(u, N):
    i = int(u * N * (N - 1))
    k = i // (N - 1)
    j = i % (N - 1)
    l = j + (1 if j >= k else 0)
    return k, l


@njit(cache=True, inline="always")
def _decode_triple_nb(u, N):
    i = int(u * N * (N - 1) * (N - 2))
    a = i // ((N - 1) * (N - 2))
    rem = i % ((N - 1) * (N - 2))
    b = rem // (N - 2)
    c = rem % (N - 2)
    k = a
    l = b + (1 if b >= k else 0)
    lo = k if k < l else l
    hi = l if k < l else k
    m = c + (1 if c >= lo else 0)
    m = m + (1 if m >= hi else 0)
    return k, l, m


@njit(cache=True, inline="always")
def _decode_quad_nb(u, N):
    M = N * (N - 1) * (N - 2) * (N - 3)
    i = int(u * M)
    i3 = (N - 1) * (N - 2) * (N - 3)
    a = i // i3
    rem = i % i3
    i2 = (N - 2) * (N - 3)
    b0 = rem // i2
    rem2 = rem % i2
    c0 = rem2 // (N - 3)
    d0 = rem2 % (N - 3)
    b = b0 + (1 if b0 >= a else 0)
    lo = a if a < b else b
    hi = b if a < b else a
    c = c0 + (1 if c0 >= lo else 0)
    c = c + (1 if c >= hi else 0)
    # insert d among the three sorted taken values
    s0 = a
    s1 = b
    s2 = c
    if s0 > s1:
        s0, s1 = s1, s0
    if s1 > s2:
        s1, s2 = s2, s1
    if s0 > s1:
        s0, s1 = s1, s0
    d = d0 + (1 if d0 >= s0 else 0)
    d = d + (1 if d >= s1 else 0)
    d = d + (1 if d >= s2 else 0)
    return a, b, c, d


@njit(cache=True, inline="always")
def _categorical_nb(cdf, u):
    v = 0
    last = cdf.shape[0] - 1
    while v < last and u >= cdf[v]:
        v += 1
    return v


@njit(cache=True, inline="always")
def _profile_nb(profile_code, decay_rate, step_breaks, step_values, r):
    if profile_code == 0:
        return 1.0
    if profile_code == 1:
        return math.exp(-decay_rate * r)
    idx = 0
    while idx < step_breaks.shape[0] and r > step_breaks[idx]:
        idx += 1
    return step_values[idx]


@njit(cache=True, inline="always")
def _apply_replacement_nb(mrca, types, t, k, l):
    N = types.shape[0]
    types[l] = types[k]
    for m in range(N):
        v = mrca[k, m]
        mrca[l, m] = v
        mrca[m, l] = v
    mrca[k, l] = t
    mrca[l, k] = t
    mrca[l, l] = t


@njit(cache=True)
def _observe_nb(
    mrca, types, t_obs,
    lap_lambdas, out_lap,
    mom_lambda, mom_tuples, out_mom,
    out_freq, out_meanr, out_lapmark,
    u_obs, cursors, oi,
):
    N = types.shape[0]
    nl = lap_lambdas.shape[0]
    if out_lap.shape[0] > 0 or out_lapmark.shape[0] > 0 or out_meanr.shape[0] > 0:
        for j in range(nl):
            acc = 0.0
            accm = 0.0
            for k in range(N):
                for l in range(k + 1, N):
                    r = 2.0 * (t_obs - mrca[k, l])
                    e = math.exp(-lap_lambdas[j] * r)
                    acc += 2.0 * e
                    if types[k] == 0:
                        accm += e
                    if types[l] == 0:
                        accm += e
            if out_lap.shape[0] > 0:
                out_lap[oi, j] = acc / (N * (N - 1))
            if out_lapmark.shape[0] > 0:
                out_lapmark[oi, j] = accm / (N * (N - 1))
        if out_meanr.shape[0] > 0:
            accr = 0.0
            for k in range(N):
                for l in range(k + 1, N):
                    accr += 2.0 * (t_obs - mrca[k, l])
            out_meanr[oi] = accr / (N * (N - 1) / 2.0)
    if out_freq.shape[0] > 0:
        cnt = 0
        for k in range(N):
            if types[k] == 0:
                cnt += 1
        out_freq[oi] = cnt / N
    if out_mom.shape[0] > 0:
        for col in range(10):
            out_mom[oi, col] = 0.0
        for s in range(mom_tuples):
            u = u_obs[cursors[3]]
            cursors[3] += 1
            a, b, c, d = _decode_quad_nb(u, N)
            r_ab = 2.0 * (t_obs - mrca[a, b])
            e = math.exp(-mom_lambda * r_ab)
            ia = 1.0 if types[a] == 0 else 0.0
            ib = 1.0 if types[b] == 0 else 0.0
            ic = 1.0 if types[c] == 0 else 0.0
            idd = 1.0 if types[d] == 0 else 0.0
            out_mom[oi, 0] += ia
            out_mom[oi, 1] += ib
            out_mom[oi, 2] += ia * ib
            out_mom[oi, 3] += ib * ic
            out_mom[oi, 4] += e
            out_mom[oi, 5] += e * ia
            out_mom[oi, 6] += e * ic
            out_mom[oi, 7] += e * ia * ib
            out_mom[oi, 8] += e * ia * ic
            out_mom[oi, 9] += e * ic * idd
        for col in range(10):
            out_mom[oi, col] /= mom_tuples


@njit(cache=True)
def _run_kernel(
    mrca, types, tstate, t_end,
    r_res, r_mut, r_sel,
    z, bar_cdf, tilde_cdf,
    fit_variant, chi, chi2, profile_code, decay_rate, step_breaks, step_values,
    u_res, u_mut, u_sel, u_obs,
    cursors, next_times,
    obs_times, obs_cursor,
    lap_lambdas, out_lap,
    mom_lambda, mom_tuples, out_mom,
    out_freq, out_meanr, out_lapmark,
    record, rec_t, rec_parent, rec_victim, rec_kind, rec_aux, rec_count,
):
    N = types.shape[0]
    n_obs = obs_times.shape[0]
    obs_need = mom_tuples if out_mom.shape[0] > 0 else 0
    while True:
        t_next = next_times[0]
        which = 0
        if next_times[1] < t_next:
            t_next = next_times[1]
            which = 1
        if next_times[2] < t_next:
            t_next = next_times[2]
            which = 2
        # observations strictly before the next event (and <= t_end)
        while obs_cursor[0] < n_obs and obs_times[obs_cursor[0]] < t_next and obs_times[obs_cursor[0]] <= t_end:
            if cursors[3] + obs_need > u_obs.shape[0]:
                return _STATUS_OBS
            _observe_nb(
                mrca, types, obs_times[obs_cursor[0]],
                lap_lambdas, out_lap, mom_lambda, mom_tuples, out_mom,
                out_freq, out_meanr, out_lapmark, u_obs, cursors, obs_cursor[0],
            )
            obs_cursor[0] += 1
        if t_next > t_end:
            tstate[0] = t_end
            return _STATUS_DONE
        if which == 0:
            # resampling: pair + rearm
            if cursors[0] + 2 > u_res.shape[0]:
                return _STATUS_RES
            if record and rec_count[0] >= rec_t.shape[0]:
                return _STATUS_REC
            tstate[0] = t_next
            k, l = _decode_pair_nb(u_res[cursors[0]], N)
            cursors[0] += 1
            _apply_replacement_nb(mrca, types, t_next, k, l)
            if record:
                rec_t[rec_count[0]] = t_next
                rec_parent[rec_count[0]] = k
                rec_victim[rec_count[0]] = l
                rec_kind[rec_count[0]] = 0
                rec_aux[rec_count[0]] = -1
                rec_count[0] += 1
            next_times[0] = t_next - math.log1p(-u_res[cursors[0]]) / r_res
            cursors[0] += 1
        elif which == 1:
            # mutation: individual + z-branch + value + rearm
            if cursors[1] + 4 > u_mut.shape[0]:
                return _STATUS_MUT
            if record and rec_count[0] >= rec_t.shape[0]:
                return _STATUS_REC
            tstate[0] = t_next
            k = int(u_mut[cursors[1]] * N)
            cursors[1] += 1
            u_z = u_mut[cursors[1]]
            cursors[1] += 1
            u_v = u_mut[cursors[1]]
            cursors[1] += 1
            if u_z < z:
                v = _categorical_nb(bar_cdf, u_v)
            else:
                v = _categorical_nb(tilde_cdf[types[k]], u_v)
            types[k] = v
            if record:
                rec_t[rec_count[0]] = t_next
                rec_parent[rec_count[0]] = k
                rec_victim[rec_count[0]] = -1
                rec_kind[rec_count[0]] = 2
                rec_aux[rec_count[0]] = v
                rec_count[0] += 1
            next_times[1] = t_next - math.log1p(-u_mut[cursors[1]]) / r_mut
            cursors[1] += 1
        else:
            # selection proposal: individuals + thinning + rearm
            if cursors[2] + 3 > u_sel.shape[0]:
                return _STATUS_SEL
            if record and rec_count[0] >= rec_t.shape[0]:
                return _STATUS_REC
            tstate[0] = t_next
            if fit_variant == 1:
                k, l = _decode_pair_nb(u_sel[cursors[2]], N)
                m = -1
                p_acc = chi[types[k]]
            else:
                k, l, m = _decode_triple_nb(u_sel[cursors[2]], N)
                r_km = 2.0 * (t_next - mrca[k, m])
                p_acc = chi2[types[k], types[m]] * _profile_nb(
                    profile_code, decay_rate, step_breaks, step_values, r_km
                )
            cursors[2] += 1
            u_acc = u_sel[cursors[2]]
            cursors[2] += 1
            if u_acc < p_acc:
                _apply_replacement_nb(mrca, types, t_next, k, l)
                if record:
                    rec_t[rec_count[0]] = t_next
                    rec_parent[rec_count[0]] = k
                    rec_victim[rec_count[0]] = l
                    rec_kind[rec_count[0]] = 1
                    rec_aux[rec_count[0]] = m
                    rec_count[0] += 1
            next_times[2] = t_next - math.log1p(-u_sel[cursors[2]]) / r_sel
            cursors[2] += 1


class _Stream:
    """A uniform block fed from one Generator, refillable without losing draws."""

    def __init__(self, seedseq, block=_BLOCK):
        self.rng = np.random.Generator(np.random.PCG64(seedseq))
        self.block = block
        self.buf = self.rng.random(block)
        self.cursor = 0

    def refill(self, used):
        leftover = self.buf[used:]
        self.buf = np.concatenate([leftover, self.rng.random(self.block)])
        self.cursor = 0

    def draw1(self):
        if self.cursor >= self.buf.size:
            self.refill(self.cursor)
        u = self.buf[self.cursor]
        self.cursor += 1
        return u


class FastSim:
    """Drop-in accelerated engine: same seed -> same trajectory as MoranEngine.

    The state is evolved in place.  ``run`` advances to t_end, optionally
    computing observation statistics and recording accepted events.
    """

    def __init__(self, state: PopulationState, params: ModelParams, seed, block: int = _BLOCK):
        if params.N != state.N:
            raise ValueError("params.N and state.N disagree")
        self.state = state
        self.params = params
        children = seed_sequence(seed).spawn(4)
        self.s_res = _Stream(children[0], block)
        self.s_mut = _Stream(children[1], block)
        self.s_sel = _Stream(children[2], block)
        self.s_obs = _Stream(children[3], block)
        rates = total_rates(state, params)
        self.rates = rates
        self.next_times = np.empty(3, dtype=np.float64)
        self.next_times[0] = self._arm(self.s_res, rates.resampling_total)
        self.next_times[1] = self._arm(self.s_mut, rates.mutation_total)
        self.next_times[2] = self._arm(self.s_sel, rates.selection_proposal_total)
        kern = params.mutation
        self._bar_cdf = np.cumsum(kern.bar_beta)
        self._tilde_cdf = np.cumsum(kern.tilde_beta, axis=1)
        fit = params.fitness
        K = kern.n_types
        self._fit_variant = {
            VARIANT_NEUTRAL: 0, VARIANT_HAPLOID: 1, VARIANT_DIPLOID: 2, VARIANT_DISTANCE: 3,
        }[fit.variant]
        self._chi = np.zeros(K) if fit.chi is None else np.asarray(fit.chi, dtype=float)
        self._chi2 = np.zeros((K, K)) if fit.chi2 is None else np.asarray(fit.chi2, dtype=float)
        if fit.variant == VARIANT_DISTANCE and fit.profile != PROFILE_CONSTANT:
            self._profile_code = 1 if fit.profile == PROFILE_EXPONENTIAL else 2
        else:
            self._profile_code = 0
        self._decay = float(fit.decay_rate)
        self._breaks = (
            np.zeros(0) if fit.step_breaks is None else np.asarray(fit.step_breaks, dtype=float)
        )
        self._stepvals = (
            np.ones(1) if fit.step_values is None else np.asarray(fit.step_values, dtype=float)
        )

    def _arm(self, stream, rate):
        if rate <= 0.0:
            return math.inf
        return self.state.t - math.log1p(-stream.draw1()) / rate

    def run(
        self,
        t_end: float,
        obs_times=None,
        lap_lambdas=None,
        moments_lambda=None,
        moments_tuples: int = 100,
        want_freq: bool = False,
        want_meanr: bool = False,
        want_lapmark: bool = False,
        record_events: bool = False,
        record_cap: int = 0,
    ):
        """Advance to t_end; returns a dict with any requested observation arrays."""
        state = self.state
        if t_end < state.t:
            raise ValueError("t_end lies in the past")
        obs = np.asarray(obs_times, dtype=float) if obs_times is not None else np.zeros(0)
        n_obs = obs.size
        lams = np.asarray(lap_lambdas, dtype=float) if lap_lambdas is not None else np.zeros(0)
        out_lap = np.zeros((n_obs, lams.size)) if lams.size and n_obs else np.zeros((0, 1))
        mom_lambda = float(moments_lambda) if moments_lambda is not None else 0.0
        out_mom = np.zeros((n_obs, 10)) if moments_lambda is not None and n_obs else np.zeros((0, 10))
        out_freq = np.zeros(n_obs) if want_freq and n_obs else np.zeros(0)
        out_meanr = np.zeros(n_obs) if want_meanr and n_obs else np.zeros(0)
        out_lapmark = np.zeros((n_obs, lams.size)) if want_lapmark and n_obs else np.zeros((0, 1))
        if record_events:
            cap = record_cap or 1 << 20
            rec_t = np.zeros(cap)
            rec_parent = np.zeros(cap, dtype=np.int64)
            rec_victim = np.zeros(cap, dtype=np.int64)
            rec_kind = np.zeros(cap, dtype=np.int64)
            rec_aux = np.zeros(cap, dtype=np.int64)
        else:
            rec_t = np.zeros(0)
            rec_parent = np.zeros(0, dtype=np.int64)
            rec_victim = np.zeros(0, dtype=np.int64)
            rec_kind = np.zeros(0, dtype=np.int64)
            rec_aux = np.zeros(0, dtype=np.int64)
        rec_count = np.zeros(1, dtype=np.int64)
        obs_cursor = np.zeros(1, dtype=np.int64)
        tstate = np.array([state.t])
        mrca = state.mrca
        if not mrca.flags.c_contiguous:
            raise ValueError("mrca must be C-contiguous")
        types = state.types
        while True:
            cursors = np.array(
                [self.s_res.cursor, self.s_mut.cursor, self.s_sel.cursor, self.s_obs.cursor],
                dtype=np.int64,
            )
            status = _run_kernel(
                mrca, types, tstate, float(t_end),
                self.rates.resampling_total, self.rates.mutation_total,
                self.rates.selection_proposal_total,
                float(self.params.mutation.z), self._bar_cdf, self._tilde_cdf,
                self._fit_variant, self._chi, self._chi2,
                self._profile_code, self._decay, self._breaks, self._stepvals,
                self.s_res.buf, self.s_mut.buf, self.s_sel.buf, self.s_obs.buf,
                cursors, self.next_times,
                obs, obs_cursor,
                lams, out_lap,
                mom_lambda, int(moments_tuples), out_mom,
                out_freq, out_meanr, out_lapmark,
                record_events, rec_t, rec_parent, rec_victim, rec_kind, rec_aux, rec_count,
            )
            self.s_res.cursor = int(cursors[0])
            self.s_mut.cursor = int(cursors[1])
            self.s_sel.cursor = int(cursors[2])
            self.s_obs.cursor = int(cursors[3])
            if status == _STATUS_DONE:
                break
            if status == _STATUS_RES:
                self.s_res.refill(self.s_res.cursor)
            elif status == _STATUS_MUT:
                self.s_mut.refill(self.s_mut.cursor)
            elif status == _STATUS_SEL:
                self.s_sel.refill(self.s_sel.cursor)
            elif status == _STATUS_OBS:
                self.s_obs.refill(self.s_obs.cursor)
            else:
                raise RuntimeError("event record buffer full; raise record_cap")
        state.t = float(tstate[0])
        out = {}
        if out_lap.shape[0]:
            out["laplace"] = out_lap
        if out_mom.shape[0]:
            out["moments"] = out_mom
        if out_freq.shape[0]:
            out["freq"] = out_freq
        if out_meanr.shape[0]:
            out["mean_distance"] = out_meanr
        if out_lapmark.shape[0]:
            out["laplace_marked"] = out_lapmark
        if record_events:
            n = int(rec_count[0])
            out["events"] = {
                "time": rec_t[:n].copy(),
                "parent": rec_parent[:n].copy(),
                "victim": rec_victim[:n].copy(),
                "kind": rec_kind[:n].copy(),
                "aux": rec_aux[:n].copy(),
            }
        return out
