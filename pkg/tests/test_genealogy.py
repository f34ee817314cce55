import math

import numpy as np
import pytest

from treemoran.model import (
    FitnessSpec,
    ModelParams,
    make_initial,
    pair_distance,
    two_type_alphabet,
    two_type_kernel,
)
from treemoran.engine import EventLog, MoranEngine, Replacement
from treemoran.genealogy import (
    ancestor_count,
    ancestor_count_curve,
    ancestor_mean_bound,
    descendant_frequency,
    replacement_arrays,
    simulate_J,
    simulate_frequency_sde,
    trace_ancestor,
    trace_ancestors_arrays,
)

ALPH = two_type_alphabet()


def _run(N=30, t=3.0, seed=0, alpha=0.0):
    fit = FitnessSpec(variant="haploid", chi=np.array([1.0, 0.0])) if alpha else FitnessSpec()
    p = ModelParams(N=N, gamma=1.0, mutation=two_type_kernel(1.0, 1.0), alpha=alpha, fitness=fit)
    s = make_initial("star", N, ALPH, np.random.default_rng(seed))
    eng = MoranEngine(s, p, seed=seed)
    eng.run_until(t)
    return s, eng.log


def test_trace_no_events_identity():
    log = EventLog(N=5)
    assert trace_ancestor(log, 3, 2.0, 1.0) == 3


def test_trace_single_event():
    log = EventLog(N=5, events=[Replacement(0.7, 2, 4, "res")])
    assert trace_ancestor(log, 4, 1.0, 0.5) == 2
    assert trace_ancestor(log, 4, 1.0, 0.8) == 4  # event before window start... inside (0.8, 1.0]?
    assert trace_ancestor(log, 4, 0.6, 0.0) == 4  # event after observation time
    with pytest.raises(ValueError):
        trace_ancestor(log, 4, 1.0, -0.5)
    with pytest.raises(IndexError):
        trace_ancestor(log, 9, 1.0, 0.5)


def test_trace_consistent_with_mrca_matrix():
    # star start: r_t(k, l) = 2 (t - sup{s : A_s(k) = A_s(l)}) exactly, where
    # the sup is the time of the replacement event at which the two lines
    # merge on the way backward (no tolerance: both sides are event-time
    # arithmetic)
    s, log = _run(N=15, t=4.0, seed=3)
    times, parents, victims = replacement_arrays(log)
    t = s.t
    for k, l in [(0, 1), (2, 9), (13, 14), (4, 5)]:
        pos_k, pos_l = k, l
        merged_at = None
        for e in range(len(times) - 1, -1, -1):
            if pos_k == victims[e]:
                pos_k = parents[e]
            if pos_l == victims[e]:
                pos_l = parents[e]
            if pos_k == pos_l:
                merged_at = times[e]
                break
        if merged_at is not None:
            assert pair_distance(s, k, l) == 2.0 * (t - merged_at)
        else:
            assert pair_distance(s, k, l) == 2.0 * t  # star: r0 = 0


def test_ancestor_count_basics():
    s, log = _run(N=20, t=2.0, seed=1)
    assert ancestor_count(log, 1.0, 2.0, [7]) == 1
    assert ancestor_count(log, 2.0, 2.0, range(20)) == 20
    # nonincreasing as the lookback window grows
    counts = [ancestor_count(log, s_, 2.0) for s_ in (1.5, 1.0, 0.5, 0.0)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_ancestor_count_curve_matches_tracing():
    s, log = _run(N=25, t=3.0, seed=5, alpha=0.5)
    times, parents, victims = replacement_arrays(log)
    grid = np.array([0.0, 0.5, 1.0, 1.7, 2.5, 3.0])
    curve = ancestor_count_curve(times, parents, victims, 25, 3.0, grid)
    direct = [ancestor_count(log, float(u), 3.0) for u in grid]
    assert list(curve) == direct


def test_descendant_frequency_extremes():
    s, log = _run(N=20, t=2.0, seed=2)
    assert descendant_frequency(log, range(20), 1.0, 2.0) == 1.0
    assert descendant_frequency(log, [], 1.0, 2.0) == 0.0


def test_descendant_frequency_equals_type_frequency():
    # mark V as the fit type, disable mutation: descendants of V are exactly
    # the fit individuals, pathwise
    from treemoran.model import MutationKernel

    N = 40
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([0.5, 0.5]), tilde_beta=np.eye(2))
    p = ModelParams(N=N, gamma=1.0, mutation=kern, alpha=0.0)
    V = list(range(4))
    types = [0 if i in V else 1 for i in range(N)]
    for seed in range(5):
        s = make_initial("star", N, ALPH, np.random.default_rng(seed), types=types)
        eng = MoranEngine(s, p, seed=seed)
        eng.run_until(1.0)
        freq = descendant_frequency(eng.log, V, 0.0, 1.0)
        assert freq == pytest.approx((s.types == 0).mean())


def test_descendant_frequency_ks_against_sde_oracle():
    # neutral case, |V|/N = 0.1: the frequency at t = 1 is close in law to
    # dX = sqrt(gamma X(1-X)) dW started at 0.1 (Euler-Maruyama oracle)
    from scipy.stats import ks_2samp
    from treemoran._fastsim import FastSim
    from treemoran.model import MutationKernel

    N = 200
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([0.5, 0.5]), tilde_beta=np.eye(2))
    p = ModelParams(N=N, gamma=1.0, mutation=kern, alpha=0.0)
    types = np.array([0] * 20 + [1] * 180)
    n_paths = 1500
    moran = np.empty(n_paths)
    for rep in range(n_paths):
        s = make_initial("star", N, ALPH, np.random.default_rng(rep), types=types)
        sim = FastSim(s, p, seed=(900, rep), block=4096)
        out = sim.run(1.0, obs_times=[1.0], want_freq=True)
        moran[rep] = out["freq"][0]
    sde = simulate_frequency_sde(
        0.1, 1.0, gamma=1.0, alpha=0.0, rng=np.random.default_rng(17),
        n_paths=10_000, dt=1e-3,
    )
    stat, pval = ks_2samp(moran, sde)
    assert pval > 0.05, (stat, pval)


def test_simulate_J_absorbing_and_hitting_time():
    rng = np.random.default_rng(0)
    path = simulate_J(1, 5.0, gamma=1.0, alpha=0.0, rng=rng)
    assert path.value_at(4.9) == 1 and len(path.times) == 1

    hits = np.empty(10_000)
    for i in range(hits.size):
        p = simulate_J(2, math.inf, gamma=2.0, alpha=0.0, rng=rng)
        hits[i] = p.times[-1]
    se = hits.std(ddof=1) / math.sqrt(hits.size)
    assert abs(hits.mean() - 0.5) <= 3 * se

    with pytest.raises(ValueError):
        simulate_J(0, 1.0, 1.0, 0.0, rng)


def test_J_mean_below_logistic_bound():
    rng = np.random.default_rng(4)
    grid = [0.25, 0.5, 1.0, 2.0]
    sums = {u: 0.0 for u in grid}
    n = 10_000
    for _ in range(n):
        p = simulate_J(100, 2.0, gamma=1.0, alpha=0.5, rng=rng)
        for u in grid:
            sums[u] += p.value_at(u)
    for u in grid:
        mean = sums[u] / n
        assert mean <= ancestor_mean_bound(100, u, 1.0, 0.5) * (1 + 1e-3)


def test_running_minimum():
    p = simulate_J(5, 3.0, gamma=1.0, alpha=2.0, rng=np.random.default_rng(8))
    mins = [p.running_min(u) for u in np.linspace(0, 3, 40)]
    assert all(a >= b for a, b in zip(mins, mins[1:]))
    assert p.running_min(3.0) == min(p.values)


def test_ancestor_mean_bound_values():
    assert ancestor_mean_bound(100, 1.0, 1.0, 0.0) == pytest.approx(2.503, abs=2e-3)
    limit = ancestor_mean_bound(math.inf, 1.0, 1.0, 0.0)
    assert limit == pytest.approx(math.exp(0.5) / (math.exp(0.5) - 1.0), abs=1e-12)
    # delta -> infinity: decreases to (gamma + 2 alpha)/gamma from above
    mid = ancestor_mean_bound(math.inf, 8.0, 1.0, 0.5)
    assert mid > (1.0 + 2 * 0.5) / 1.0
    assert ancestor_mean_bound(math.inf, 80.0, 1.0, 0.5) == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(ValueError):
        ancestor_mean_bound(100, 0.0, 1.0, 0.0)
