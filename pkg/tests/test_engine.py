import math

import numpy as np
import pytest

from treemoran.model import (
    FitnessSpec,
    ModelParams,
    MutationKernel,
    make_initial,
    pair_distance,
    two_type_alphabet,
    two_type_kernel,
    validate,
)
from treemoran.engine import (
    MoranEngine,
    Replacement,
    apply_mutation,
    apply_replacement,
    draw_event,
    load_log,
    replay,
    run_until,
    save_log,
    total_rates,
)
from treemoran._fastsim import FastSim

ALPH = two_type_alphabet()


def _params(N, gamma=1.0, tb=1.0, tg=1.0, alpha=0.0, fitness=None):
    return ModelParams(
        N=N, gamma=gamma, mutation=two_type_kernel(tb, tg), alpha=alpha,
        fitness=fitness if fitness is not None else FitnessSpec(),
    )


HAPLOID = FitnessSpec(variant="haploid", chi=np.array([1.0, 0.0]))


def test_total_rates_values():
    s = make_initial("star", 2, ALPH, np.random.default_rng(0))
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    r = total_rates(s, ModelParams(N=2, gamma=1.0, mutation=kern, alpha=0.0))
    assert r.resampling_total == pytest.approx(1.0)  # gamma * N(N-1)/2
    assert r.selection_proposal_total == 0.0

    s5 = make_initial("star", 5, ALPH, np.random.default_rng(0))
    r5 = total_rates(s5, _params(5, tb=2.0, tg=2.0))  # per-individual rate 2
    assert r5.mutation_total == pytest.approx(10.0)

    rh = total_rates(s5, _params(5, alpha=2.0, fitness=HAPLOID))
    assert rh.selection_proposal_total == pytest.approx(2.0 * 4)  # alpha (N-1)

    dip = FitnessSpec(variant="diploid", chi2=np.full((2, 2), 0.5))
    rd = total_rates(s5, _params(5, alpha=2.0, fitness=dip))
    assert rd.selection_proposal_total == pytest.approx(2.0 * 5 * 4 * 3 / 25)


def test_draw_event_deterministic_under_seed():
    s = make_initial("star", 6, ALPH, np.random.default_rng(0))
    p = _params(6, alpha=0.5, fitness=HAPLOID)
    a = draw_event(s, p, np.random.default_rng(42))
    b = draw_event(s, p, np.random.default_rng(42))
    assert a == b


def test_draw_event_exponential_mean():
    s = make_initial("star", 4, ALPH, np.random.default_rng(0))
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    p = ModelParams(N=4, gamma=2.0, mutation=kern, alpha=0.0)
    R = total_rates(s, p).total  # only resampling, rate 12
    rng = np.random.default_rng(7)
    n = 100_000
    dts = np.array([draw_event(s, p, rng)[0] for _ in range(n)])
    se = dts.std(ddof=1) / math.sqrt(n)
    assert abs(dts.mean() - 1.0 / R) <= 3 * se


def test_draw_event_frozen():
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    p = ModelParams(N=3, gamma=0.0, mutation=kern, alpha=0.0)
    s = make_initial("star", 3, ALPH, np.random.default_rng(0))
    dt, prop = draw_event(s, p, np.random.default_rng(0))
    assert math.isinf(dt) and prop is None


def test_zero_fitness_proposals_are_rejected():
    # chi(unfit) = 0 and everyone unfit: selection proposals fire, none accepted
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([0.5, 0.5]), tilde_beta=np.eye(2))
    p = ModelParams(N=6, gamma=1.0, mutation=kern, alpha=5.0, fitness=HAPLOID)
    s = make_initial("star", 6, ALPH, np.random.default_rng(0), types=[1] * 6)
    assert total_rates(s, p).selection_proposal_total > 0
    eng = MoranEngine(s, p, seed=3)
    eng.run_until(5.0)
    causes = {ev.cause for ev in eng.log if ev.kind == "R"}
    assert "sel" not in causes
    assert set(np.unique(s.types)) <= {0, 1}


def test_apply_replacement_hand_trace():
    # star evolved to t=1 (r = 2 everywhere), replace 1 by offspring of 0
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    p = ModelParams(N=3, gamma=0.0, mutation=kern, alpha=0.0)
    s = make_initial("star", 3, ALPH, np.random.default_rng(0), types=[0, 1, 1])
    MoranEngine(s, p, seed=0).run_until(1.0)
    apply_replacement(s, 0, 1)
    assert pair_distance(s, 0, 1) == 0.0
    assert pair_distance(s, 0, 2) == pytest.approx(2.0)
    assert pair_distance(s, 1, 2) == pytest.approx(2.0)
    assert s.types[1] == s.types[0] == 0

    # applying the same replacement twice changes nothing further
    before_t = s.mrca.copy()
    apply_replacement(s, 0, 1)
    assert np.array_equal(s.mrca, before_t)

    # afterwards the pair distance grows as 2 (t - t_event)
    s.t = 3.5
    assert pair_distance(s, 0, 1) == pytest.approx(2 * (3.5 - 1.0))

    with pytest.raises(ValueError):
        apply_replacement(s, 2, 2)


def test_apply_mutation_degenerate_kernel_and_distances():
    kern = MutationKernel(rate=1.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    p = ModelParams(N=3, gamma=1.0, mutation=kern, alpha=0.0)
    s = make_initial("comb", 3, ALPH, np.random.default_rng(0), spacing=2.0, types=[1, 1, 1])
    before = s.mrca.copy()
    rng = np.random.default_rng(5)
    for k in range(3):
        assert apply_mutation(s, k, p, rng) == 0  # delta kernel on the fit type
    assert np.array_equal(s.mrca, before)


def test_single_line_type_fraction():
    # long-run fraction of fit along one line ~ theta_g / (theta_b + theta_g)
    tb, tg = 1.0, 3.0
    p = _params(2, gamma=1e-9, tb=tb, tg=tg)
    s = make_initial("star", 2, ALPH, np.random.default_rng(0), types=[1, 1])
    eng = MoranEngine(s, p, seed=11, record_log=True)
    # observe the type of individual 0 at mutation events along a long run
    samples = []
    eng.run_until(20000.0, observers=[lambda t, ev, st: samples.append(st.types[0])])
    arr = np.array(samples[200:])
    frac = (arr == 0).mean()
    se = arr.std() / math.sqrt(len(arr) / 10)  # crude autocorrelation allowance
    assert abs(frac - tg / (tb + tg)) <= 3 * se + 0.02


def test_run_until_no_events_grows_distances():
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    p = ModelParams(N=4, gamma=0.0, mutation=kern, alpha=0.0)
    s = make_initial("comb", 4, ALPH, np.random.default_rng(0), spacing=1.0)
    run_until(s, 2.5, p, seed=0)
    assert s.t == 2.5
    assert pair_distance(s, 0, 1) == pytest.approx(1.0 + 2 * 2.5)


def test_two_individual_equilibrium_laplace():
    # N=2: pair coalescence rate is exactly gamma; E[exp(-r12)] -> 1/3
    p = _params(2, gamma=1.0)
    s = make_initial("star", 2, ALPH, np.random.default_rng(0))
    eng = MoranEngine(s, p, seed=13, record_log=False)
    vals = []
    t = 10.0
    while t < 30000.0:
        eng.run_until(t)
        vals.append(math.exp(-pair_distance(s, 0, 1)))
        t += 3.0
    arr = np.array(vals)
    nb = 20
    b = arr[: len(arr) // nb * nb].reshape(nb, -1).mean(axis=1)
    se = b.std(ddof=1) / math.sqrt(nb)
    assert abs(arr.mean() - 1.0 / 3.0) <= 3 * se


def test_event_log_replay_bit_exact(tmp_path):
    p = _params(10, alpha=0.8, fitness=HAPLOID, tb=2.0, tg=1.0)
    s0 = make_initial("comb", 10, ALPH, np.random.default_rng(2), spacing=1.0)
    s = s0.copy()
    eng = MoranEngine(s, p, seed=21)
    eng.run_until(4.0)
    redone = replay(eng.log, s0)
    redone.t = s.t
    assert np.array_equal(redone.mrca, s.mrca)
    assert np.array_equal(redone.types, s.types)

    path = tmp_path / "events.log"
    save_log(eng.log, path)
    log2 = load_log(path)
    assert len(log2) == len(eng.log)
    redone2 = replay(log2, s0)
    redone2.t = s.t
    assert np.array_equal(redone2.mrca, s.mrca)
    assert np.array_equal(redone2.types, s.types)


def test_determinism_same_seed_same_log():
    p = _params(8, alpha=0.5, fitness=HAPLOID)
    logs = []
    for _ in range(2):
        s = make_initial("star", 8, ALPH, np.random.default_rng(1))
        eng = MoranEngine(s, p, seed=99)
        eng.run_until(3.0)
        logs.append(eng.log.events)
    assert logs[0] == logs[1]


@pytest.mark.parametrize(
    "fitness,alpha",
    [
        (FitnessSpec(), 0.0),
        (HAPLOID, 0.7),
        (FitnessSpec(variant="diploid", chi2=np.array([[1.0, 0.4], [0.4, 0.1]])), 0.7),
        (
            FitnessSpec(
                variant="distance",
                chi2=np.full((2, 2), 0.8),
                profile="exponential",
                decay_rate=0.3,
                kin=True,
            ),
            0.7,
        ),
    ],
)
def test_fast_path_matches_reference_bit_exactly(fitness, alpha):
    p = _params(15, gamma=1.2, tb=0.8, tg=1.7, alpha=alpha, fitness=fitness)
    ref = make_initial("comb", 15, ALPH, np.random.default_rng(4), spacing=0.5)
    fast = ref.copy()
    MoranEngine(ref, p, seed=12345).run_until(6.0)
    FastSim(fast, p, seed=12345, block=512).run(6.0)  # small blocks force refills
    assert ref.t == fast.t
    assert np.array_equal(ref.types, fast.types)
    assert np.array_equal(ref.mrca, fast.mrca)


def test_fast_event_recording_matches_log():
    p = _params(10, alpha=0.6, fitness=HAPLOID)
    ref = make_initial("star", 10, ALPH, np.random.default_rng(9))
    fast = ref.copy()
    eng = MoranEngine(ref, p, seed=777)
    eng.run_until(2.0)
    out = FastSim(fast, p, seed=777).run(2.0, record_events=True, record_cap=10_000)
    ev = out["events"]
    reps = [e for e in eng.log if e.kind == "R"]
    muts = [e for e in eng.log if e.kind == "M"]
    mask = ev["kind"] != 2
    assert np.array_equal(ev["time"][mask], np.array([e.time for e in reps]))
    assert np.array_equal(ev["parent"][mask], np.array([e.parent for e in reps]))
    assert np.array_equal(ev["victim"][mask], np.array([e.victim for e in reps]))
    assert np.array_equal(ev["time"][~mask], np.array([e.time for e in muts]))


def test_ultrametric_preserved_along_run():
    p = _params(20, alpha=0.5, fitness=HAPLOID)
    s = make_initial("comb", 20, ALPH, np.random.default_rng(0), spacing=2.0)
    eng = MoranEngine(s, p, seed=5)
    for t in np.linspace(0.2, 4.0, 20):
        eng.run_until(float(t))
        assert validate(s, 1e-9).ok()


def test_neutral_types_match_pure_type_resampling():
    # with alpha = 0 the law of the type vector is independent of the
    # genealogy: stationary type-frequency samples from the engine must match
    # a genealogy-free pure type-resampling chain (two-sample KS test)
    from scipy.stats import ks_2samp

    N = 30
    p = _params(N, gamma=1.0, tb=1.0, tg=1.0)
    s = make_initial("star", N, ALPH, np.random.default_rng(8), types=[0] * N)
    eng = MoranEngine(s, p, seed=31, record_log=False)
    engine_freqs = []
    t = 10.0
    while t <= 1200.0:
        eng.run_until(t)
        engine_freqs.append((s.types == 0).mean())
        t += 2.0

    types = np.zeros(N, dtype=int)
    rng = np.random.default_rng(55)
    rates = total_rates(s, p)
    bar_cdf = np.cumsum(p.mutation.bar_beta)
    t = 0.0
    t_obs = 10.0
    replica_freqs = []
    while t_obs <= 1200.0:
        t += rng.exponential(1.0 / rates.total)
        while t_obs <= 1200.0 and t_obs < t:
            replica_freqs.append((types == 0).mean())
            t_obs += 2.0
        if rng.random() * rates.total < rates.resampling_total:
            k, l = rng.choice(N, size=2, replace=False)
            types[l] = types[k]
        else:
            k = rng.integers(N)
            types[k] = int(np.searchsorted(bar_cdf, rng.random(), side="right"))
    stat, pval = ks_2samp(engine_freqs, replica_freqs)
    assert pval > 0.001, (stat, pval)
