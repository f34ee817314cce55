import math

import numpy as np
import pytest

from treemoran.model import (
    FitnessSpec,
    ModelParams,
    MutationKernel,
    make_initial,
    two_type_alphabet,
    two_type_kernel,
)
from treemoran.dual import (
    Coalesce,
    Const,
    Grown,
    Leaf,
    MutPD,
    MutPI,
    SelDip,
    SelHap,
    dual_step,
    duality_gap,
    evaluate,
    leaf_marked_pair_laplace,
    leaf_pair_laplace,
    leaf_triangle_laplace,
    run_dual,
)

ALPH = two_type_alphabet()
HAPLOID = FitnessSpec(variant="haploid", chi=np.array([1.0, 0.0]))


def _params(gamma=1.0, tb=1.0, tg=1.0, alpha=0.0, z=1.0, fitness=None):
    if z == 1.0:
        kern = two_type_kernel(tb, tg)
    else:
        tbar = tb + tg
        kern = MutationKernel(
            rate=tbar / 2, z=z,
            bar_beta=np.array([tg / tbar, tb / tbar]),
            tilde_beta=np.array([[0.3, 0.7], [0.6, 0.4]]),
        )
    return ModelParams(
        N=10, gamma=gamma, mutation=kern, alpha=alpha,
        fitness=fitness if fitness is not None else (HAPLOID if alpha else FitnessSpec()),
    )


def _neutral_nomut(gamma=1.0):
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    return ModelParams(N=10, gamma=gamma, mutation=kern, alpha=0.0)


def test_evaluate_leaf_and_grown():
    leaf = leaf_pair_laplace(1.0)
    assert evaluate(leaf, np.zeros((2, 2)), [0, 0]) == 1.0
    D = np.array([[0.0, 3.0], [3.0, 0.0]])
    assert evaluate(Grown(leaf, 0.5), D, [0, 1]) == pytest.approx(math.exp(-4.0))


def test_evaluate_coalesce_collapses_pair():
    leaf = leaf_pair_laplace(2.0)
    big = np.array([[0.0, 5.0], [5.0, 0.0]])
    for k, l in [(0, 1), (1, 0)]:
        c = Coalesce(leaf, k, l)
        assert evaluate(c, big[:1, :1], [1]) == 1.0


def test_degree_and_input_dim_bookkeeping():
    leaf = leaf_triangle_laplace(1.0)  # degree 3
    bar = (0.5, 0.5)
    tilde = ((0.3, 0.7), (0.6, 0.4))
    assert Grown(leaf, 1.0).degree == 3
    assert Coalesce(leaf, 0, 2).degree == 2
    # mark averaging keeps the slot alive while its distances are still read;
    # only a distance-free (degree-1) child collapses
    assert MutPI(leaf, 1, bar).degree == 3
    one = Leaf(degree=1, coeffs=(), indicators=((0, 0),))
    assert MutPI(one, 0, bar).degree == 0
    assert MutPD(leaf, 1, tilde).degree == 3
    assert SelHap(leaf, 0, (1.0, 0.0)).degree == 4
    dip = FitnessSpec(variant="diploid", chi2=np.array([[1.0, 0.5], [0.5, 0.0]]))
    assert SelDip(leaf, 0, dip).degree == 5
    assert SelHap(leaf, 0, (1.0, 0.0)).input_dim == 4
    assert SelDip(leaf, 0, dip).input_dim == 5
    with pytest.raises(ValueError):
        Coalesce(leaf, 1, 1)


def test_mutpi_averages_marks():
    # MutPI over the marked slot turns the indicator into its kernel weight
    ml = leaf_marked_pair_laplace(0.0)
    z2 = np.zeros((2, 2))
    mpi = MutPI(ml, 0, (0.25, 0.75))
    assert evaluate(mpi, z2, [1, 0]) == pytest.approx(0.25)
    # over the unmarked slot the indicator tests the untouched concrete mark
    mpi2 = MutPI(ml, 1, (0.25, 0.75))
    assert evaluate(mpi2, z2, [0, 1]) == 1.0
    assert evaluate(mpi2, z2, [1, 0]) == 0.0
    # distances of the averaged slot stay live: exact duality requires it
    lam_leaf = leaf_pair_laplace(1.0)
    m = MutPI(lam_leaf, 0, (0.5, 0.5))
    D = np.array([[0.0, 3.0], [3.0, 0.0]])
    assert evaluate(m, D, [0, 1]) == pytest.approx(math.exp(-3.0))


def test_mutpd_uses_current_mark_row():
    ml = leaf_marked_pair_laplace(0.0)
    tilde = ((0.3, 0.7), (0.6, 0.4))
    mpd = MutPD(ml, 0, tilde)
    assert evaluate(mpd, np.zeros((2, 2)), [0, 0]) == pytest.approx(0.3)
    assert evaluate(mpd, np.zeros((2, 2)), [1, 0]) == pytest.approx(0.6)


def test_selhap_mixture_semantics():
    # chi = 1{fit}: value = child if slot fit, else child with a fresh slot
    ml = leaf_marked_pair_laplace(1.0)
    sh = SelHap(ml, 0, (1.0, 0.0))
    D = np.zeros((3, 3))
    D[0, 1] = D[1, 0] = 2.0
    D[0, 2] = D[2, 0] = 2.0
    D[1, 2] = D[2, 1] = 4.0
    # slot 0 fit: keep child: exp(-r01) * 1 = exp(-2)
    assert evaluate(sh, D, [0, 1, 0]) == pytest.approx(math.exp(-2.0))
    # slot 0 unfit: child reads slots (1, 2) instead: exp(-r12) 1{u1=fit}
    assert evaluate(sh, D, [1, 0, 0]) == pytest.approx(math.exp(-4.0))
    assert evaluate(sh, D, [1, 1, 0]) == 0.0


def test_seldip_reads_partner_distance():
    dip = FitnessSpec(
        variant="distance", chi2=np.full((2, 2), 1.0),
        profile="exponential", decay_rate=0.5, kin=True,
    )
    leaf = leaf_pair_laplace(1.0)
    sd = SelDip(leaf, 0, dip)  # partner slot is index 3 (= child degree + 1)
    D = np.zeros((4, 4))
    D[0, 1] = D[1, 0] = 1.0
    D[0, 3] = D[3, 0] = 2.0  # slot-0-to-partner distance
    p = math.exp(-0.5 * 2.0)
    want = p * math.exp(-1.0) + (1 - p) * math.exp(-0.0)  # sigma_0 drops slot 0: r(1,2)=0
    assert evaluate(sd, D, [0, 0, 0, 0]) == pytest.approx(want)


def test_evaluate_requires_enough_rows():
    leaf = leaf_triangle_laplace(1.0)
    with pytest.raises(ValueError):
        evaluate(leaf, np.zeros((2, 2)), [0, 0])


def test_dual_step_degree_zero_absorbing():
    c = Const(0.37, bound=1.0)
    dt, nxt = dual_step(c, _params(), np.random.default_rng(0))
    assert math.isinf(dt) and nxt is c
    assert run_dual(c, 100.0, _params(), np.random.default_rng(0)) is c


def test_dual_step_coalescence_only():
    leaf = leaf_pair_laplace(1.0)
    rng = np.random.default_rng(0)
    dt, nxt = dual_step(leaf, _neutral_nomut(), rng)
    assert nxt.degree == 1


def test_dual_degree_process_rates():
    # holding time at degree n is Exp(gamma n(n-1)/2 + theta n + alpha n);
    # the degree decreases via coalescence (house-of-cards jumps keep the
    # slot's distances live: the slot-count drops only once no distances are
    # read, so at n >= 2 the down-rate is the coalescence rate alone)
    p = _params(gamma=2.0, tb=3.0, tg=1.0, alpha=0.5, z=1.0)
    leaf = leaf_pair_laplace(1.0)  # n = 2
    total = 2.0 * 1 + 2.0 * 2 + 0.5 * 2
    down_rate = 2.0 * 1
    rng = np.random.default_rng(1)
    n = 100_000
    holds = np.empty(n)
    downs = 0
    for i in range(n):
        dt, nxt = dual_step(leaf, p, rng)
        holds[i] = dt
        downs += nxt.degree < 2
    se_h = holds.std(ddof=1) / math.sqrt(n)
    assert abs(holds.mean() - 1 / total) <= 3 * se_h
    phat = downs / n
    se_p = math.sqrt(phat * (1 - phat) / n)
    assert abs(phat - down_rate / total) <= 3 * se_p

    # at degree 1 a house-of-cards jump produces a genuine constant
    one = Leaf(degree=1, coeffs=(), indicators=((0, 0),))
    pz = _params(gamma=1.0, tb=1.0, tg=1.0, alpha=0.0, z=1.0)
    rng1 = np.random.default_rng(2)
    for _ in range(200):
        dt, nxt = dual_step(one, pz, rng1)
        assert isinstance(nxt, Const) or isinstance(nxt, MutPD) or nxt.degree == 1
        if isinstance(nxt, Const):
            assert nxt.value == pytest.approx(0.5)
            break
    else:
        raise AssertionError("house-of-cards jump never fired")


def test_run_dual_t0_and_closed_form():
    leaf = leaf_pair_laplace(1.0)
    assert run_dual(leaf, 0.0, _params(), np.random.default_rng(0)) is leaf

    gam, lam, t = 1.0, 1.0, 1.0
    p = _neutral_nomut(gam)
    rng = np.random.default_rng(5)
    zero = np.zeros((4, 4))
    vals = np.array(
        [evaluate(run_dual(leaf, t, p, rng), zero, [0] * 4) for _ in range(30_000)]
    )
    expect = gam / (gam + 2 * lam) + (2 * lam / (gam + 2 * lam)) * math.exp(-(gam + 2 * lam) * t)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - expect) <= 3 * se


def test_absorption_and_supnorm():
    p = _params(gamma=1.0, tb=1.0, tg=1.0, alpha=0.5, z=1.0)
    tri = leaf_triangle_laplace(1.0)
    rng = np.random.default_rng(7)
    absorbed = 0
    runs = 400
    input_rng = np.random.default_rng(8)
    for _ in range(runs):
        xi = run_dual(tri, 50.0, p, rng)
        if xi.degree <= 1:
            absorbed += 1
        m = max(xi.input_dim, 2)
        for _ in range(20):
            # random ultrametric-ish inputs: comb matrices with random level
            d = np.full((m, m), float(input_rng.uniform(0, 5)))
            np.fill_diagonal(d, 0.0)
            marks = input_rng.integers(0, 2, size=m)
            assert abs(evaluate(xi, d, marks)) <= 1.0 + 1e-12
    assert absorbed / runs > 0.99


def test_absorbed_constant_evaluates_identically():
    p = _params(gamma=1.0, tb=2.0, tg=1.0, alpha=0.0, z=1.0)
    leaf = leaf_marked_pair_laplace(1.0)
    rng = np.random.default_rng(3)
    xi = leaf
    while xi.degree > 0:
        _, xi = dual_step(xi, p, rng)
    assert isinstance(xi, Const)
    a = evaluate(xi, np.zeros((2, 2)), [0, 0])
    d = np.full((3, 3), 2.5)
    np.fill_diagonal(d, 0.0)
    b = evaluate(xi, d, [1, 0, 1])
    assert abs(a - b) <= 1e-12


def test_duality_gap_t0():
    p = _params()
    state = make_initial("comb", 10, ALPH, np.random.default_rng(0), spacing=1.0)
    rep = duality_gap(state, leaf_pair_laplace(1.0), 0.0, p, reps=40,
                      rng=np.random.default_rng(1))
    assert abs(rep.gap) <= 3 * rep.se + 1e-9


def test_duality_gap_neutral_closed_form():
    # both sides approximate 1/3 + (2/3) e^{-3} at gamma = lam = t = 1
    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([1.0, 0.0]), tilde_beta=np.eye(2))
    p = ModelParams(N=100, gamma=1.0, mutation=kern, alpha=0.0)
    state = make_initial("star", 100, ALPH, np.random.default_rng(0))
    rep = duality_gap(state, leaf_pair_laplace(1.0), 1.0, p, reps=120,
                      rng=np.random.default_rng(2), samples_per_rep=24)
    expect = 1 / 3 + (2 / 3) * math.exp(-3.0)
    assert abs(rep.lhs - expect) <= 3 * rep.se_lhs + 0.02  # O(1/N) allowance
    assert abs(rep.rhs - expect) <= 3 * rep.se_rhs
    assert abs(rep.gap) <= 3 * rep.se + 0.02
