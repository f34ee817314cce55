import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treemoran.model import (
    FitnessSpec,
    ModelParams,
    MutationKernel,
    TypeAlphabet,
    make_initial,
    load_state,
    pair_distance,
    save_state,
    two_type_alphabet,
    two_type_kernel,
    validate,
)

ALPH = two_type_alphabet()
RNG = np.random.default_rng(0)


def test_alphabet_rejects_duplicates():
    with pytest.raises(ValueError):
        TypeAlphabet(("a", "a"))


def test_kernel_validation():
    with pytest.raises(ValueError):
        MutationKernel(rate=1.0, z=0.5, bar_beta=np.array([0.6, 0.6]), tilde_beta=np.eye(2))
    with pytest.raises(ValueError):
        MutationKernel(rate=1.0, z=1.5, bar_beta=np.array([0.5, 0.5]), tilde_beta=np.eye(2))
    k = two_type_kernel(1.0, 3.0)
    assert k.rate == 2.0 and k.z == 1.0
    eff = k.effective()
    assert np.allclose(eff.sum(axis=1), 1.0)
    # directed rates: away-from-fit rate theta_b/2 = rate * beta(fit -> unfit)
    assert k.rate * eff[0, 1] == pytest.approx(0.5)
    assert k.rate * eff[1, 0] == pytest.approx(1.5)


def test_fitness_validation():
    with pytest.raises(ValueError):
        FitnessSpec(variant="haploid", chi=np.array([1.2, 0.0]))
    with pytest.raises(ValueError):
        FitnessSpec(variant="diploid", chi2=np.array([[0.1, 0.2], [0.3, 0.1]]))
    # kin profile must be nonincreasing
    with pytest.raises(ValueError):
        FitnessSpec(
            variant="distance",
            chi2=np.full((2, 2), 0.5),
            profile="step",
            step_breaks=np.array([1.0]),
            step_values=np.array([0.2, 0.9]),
            kin=True,
        )
    ok = FitnessSpec(variant="distance", chi2=np.full((2, 2), 0.5),
                     profile="exponential", decay_rate=0.7, kin=True)
    assert ok.acceptance(0, 1, 2.0) == pytest.approx(0.5 * np.exp(-1.4))


def test_star_distances_zero():
    s = make_initial("star", 3, ALPH, RNG)
    for k in range(3):
        for l in range(3):
            assert pair_distance(s, k, l) == 0.0


def test_comb_constant_is_ultrametric():
    s = make_initial("comb", 3, ALPH, RNG, spacing=4.0)
    assert pair_distance(s, 0, 2) == 4.0
    assert validate(s).ok()


def test_given_rejects_non_ultrametric_naming_triple():
    # r12=2, r13=4, r23=3: max(2,3)=3 < 4 violates the ultrametric inequality
    r = np.array([[0.0, 2.0, 4.0], [2.0, 0.0, 3.0], [4.0, 3.0, 0.0]])
    with pytest.raises(ValueError, match=r"triple \(0, 2, 1\)|triple \(2, 0, 1\)"):
        make_initial("given", 3, ALPH, RNG, matrix=r, types=[0, 1, 0])


def test_validate_reports_ultrametric_excess():
    r = np.array([[0.0, 2.0, 4.0], [2.0, 0.0, 3.0], [4.0, 3.0, 0.0]])
    s = make_initial("star", 3, ALPH, RNG)
    s.mrca = -0.5 * r
    diag = validate(s)
    assert diag.ultrametric
    assert diag.worst_ultrametric_excess == pytest.approx(1.0)


def test_validate_reports_asymmetry():
    s = make_initial("star", 3, ALPH, RNG)
    s.mrca[0, 1] = -1.0  # break symmetry one-sidedly
    diag = validate(s)
    assert diag.symmetry and not diag.ok()


def test_pair_distance_grows_without_events():
    # no events: distances grow at rate 2 (gamma = 0 degenerate model)
    from treemoran.engine import MoranEngine

    kern = MutationKernel(rate=0.0, z=1.0, bar_beta=np.array([0.5, 0.5]), tilde_beta=np.eye(2))
    params = ModelParams(N=3, gamma=0.0, mutation=kern, alpha=0.0)
    s = make_initial("star", 3, ALPH, RNG)
    MoranEngine(s, params, seed=1).run_until(5.0)
    assert pair_distance(s, 0, 1) == pytest.approx(10.0)
    assert pair_distance(s, 1, 1) == 0.0


def test_pair_distance_index_errors():
    s = make_initial("star", 3, ALPH, RNG)
    with pytest.raises(IndexError):
        pair_distance(s, 0, 3)


def test_state_file_roundtrip(tmp_path):
    s = make_initial("comb", 5, ALPH, np.random.default_rng(3), spacing=2.5)
    mfile = tmp_path / "state.csv"
    tfile = tmp_path / "state.types"
    save_state(s, mfile, tfile)
    assert open(mfile).readline().strip() == "n=5"
    s2 = load_state(mfile, tfile, ALPH)
    assert np.array_equal(s2.types, s.types)
    assert np.allclose(s2.distance_matrix(), s.distance_matrix())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_engine_states_always_validate(seed):
    # property: any state reachable by the engine from a valid start validates
    from treemoran.engine import MoranEngine

    params = ModelParams(
        N=12,
        gamma=1.0,
        mutation=two_type_kernel(1.0, 2.0),
        alpha=0.7,
        fitness=FitnessSpec(variant="haploid", chi=np.array([1.0, 0.2])),
    )
    s = make_initial("comb", 12, ALPH, np.random.default_rng(seed), spacing=1.5)
    MoranEngine(s, params, seed=seed).run_until(2.0)
    assert validate(s, 1e-9).ok()
