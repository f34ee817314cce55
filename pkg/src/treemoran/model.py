"""Population states, model parameters and fitness specifications.

The population is a fixed set of N individuals, each carrying a type from a
finite alphabet.  The genealogy is stored as the symmetric matrix of most
recent common ancestor (MRCA) times, so that the genealogical distance of two
individuals is

    r(k, l) = 2 * (t - mrca[k, l]),

twice the time back to their common ancestor.  Storing MRCA times instead of
distances makes the deterministic tree growth free (distances grow implicitly
with t) and a reproduction event an O(N) row copy.  Initial distances r0 are
encoded as negative MRCA times, mrca[k, l] = -r0(k, l) / 2.

Derived distance matrices are pseudo-ultrametric: r(k, l) <= max(r(k, m),
r(m, l)) for every triple, with r(k, l) = 0 allowed for k != l (a freshly
resampled pair).  ``validate`` reports any violation of this structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "TypeAlphabet",
    "MutationKernel",
    "FitnessSpec",
    "ModelParams",
    "PopulationState",
    "Diagnostics",
    "make_initial",
    "pair_distance",
    "validate",
    "save_state",
    "load_state",
    "two_type_alphabet",
    "two_type_kernel",
]

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class TypeAlphabet:
    """Finite type space: K distinct labels, types are stored as indices 0..K-1."""

    labels: tuple

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("alphabet needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("alphabet labels must be distinct")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class MutationKernel:
    """Mutation at per-individual rate ``rate`` with kernel z*bar_beta + (1-z)*tilde_beta.

    ``bar_beta`` is the parent-independent (house-of-cards) component, a
    probability vector over the alphabet; ``tilde_beta`` is a row-stochastic
    K x K matrix indexed by the current type.  ``z`` weights the two parts.
    """

    rate: float
    z: float
    bar_beta: np.ndarray
    tilde_beta: np.ndarray

    def __post_init__(self):
        bar = np.asarray(self.bar_beta, dtype=float)
        tilde = np.asarray(self.tilde_beta, dtype=float)
        object.__setattr__(self, "bar_beta", bar)
        object.__setattr__(self, "tilde_beta", tilde)
        if self.rate < 0:
            raise ValueError("mutation rate must be >= 0")
        if not 0.0 <= self.z <= 1.0:
            raise ValueError("z must lie in [0, 1]")
        if abs(bar.sum() - 1.0) > _PROB_TOL or (bar < -_PROB_TOL).any():
            raise ValueError("bar_beta must be a probability vector")
        if tilde.shape != (bar.size, bar.size):
            raise ValueError("tilde_beta must be K x K")
        rows = tilde.sum(axis=1)
        if np.abs(rows - 1.0).max() > _PROB_TOL or (tilde < -_PROB_TOL).any():
            raise ValueError("tilde_beta rows must sum to 1")

    @property
    def n_types(self) -> int:
        return self.bar_beta.size

    def effective(self) -> np.ndarray:
        """Row-stochastic effective kernel beta(u, .) = z*bar + (1-z)*tilde(u, .)."""
        return self.z * self.bar_beta[None, :] + (1.0 - self.z) * self.tilde_beta


# Fitness variants.  All fitness values live in [0, 1]; selection events are
# proposed blindly and accepted with the fitness probability (thinning).

VARIANT_NEUTRAL = "neutral"
VARIANT_HAPLOID = "haploid"
VARIANT_DIPLOID = "diploid"
VARIANT_DISTANCE = "distance"

PROFILE_CONSTANT = "constant"
PROFILE_EXPONENTIAL = "exponential"
PROFILE_STEP = "step"


@dataclass(frozen=True)
class FitnessSpec:
    """Selection specification.

    variant "neutral":   no selection.
    variant "haploid":   chi[u] in [0,1]; pair (k,l) proposals accepted w.p. chi[u_k].
    variant "diploid":   symmetric chi2[u,v]; triple (k,l,m) proposals accepted
                         w.p. chi2[u_k, u_m].
    variant "distance":  chi2[u,v] * profile(r(k,m)); ``kin=True`` additionally
                         requires the profile to be nonincreasing in r.
    """

    variant: str = VARIANT_NEUTRAL
    chi: Optional[np.ndarray] = None
    chi2: Optional[np.ndarray] = None
    profile: str = PROFILE_CONSTANT
    decay_rate: float = 0.0
    step_breaks: Optional[np.ndarray] = None
    step_values: Optional[np.ndarray] = None
    kin: bool = False

    def __post_init__(self):
        if self.variant == VARIANT_NEUTRAL:
            return
        if self.variant == VARIANT_HAPLOID:
            chi = np.asarray(self.chi, dtype=float)
            object.__setattr__(self, "chi", chi)
            if chi.min() < 0 or chi.max() > 1:
                raise ValueError("haploid fitness values must lie in [0, 1]")
            return
        chi2 = np.asarray(self.chi2, dtype=float)
        object.__setattr__(self, "chi2", chi2)
        if chi2.min() < 0 or chi2.max() > 1:
            raise ValueError("fitness values must lie in [0, 1]")
        if not np.array_equal(chi2, chi2.T):
            raise ValueError("diploid fitness matrix must be symmetric")
        if self.variant == VARIANT_DIPLOID:
            return
        if self.variant != VARIANT_DISTANCE:
            raise ValueError(f"unknown fitness variant {self.variant!r}")
        if self.profile == PROFILE_EXPONENTIAL:
            if self.decay_rate < 0:
                raise ValueError("exponential decay rate must be >= 0")
        elif self.profile == PROFILE_STEP:
            breaks = np.asarray(self.step_breaks, dtype=float)
            vals = np.asarray(self.step_values, dtype=float)
            object.__setattr__(self, "step_breaks", breaks)
            object.__setattr__(self, "step_values", vals)
            if vals.size != breaks.size + 1:
                raise ValueError("need len(step_values) == len(step_breaks) + 1")
            if vals.min() < 0 or vals.max() > 1:
                raise ValueError("step profile values must lie in [0, 1]")
            if (np.diff(breaks) <= 0).any():
                raise ValueError("step breakpoints must be increasing")
        elif self.profile != PROFILE_CONSTANT:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.kin and not self._profile_nonincreasing():
            raise ValueError("kin selection requires a nonincreasing decay profile")

    def _profile_nonincreasing(self) -> bool:
        if self.profile in (PROFILE_CONSTANT, PROFILE_EXPONENTIAL):
            return True
        return bool((np.diff(self.step_values) <= 0).all())

    def profile_value(self, r: float) -> float:
        if self.profile == PROFILE_CONSTANT:
            return 1.0
        if self.profile == PROFILE_EXPONENTIAL:
            return float(np.exp(-self.decay_rate * r))
        idx = int(np.searchsorted(self.step_breaks, r, side="right"))
        return float(self.step_values[idx])

    def acceptance(self, u_k: int, u_m: Optional[int], r_km: float) -> float:
        """Thinning probability for a selection proposal."""
        if self.variant == VARIANT_NEUTRAL:
            return 0.0
        if self.variant == VARIANT_HAPLOID:
            return float(self.chi[u_k])
        if self.variant == VARIANT_DIPLOID:
            return float(self.chi2[u_k, u_m])
        return float(self.chi2[u_k, u_m]) * self.profile_value(r_km)


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of the Moran dynamics for a population of size N."""

    N: int
    gamma: float
    mutation: MutationKernel
    alpha: float = 0.0
    fitness: FitnessSpec = field(default_factory=FitnessSpec)

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("population size must be at least 2")
        # gamma == 0 is a degenerate growth-only model, allowed for diagnostics
        if self.gamma < 0:
            raise ValueError("resampling rate gamma must be >= 0")
        if self.alpha < 0:
            raise ValueError("selection strength alpha must be >= 0")
        if self.alpha > 0 and self.fitness.variant == VARIANT_NEUTRAL:
            raise ValueError("alpha > 0 requires a non-neutral fitness spec")


@dataclass
class PopulationState:
    """Mutable simulation state: time, type vector, MRCA-time matrix."""

    t: float
    types: np.ndarray
    mrca: np.ndarray
    alphabet: TypeAlphabet

    @property
    def N(self) -> int:
        return self.types.size

    def distance_matrix(self) -> np.ndarray:
        """Current genealogical distance matrix r = 2(t - mrca), zero diagonal."""
        r = 2.0 * (self.t - self.mrca)
        np.fill_diagonal(r, 0.0)
        return r

    def copy(self) -> "PopulationState":
        return PopulationState(self.t, self.types.copy(), self.mrca.copy(), self.alphabet)


@dataclass
class Diagnostics:
    """Report from ``validate``: empty lists mean a structurally valid state."""

    symmetry: list = field(default_factory=list)          # (k, l, |mrca_kl - mrca_lk|)
    ultrametric: list = field(default_factory=list)       # (k, l, m, excess)
    future_mrca: list = field(default_factory=list)       # (k, l, mrca_kl - t)
    worst_ultrametric_excess: float = 0.0

    def ok(self) -> bool:
        return not (self.symmetry or self.ultrametric or self.future_mrca)


def two_type_alphabet() -> TypeAlphabet:
    """The two-allele alphabet used throughout the equilibrium checks.

    Index 0 is the fit allele (written ``b`` for the filled symbol), index 1
    the unfit one (``g``).
    """
    return TypeAlphabet(("b", "g"))


def two_type_kernel(theta_b: float, theta_g: float) -> MutationKernel:
    """Two-type parent-independent kernel with b -> g at rate theta_b/2 and
    g -> b at rate theta_g/2.

    Realized as per-individual rate (theta_b + theta_g)/2 with z = 1 and
    bar_beta = (theta_g, theta_b) / (theta_b + theta_g), which reproduces the
    two directed rates exactly.
    """
    if theta_b <= 0 or theta_g <= 0:
        raise ValueError("both mutation rates must be > 0")
    tbar = theta_b + theta_g
    bar = np.array([theta_g / tbar, theta_b / tbar])
    return MutationKernel(rate=tbar / 2.0, z=1.0, bar_beta=bar, tilde_beta=np.eye(2))


def _ultrametric_violations(r: np.ndarray, tol: float, max_report: int = 10):
    """All triples (k, l, m) with r[k,l] > max(r[k,m], r[m,l]) + tol.

    Vectorized over m: for each pair (k, l) the binding constraint is
    min_m max(r[k,m], r[m,l]), attained at the argmin witness.
    """
    n = r.shape[0]
    # ceiling[k, l] = min over m not in {k, l} of max(r[k, m], r[m, l])
    big = np.maximum(r[:, None, :], r.T[None, :, :])  # [k, l, m]
    idx = np.arange(n)
    big[idx, :, idx] = np.inf
    big[:, idx, idx] = np.inf
    ceiling = big.min(axis=2)
    witness = big.argmin(axis=2)
    excess = r - ceiling
    np.fill_diagonal(excess, -np.inf)
    worst = max(0.0, float(excess.max()))
    out = []
    for k, l in zip(*np.nonzero(excess > tol)):
        if len(out) >= max_report:
            break
        out.append((int(k), int(l), int(witness[k, l]), float(excess[k, l])))
    return out, worst


def validate(state: PopulationState, tol: float = 1e-9) -> Diagnostics:
    """Structural diagnostics: symmetry, ultrametricity, mrca <= t.

    Pure report; never raises.  ``worst_ultrametric_excess`` is kept even when
    below tol so slow drift over long runs remains observable.
    """
    diag = Diagnostics()
    m = state.mrca
    asym = np.abs(m - m.T)
    for k, l in zip(*np.nonzero(asym > tol)):
        if k < l and len(diag.symmetry) < 10:
            diag.symmetry.append((int(k), int(l), float(asym[k, l])))
    fut = m - state.t
    np.fill_diagonal(fut, -1.0)
    for k, l in zip(*np.nonzero(fut > tol)):
        if len(diag.future_mrca) < 10:
            diag.future_mrca.append((int(k), int(l), float(fut[k, l])))
    r = state.distance_matrix()
    r = 0.5 * (r + r.T)  # diagnose the symmetrized matrix for triples
    diag.ultrametric, diag.worst_ultrametric_excess = _ultrametric_violations(r, tol)
    return diag


def make_initial(
    kind: str,
    N: int,
    alphabet: TypeAlphabet,
    rng: np.random.Generator,
    *,
    spacing: float = 0.0,
    matrix: Optional[np.ndarray] = None,
    types: Optional[Sequence] = None,
) -> PopulationState:
    """Build a valid population state at t = 0.

    kind "star":  all pairwise distances 0 (one common ancestor just now).
    kind "comb":  all off-diagonal distances equal to ``spacing``.
    kind "given": distances from ``matrix`` (checked to be symmetric and
                  pseudo-ultrametric), types from ``types``.

    Types default to iid uniform draws over the alphabet from ``rng``; pass
    ``types`` (label sequence or index array) to fix them.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    if kind == "star":
        r0 = np.zeros((N, N))
    elif kind == "comb":
        if spacing < 0:
            raise ValueError("comb spacing must be >= 0")
        r0 = np.full((N, N), float(spacing))
        np.fill_diagonal(r0, 0.0)
    elif kind == "given":
        r0 = np.asarray(matrix, dtype=float)
        if r0.shape != (N, N):
            raise ValueError(f"matrix must be {N} x {N}")
        if not np.allclose(r0, r0.T, atol=1e-9):
            raise ValueError("given matrix must be symmetric")
        if np.abs(np.diag(r0)).max() > 1e-9:
            raise ValueError("given matrix must have zero diagonal")
        viol, _ = _ultrametric_violations(r0, 1e-9, max_report=1)
        if viol:
            k, l, m, excess = viol[0]
            raise ValueError(
                f"matrix is not ultrametric: triple ({k}, {l}, {m}) has "
                f"r[{k},{l}] exceeding max(r[{k},{m}], r[{m},{l}]) by {excess:g}"
            )
    else:
        raise ValueError(f"unknown initial kind {kind!r}")

    if types is None:
        tv = rng.integers(0, alphabet.size, size=N)
    else:
        tv = np.array(
            [t if isinstance(t, (int, np.integer)) else alphabet.index(t) for t in types],
            dtype=np.int64,
        )
        if tv.size != N:
            raise ValueError("types must have length N")
        if tv.min() < 0 or tv.max() >= alphabet.size:
            raise ValueError("type index out of range")
    return PopulationState(t=0.0, types=tv.astype(np.int64), mrca=-0.5 * r0, alphabet=alphabet)


def pair_distance(state: PopulationState, k: int, l: int) -> float:
    """Genealogical distance 2(t - mrca[k, l]); 0 on the diagonal."""
    N = state.N
    if not (0 <= k < N and 0 <= l < N):
        raise IndexError(f"individual index out of range for N={N}")
    if k == l:
        return 0.0
    return 2.0 * (state.t - state.mrca[k, l])


# ---------------------------------------------------------------------------
# State files: a CSV matrix file (header "n=<N>", then the distance matrix
# row-major) plus a one-column type file.


def save_state(state: PopulationState, matrix_path, types_path) -> None:
    r = state.distance_matrix()
    with open(matrix_path, "w") as fh:
        fh.write(f"n={state.N}\n")
        for row in r:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(types_path, "w") as fh:
        for idx in state.types:
            fh.write(f"{state.alphabet.labels[idx]}\n")


def load_state(matrix_path, types_path, alphabet: TypeAlphabet) -> PopulationState:
    with open(matrix_path) as fh:
        header = fh.readline().strip()
        if not header.startswith("n="):
            raise ValueError(f"matrix file must start with 'n=<N>', got {header!r}")
        N = int(header[2:])
        rows = [[float(x) for x in line.strip().split(",")] for line in fh if line.strip()]
    r0 = np.array(rows, dtype=float)
    if r0.shape != (N, N):
        raise ValueError(f"expected {N} x {N} matrix, got {r0.shape}")
    with open(types_path) as fh:
        labels = [line.strip() for line in fh if line.strip()]
    rng = np.random.default_rng(0)  # unused: types are given
    return make_initial("given", N, alphabet, rng, matrix=r0, types=labels)
