"""Finite sampled realizations of the marked distance matrix and polynomial functionals.

An n-sample of a population state is the n x n submatrix of genealogical
distances plus the n type marks, drawn with or without replacement.  A
polynomial functional is the average of a bounded test function of such a
sample; the subtree-length family used by the equilibrium checks is

    phi^n_ij(r, u) = exp(-lambda * l_n(r)) * 1{u_1 = fit} ... 1{u_i = fit}
                     * 1{u_{n+1} = fit} ... 1{u_{n+j} = fit},

where l_n is the total branch length of the subtree spanned by the first n
leaves.  On ultrametric matrices l_n equals HALF the minimal single-cycle
tour of the pairwise distances (each tree edge is traversed exactly twice by
the optimal tour); for n = 1 the tour is empty and the factor is 1.

Two independent routes to l_n are provided: ``tree_length`` enumerates the
(n-1)!/2 single cycles (the definition), ``tree_length_oracle`` reconstructs
the ultrametric tree by single linkage and sums branch lengths.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import PopulationState

__all__ = [
    "MarkedMatrixSample",
    "PolynomialSpec",
    "sample_marked_matrix",
    "tree_length",
    "tree_length_oracle",
    "estimate_polynomial",
    "phi_ij_n",
    "laplace_pair_distance",
    "poly_constant",
    "poly_pair_distance",
    "poly_pair_laplace",
    "poly_pair_laplace_marked",
    "poly_mark_indicator",
]

_EXACT_N_MAX = 12
_EXACT_DEGREE_MAX = 4
_CYCLE_N_MAX = 10


@dataclass
class MarkedMatrixSample:
    """n sampled individuals: symmetric distance submatrix plus type marks."""

    dist: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=float)
        m = np.asarray(self.marks)
        if d.shape != (m.size, m.size):
            raise ValueError("dist must be n x n matching marks")
        if d.size and (np.abs(np.diag(d)).max() > 1e-9 or not np.allclose(d, d.T, atol=1e-9)):
            raise ValueError("dist must be symmetric with zero diagonal")
        self.dist = d
        self.marks = m

    @property
    def n(self) -> int:
        return self.marks.size


@dataclass(frozen=True)
class PolynomialSpec:
    """Bounded test function of the first ``n`` sampled individuals.

    ``fn(dist, marks)`` receives the n x n distance block and n marks.
    ``growth``, when given, must return the pointwise growth integrand
    2 * sum_{i<j} dphi/dr_ij analytically; otherwise central finite
    differences (step 1e-6) are used where needed.
    """

    n: int
    fn: Callable[[np.ndarray, np.ndarray], float]
    bound: float
    growth: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    population_average: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    name: str = ""


def sample_marked_matrix(
    state: PopulationState, n: int, mode: str, rng: np.random.Generator
) -> MarkedMatrixSample:
    """Draw an n-sample of (distances, marks) from the state's sampling measure."""
    N = state.N
    if mode == "with_replacement":
        idx = rng.integers(0, N, size=n)
    elif mode == "without_replacement":
        if n > N:
            raise ValueError(f"cannot draw {n} without replacement from {N}")
        idx = rng.choice(N, size=n, replace=False)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    r = state.distance_matrix()
    sub = r[np.ix_(idx, idx)].copy()
    np.fill_diagonal(sub, 0.0)
    return MarkedMatrixSample(dist=sub, marks=state.types[idx].copy())


# -- tree length ---------------------------------------------------------------

_cycle_cache: dict = {}


def _cycle_tables(n: int):
    """Index arrays (prev, nxt) of all single n-cycles through 0..n-1, up to direction."""
    key = n
    if key not in _cycle_cache:
        seqs = []
        for perm in itertools.permutations(range(1, n)):
            if n <= 2 or perm[0] < perm[-1]:  # quotient out the tour direction
                seqs.append((0,) + perm)
        tour = np.array(seqs, dtype=np.intp)
        nxt = np.roll(tour, -1, axis=1)
        _cycle_cache[key] = (tour, nxt)
    return _cycle_cache[key]


def _tree_length_matrix(r: np.ndarray) -> float:
    n = r.shape[0]
    if n < 2:
        return 0.0
    if n > _CYCLE_N_MAX:
        raise ValueError(f"cycle enumeration limited to n <= {_CYCLE_N_MAX}, got {n}")
    tour, nxt = _cycle_tables(n)
    sums = r[tour, nxt].sum(axis=1)
    return 0.5 * float(sums.min())


def tree_length(sample: MarkedMatrixSample) -> float:
    """Half the minimal single-cycle tour of the pairwise distances.

    Equals the branch length of the subtree spanned by the sample on
    ultrametric inputs.  Requires n >= 2.
    """
    if sample.n < 2:
        raise ValueError("tree length needs at least two leaves")
    return _tree_length_matrix(sample.dist)


def _check_ultrametric(r: np.ndarray, tol: float = 1e-9) -> None:
    n = r.shape[0]
    big = np.maximum(r[:, None, :], r.T[None, :, :])
    idx = np.arange(n)
    big[idx, :, idx] = np.inf
    big[:, idx, idx] = np.inf
    excess = r - big.min(axis=2)
    np.fill_diagonal(excess, -np.inf)
    if excess.max() > tol:
        k, l = np.unravel_index(int(excess.argmax()), excess.shape)
        raise ValueError(f"matrix is not ultrametric at pair ({k}, {l}), excess {excess.max():g}")


def tree_length_oracle(sample: MarkedMatrixSample) -> float:
    """Independent route: single-linkage reconstruction, summing branch lengths.

    Clusters merge at height r/2; every cluster contributes an edge from its
    birth height to its merge height.  Ultrametric input only.
    """
    if sample.n < 2:
        raise ValueError("tree length needs at least two leaves")
    r = sample.dist
    _check_ultrametric(r)
    n = sample.n
    parent = list(range(n))
    birth = [0.0] * n  # birth height of each cluster representative

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    pairs = sorted(((r[i, j], i, j) for i in range(n) for j in range(i + 1, n)))
    total = 0.0
    merges = 0
    for d, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        h = d / 2.0
        total += (h - birth[ri]) + (h - birth[rj])
        parent[rj] = ri
        birth[ri] = h
        merges += 1
        if merges == n - 1:
            break
    return total


# -- polynomial estimation -------------------------------------------------------


def _evaluate_checked(spec: PolynomialSpec, dist, marks, idx) -> float:
    val = float(spec.fn(dist, marks))
    if abs(val) > spec.bound + 1e-12:
        raise ValueError(
            f"test function {spec.name or 'phi'} exceeded its bound {spec.bound} "
            f"on sample {tuple(int(i) for i in idx)}: value {val}"
        )
    return val


def estimate_polynomial(
    state: PopulationState,
    spec: PolynomialSpec,
    reps: int,
    mode: str,
    rng: np.random.Generator,
):
    """Monte Carlo (mean, SE) of the test function over n-samples of the state.

    Without replacement and for N <= 12, n <= 4 the average is computed by
    exact enumeration of all ordered n-tuples (SE = 0).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    n = spec.n
    N = state.N
    r = state.distance_matrix()
    types = state.types
    if mode == "without_replacement" and N <= _EXACT_N_MAX and n <= _EXACT_DEGREE_MAX:
        total = 0.0
        count = 0
        for idx in itertools.permutations(range(N), n):
            ii = np.array(idx, dtype=np.intp)
            total += _evaluate_checked(spec, r[np.ix_(ii, ii)], types[ii], ii)
            count += 1
        return total / count, 0.0
    vals = np.empty(reps)
    for rep in range(reps):
        s = sample_marked_matrix(state, n, mode, rng)
        idx = np.zeros(0)  # indices not retained by sample; report rep number instead
        val = float(spec.fn(s.dist, s.marks))
        if abs(val) > spec.bound + 1e-12:
            raise ValueError(
                f"test function {spec.name or 'phi'} exceeded its bound {spec.bound} "
                f"on replicate {rep}: value {val}"
            )
        vals[rep] = val
    se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return float(vals.mean()), se


def phi_ij_n(
    sample: MarkedMatrixSample, i: int, j: int, n: int, lam: float, fit_type: int = 0
) -> float:
    """Subtree-length test function e^{-lam*l_n} with i in-tree and j outside fit-marks.

    The tree factor is 1 for n = 1 (single leaf spans no length); the marks
    tested are positions 1..i and n+1..n+j of the sample.
    """
    if not 0 <= i <= n:
        raise ValueError("need 0 <= i <= n")
    if j < 0 or sample.n < n + j:
        raise ValueError(f"sample of size {sample.n} too small for (n={n}, j={j})")
    if n >= 2:
        val = math.exp(-lam * _tree_length_matrix(sample.dist[:n, :n]))
    else:
        val = 1.0
    marks = sample.marks
    for p in range(i):
        if marks[p] != fit_type:
            return 0.0
    for p in range(n, n + j):
        if marks[p] != fit_type:
            return 0.0
    return val


def laplace_pair_distance(
    state: PopulationState, lam: float, reps: int, rng: np.random.Generator
):
    """(mean, SE) of exp(-lam * r_12) over pair samples without replacement."""
    return estimate_polynomial(state, poly_pair_laplace(lam), reps, "without_replacement", rng)


# -- built-in test functions (with analytic growth integrands) -------------------


def poly_constant(value: float = 1.0) -> PolynomialSpec:
    return PolynomialSpec(
        n=0,
        fn=lambda d, m: value,
        bound=abs(value),
        growth=lambda d, m: 0.0,
        name="const",
    )


def _offdiag_mean(values: np.ndarray) -> float:
    N = values.shape[0]
    return float((values.sum() - np.trace(values)) / (N * (N - 1)))


def poly_pair_distance(bound: float = 1e9) -> PolynomialSpec:
    """phi = r_12 (unbounded in principle; bound is a sanity guard)."""
    return PolynomialSpec(
        n=2,
        fn=lambda d, m: float(d[0, 1]),
        bound=bound,
        growth=lambda d, m: 2.0,
        population_average=lambda r, types: _offdiag_mean(r),
        name="r12",
    )


def poly_pair_laplace(lam: float) -> PolynomialSpec:
    def fn(d, m):
        return math.exp(-lam * d[0, 1])

    def pop_avg(r, types):
        e = np.exp(-lam * r)
        return _offdiag_mean(e)

    return PolynomialSpec(
        n=2,
        fn=fn,
        bound=1.0,
        growth=lambda d, m: -2.0 * lam * math.exp(-lam * d[0, 1]),
        population_average=pop_avg,
        name=f"exp(-{lam}*r12)",
    )


def poly_pair_laplace_marked(lam: float, fit_type: int = 0) -> PolynomialSpec:
    def fn(d, m):
        if m[0] != fit_type:
            return 0.0
        return math.exp(-lam * d[0, 1])

    def growth(d, m):
        if m[0] != fit_type:
            return 0.0
        return -2.0 * lam * math.exp(-lam * d[0, 1])

    def pop_avg(r, types):
        e = np.exp(-lam * r) * (types == fit_type)[:, None]
        return _offdiag_mean(e)

    return PolynomialSpec(
        n=2, fn=fn, bound=1.0, growth=growth, population_average=pop_avg, name="exp*mark"
    )


def poly_mark_indicator(position: int = 0, fit_type: int = 0) -> PolynomialSpec:
    return PolynomialSpec(
        n=position + 1,
        fn=lambda d, m: 1.0 if m[position] == fit_type else 0.0,
        bound=1.0,
        growth=lambda d, m: 0.0,
        population_average=lambda r, types: float((types == fit_type).mean()),
        name=f"1{{u{position}={fit_type}}}",
    )
