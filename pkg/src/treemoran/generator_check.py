"""Exact finite-population generator evaluation and martingale / quadratic-variation
consistency checks.

``omega_N`` evaluates the four generator terms on a supplied test function:

  growth      < 2 * sum_{i<j} dphi/dr_ij >            (analytic or central FD)
  resampling  gamma/2 * sum over ordered coordinate pairs of <phi o theta_kl - phi>
  mutation    theta * sum_k < B_k phi >               (exact alphabet sums)
  selection   haploid  alpha/N   sum_{k,l} < chi_k (phi o theta_kl - phi) >
              diploid  alpha/N^2 sum_{k,l,m} < chi'_{k,m} (phi o theta_kl - phi) >

Averages are over samples without replacement.  Coordinates beyond the test
function's degree are collapsed by exchangeability onto one or two fresh
coordinates with multiplicities (N - n) and (N - n)(N - n - 1); coordinate
pairs with k = l are kept in the sums for literal fidelity (they contribute
exactly zero).  Averaging is exact enumeration over ordered tuples for
N <= 12 and degree <= 4, Monte Carlo with a reported standard error
otherwise.

``martingale_residual`` compares the exact drift with (E[Phi(U_h)] - Phi(u))/h
over engine replicates, and ``qv_check`` compares the empirical quadratic
variation of Phi along paths with the resampling second-order formula
integrated along the same paths.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .model import (
    ModelParams,
    PopulationState,
    VARIANT_DIPLOID,
    VARIANT_DISTANCE,
    VARIANT_HAPLOID,
    VARIANT_NEUTRAL,
)
from .stats import PolynomialSpec

__all__ = ["GeneratorReport", "omega_N", "martingale_residual", "qv_check", "polynomial_value"]

_FD_STEP = 1e-6
_EXACT_N_MAX = 12
_EXACT_DEGREE_MAX = 4


@dataclass
class GeneratorReport:
    drift_exact: Optional[float] = None
    drift_exact_se: float = 0.0
    drift_empirical: Optional[float] = None
    drift_se: float = 0.0
    qv_formula: Optional[float] = None
    qv_formula_se: float = 0.0
    qv_empirical: Optional[float] = None
    qv_se: float = 0.0
    h: Optional[float] = None
    T: Optional[float] = None
    reps: int = 0
    seed: Optional[int] = None

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def _growth_term(spec: PolynomialSpec, dist, marks) -> float:
    if spec.growth is not None:
        return float(spec.growth(dist, marks))
    n = spec.n
    total = 0.0
    d = dist.copy()
    for i in range(n):
        for j in range(i + 1, n):
            orig = d[i, j]
            d[i, j] = d[j, i] = orig + _FD_STEP
            up = spec.fn(d, marks)
            d[i, j] = d[j, i] = orig - _FD_STEP
            dn = spec.fn(d, marks)
            d[i, j] = d[j, i] = orig
            total += (up - dn) / (2.0 * _FD_STEP)
    return 2.0 * total


def _theta(dist, marks, k, l):
    """Coordinate l becomes a copy of coordinate k (distances and mark)."""
    d = dist.copy()
    m = marks.copy()
    d[l, :] = d[k, :]
    d[:, l] = d[:, k]
    d[k, l] = d[l, k] = 0.0
    d[l, l] = 0.0
    m[l] = m[k]
    return d, m


def _tuple_size(spec: PolynomialSpec, params: ModelParams) -> int:
    n = spec.n
    if params.fitness.variant in (VARIANT_DIPLOID, VARIANT_DISTANCE) and params.alpha > 0:
        return n + 2
    return n + 1


def _pair_fitness(params: ModelParams, u_k, u_m, r_km) -> float:
    return params.fitness.acceptance(int(u_k), int(u_m), float(r_km))


def _omega_on_tuple(spec: PolynomialSpec, params: ModelParams, dist, marks) -> float:
    """All generator terms evaluated on one sampled coordinate tuple."""
    n = spec.n
    N = params.N
    base = float(spec.fn(dist, marks))
    total = _growth_term(spec, dist, marks)

    # resampling over ordered coordinate pairs; l > n vanish, k > n collapse
    halfg = params.gamma / 2.0
    if params.gamma > 0:
        acc = 0.0
        for l in range(n):
            for k in range(n):
                if k == l:
                    continue
                d2, m2 = _theta(dist, marks, k, l)
                acc += float(spec.fn(d2, m2)) - base
            d2, m2 = _theta(dist, marks, n, l)  # fresh coordinate, multiplicity N - n
            acc += (N - n) * (float(spec.fn(d2, m2)) - base)
        total += halfg * acc

    kern = params.mutation
    if kern.rate > 0:
        eff = kern.effective()
        acc = 0.0
        for k in range(n):
            m2 = marks.copy()
            row = eff[int(marks[k])]
            avg = 0.0
            for v, w in enumerate(row):
                if w > 0:
                    m2[k] = v
                    avg += w * float(spec.fn(dist, m2))
            acc += avg - base
        total += kern.rate * acc

    if params.alpha > 0 and params.fitness.variant != VARIANT_NEUTRAL:
        if params.fitness.variant == VARIANT_HAPLOID:
            chi = params.fitness.chi
            acc = 0.0
            for l in range(n):
                for k in range(n):  # k == l kept, contributes zero
                    d2, m2 = _theta(dist, marks, k, l)
                    acc += float(chi[int(marks[k])]) * (float(spec.fn(d2, m2)) - base)
                d2, m2 = _theta(dist, marks, n, l)
                acc += (N - n) * float(chi[int(marks[n])]) * (float(spec.fn(d2, m2)) - base)
            total += params.alpha / N * acc
        else:
            f1, f2 = n, n + 1  # the two fresh coordinates
            acc = 0.0
            for l in range(n):
                for k in range(n):
                    d2, m2 = _theta(dist, marks, k, l)
                    dphi = float(spec.fn(d2, m2)) - base
                    if dphi != 0.0:
                        wsum = 0.0
                        for mm in range(n):
                            wsum += _pair_fitness(params, marks[k], marks[mm], dist[k, mm])
                        wsum += (N - n) * _pair_fitness(params, marks[k], marks[f1], dist[k, f1])
                        acc += wsum * dphi
                d2, m2 = _theta(dist, marks, f1, l)
                dphi = float(spec.fn(d2, m2)) - base
                if dphi != 0.0:
                    wsum = 0.0
                    for mm in range(n):
                        wsum += _pair_fitness(params, marks[f1], marks[mm], dist[f1, mm])
                    wsum += (N - n - 1) * _pair_fitness(params, marks[f1], marks[f2], dist[f1, f2])
                    wsum += _pair_fitness(params, marks[f1], marks[f1], 0.0)
                    acc += wsum * dphi
            total += params.alpha / N**2 * acc
    return total


def omega_N(
    state: PopulationState,
    spec: PolynomialSpec,
    params: ModelParams,
    mc_tuples: int = 4000,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """(value, SE) of the finite-population generator applied to the test function.

    SE is zero in exact-enumeration mode (N <= 12 and degree <= 4).
    """
    N = state.N
    n = spec.n
    m = _tuple_size(spec, params)
    if m > N:
        raise ValueError(f"need N >= {m} for degree-{n} tests under this fitness")
    r = state.distance_matrix()
    types = state.types
    if N <= _EXACT_N_MAX and n <= _EXACT_DEGREE_MAX:
        total = 0.0
        count = 0
        for idx in itertools.permutations(range(N), m):
            ii = np.array(idx, dtype=np.intp)
            total += _omega_on_tuple(spec, params, r[np.ix_(ii, ii)], types[ii].copy())
            count += 1
        return total / count, 0.0
    if rng is None:
        rng = np.random.default_rng(0)
    vals = np.empty(mc_tuples)
    for s in range(mc_tuples):
        ii = rng.choice(N, size=m, replace=False)
        vals[s] = _omega_on_tuple(spec, params, r[np.ix_(ii, ii)], types[ii].copy())
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(mc_tuples))


def polynomial_value(
    state: PopulationState,
    spec: PolynomialSpec,
    rng: Optional[np.random.Generator] = None,
    mc_tuples: int = 4000,
    exact_limit: int = 20000,
) -> float:
    """The polynomial Phi(state): exact average over ordered tuples when cheap."""
    if spec.population_average is not None:
        return float(spec.population_average(state.distance_matrix(), state.types))
    N = state.N
    n = spec.n
    count = 1
    for i in range(n):
        count *= N - i
    r = state.distance_matrix()
    types = state.types
    if count <= exact_limit:
        total = 0.0
        for idx in itertools.permutations(range(N), n):
            ii = np.array(idx, dtype=np.intp)
            total += float(spec.fn(r[np.ix_(ii, ii)], types[ii]))
        return total / count
    if rng is None:
        rng = np.random.default_rng(0)
    vals = np.empty(mc_tuples)
    for s in range(mc_tuples):
        ii = rng.choice(N, size=n, replace=False)
        vals[s] = float(spec.fn(r[np.ix_(ii, ii)], types[ii]))
    return float(vals.mean())


def martingale_residual(
    params: ModelParams,
    spec: PolynomialSpec,
    initial: PopulationState,
    h: float,
    reps: int,
    seed: int,
) -> GeneratorReport:
    """Short-time drift check: (E[Phi(U_h)] - Phi(u0)) / h against the exact generator.

    The guideline h <= 0.1 / (gamma * N) keeps the multi-event bias term C*h
    small; estimate C by halving h.
    """
    from ._fastsim import FastSim

    drift_exact, drift_exact_se = omega_N(
        initial, spec, params, rng=np.random.default_rng((seed, 1))
    )
    phi0 = polynomial_value(initial, spec)
    vals = np.empty(reps)
    for rep in range(reps):
        st = initial.copy()
        FastSim(st, params, seed=(seed, 2, rep)).run(initial.t + h)
        vals[rep] = (polynomial_value(st, spec, rng=np.random.default_rng((seed, 3, rep))) - phi0) / h
    return GeneratorReport(
        drift_exact=drift_exact,
        drift_exact_se=drift_exact_se,
        drift_empirical=float(vals.mean()),
        drift_se=float(vals.std(ddof=1) / math.sqrt(reps)),
        h=h,
        reps=reps,
        seed=seed,
    )


def _qv_integrand(spec: PolynomialSpec, state: PopulationState, gamma: float,
                  tuples: int, rng: np.random.Generator) -> float:
    """gamma * sum_{k,l=1..n} < psi o theta_{k, n+l} - psi > with psi = phi * (phi o shift)."""
    n = spec.n
    N = state.N
    r = state.distance_matrix()
    types = state.types
    acc = 0.0
    for _ in range(tuples):
        ii = rng.choice(N, size=2 * n, replace=False)
        d = r[np.ix_(ii, ii)]
        m = types[ii].copy()
        phi_a = float(spec.fn(d[:n, :n], m[:n]))
        phi_b = float(spec.fn(d[n:, n:], m[n:]))
        psi = phi_a * phi_b
        val = 0.0
        for k in range(n):
            for l in range(n):
                d2, m2 = _theta(d, m, k, n + l)
                val += float(spec.fn(d2[:n, :n], m2[:n])) * float(
                    spec.fn(d2[n:, n:], m2[n:])
                ) - psi
        acc += val
    return gamma * acc / tuples


def qv_check(
    params: ModelParams,
    spec: PolynomialSpec,
    initial: PopulationState,
    T: float,
    reps: int,
    seed: int,
    grid: int = 100,
    integrand_tuples: int = 300,
) -> GeneratorReport:
    """Empirical quadratic variation of Phi versus the resampling second-order formula.

    Both sides are computed along the same simulated paths: the empirical side
    sums squared increments of Phi over the time grid, the formula side
    integrates the displayed second-order term (trapezoidal rule on the grid).
    """
    from ._fastsim import FastSim

    times = np.linspace(initial.t, initial.t + T, grid + 1)
    qv_emp = np.empty(reps)
    qv_form = np.empty(reps)
    for rep in range(reps):
        st = initial.copy()
        sim = FastSim(st, params, seed=(seed, rep))
        rng = np.random.default_rng((seed, 17, rep))
        phis = np.empty(grid + 1)
        integrand = np.empty(grid + 1)
        phis[0] = polynomial_value(st, spec, rng=rng)
        integrand[0] = _qv_integrand(spec, st, params.gamma, integrand_tuples, rng)
        for g in range(1, grid + 1):
            sim.run(times[g])
            phis[g] = polynomial_value(st, spec, rng=rng)
            integrand[g] = _qv_integrand(spec, st, params.gamma, integrand_tuples, rng)
        qv_emp[rep] = float(np.sum(np.diff(phis) ** 2))
        qv_form[rep] = float(np.trapezoid(integrand, times))
    return GeneratorReport(
        qv_empirical=float(qv_emp.mean()),
        qv_se=float(qv_emp.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0,
        qv_formula=float(qv_form.mean()),
        qv_formula_se=float(qv_form.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0,
        T=T,
        reps=reps,
        seed=seed,
    )
