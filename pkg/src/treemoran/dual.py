"""Function-valued dual process over an expression grammar.

A dual state is a bounded test function of finitely many (distance, mark)
coordinates, represented as an expression tree that records the jump history:

  Leaf      built-in seed function exp(-sum lam_pq r_pq) * prod 1{u_p = type}
  Grown     argument shift r -> r + 2*dt between jumps
  Coalesce  victim slot l is removed, its occurrences rerouted to slot k
  MutPI     slot k's mark replaced by an average over the house-of-cards
            distribution; the slot itself stays in the distance structure
            (dropping it would change the value whenever the child reads the
            slot's distances and would break the duality identity), so the
            degree shrinks only once no distances are read (degree 1 -> 0)
  MutPD     slot k's mark redrawn from the parent-dependent kernel row
  SelHap    chi(u_k)*child + (1 - chi(u_k)) * child-with-slot-k-replaced-by-
            a-fresh-individual
  SelDip    same with pair fitness chi'(u_k, u_partner, r) against a fresh
            partner slot

Evaluation at a concrete (matrix, marks) argument applies the transforms
outermost-first, materializing the virtual argument.  Kernel-averaged marks
are carried as distribution-valued variables; a leaf factorizes over mark
variables, so parent-independent mutation never branches and the evaluation
stays exact.  Only nodes that interrogate an averaged mark pointwise
(selection, parent-dependent mutation) branch over the alphabet.

Degree bookkeeping follows the jump table (Coalesce and MutPI decrease the
degree, SelHap/SelDip increase it by 1/2); once the degree hits zero the
expression is a genuine constant and is folded to one.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .model import (
    FitnessSpec,
    ModelParams,
    PopulationState,
    VARIANT_HAPLOID,
    VARIANT_NEUTRAL,
)
from .stats import sample_marked_matrix

__all__ = [
    "Leaf",
    "Const",
    "Grown",
    "Coalesce",
    "MutPI",
    "MutPD",
    "SelHap",
    "SelDip",
    "evaluate",
    "dual_step",
    "run_dual",
    "duality_gap",
    "DualityReport",
    "leaf_pair_laplace",
    "leaf_marked_pair_laplace",
    "leaf_triangle_laplace",
]

MAX_NODES = 100_000


# -- expression nodes ------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    """exp(-sum coeffs[p,q]*r_pq) * prod indicators; coefficients must be >= 0."""

    degree: int
    coeffs: tuple  # ((p, q, lam), ...) with p < q < degree
    indicators: tuple  # ((position, type), ...)
    bound: float = 1.0

    @property
    def input_dim(self) -> int:
        return self.degree

    @property
    def size(self) -> int:
        return 1


@dataclass(frozen=True)
class Const:
    value: float
    bound: float

    degree = 0
    input_dim = 0
    size = 1


@dataclass(frozen=True)
class Grown:
    child: "Expr"
    dt: float

    @property
    def degree(self):
        return self.child.degree

    @property
    def input_dim(self):
        return self.child.input_dim

    @property
    def size(self):
        return self.child.size + 1

    @property
    def bound(self):
        return self.child.bound


@dataclass(frozen=True)
class Coalesce:
    child: "Expr"
    k: int
    l: int

    def __post_init__(self):
        n = self.child.degree
        if not (0 <= self.k < n and 0 <= self.l < n) or self.k == self.l:
            raise ValueError("coalescence needs distinct slots within the degree")

    @property
    def degree(self):
        return self.child.degree - 1

    @property
    def input_dim(self):
        return self.child.input_dim - 1

    @property
    def size(self):
        return self.child.size + 1

    @property
    def bound(self):
        return self.child.bound


@dataclass(frozen=True)
class MutPI:
    child: "Expr"
    k: int
    bar_beta: tuple

    @property
    def degree(self):
        # a degree-1 child reads no distances, so averaging its only mark
        # yields a constant; otherwise the slot's distances remain live
        return 0 if self.child.degree <= 1 else self.child.degree

    @property
    def input_dim(self):
        return self.child.input_dim

    @property
    def size(self):
        return self.child.size + 1

    @property
    def bound(self):
        return self.child.bound


@dataclass(frozen=True)
class MutPD:
    child: "Expr"
    k: int
    tilde_beta: tuple  # row-major tuple of tuples

    @property
    def degree(self):
        return self.child.degree

    @property
    def input_dim(self):
        return self.child.input_dim

    @property
    def size(self):
        return self.child.size + 1

    @property
    def bound(self):
        return self.child.bound


@dataclass(frozen=True)
class SelHap:
    child: "Expr"
    k: int
    chi: tuple

    @property
    def degree(self):
        return self.child.degree + 1

    @property
    def input_dim(self):
        return self.child.input_dim + 1

    @property
    def size(self):
        return self.child.size + 1

    @property
    def bound(self):
        return self.child.bound


@dataclass(frozen=True)
class SelDip:
    child: "Expr"
    k: int
    fitness: FitnessSpec

    @property
    def degree(self):
        return self.child.degree + 2

    @property
    def input_dim(self):
        return self.child.input_dim + 2

    @property
    def size(self):
        return self.child.size + 1

    @property
    def bound(self):
        return self.child.bound


Expr = Union[Leaf, Const, Grown, Coalesce, MutPI, MutPD, SelHap, SelDip]


def leaf_pair_laplace(lam: float) -> Leaf:
    return Leaf(degree=2, coeffs=((0, 1, lam),), indicators=())


def leaf_marked_pair_laplace(lam: float, fit_type: int = 0) -> Leaf:
    return Leaf(degree=2, coeffs=((0, 1, lam),), indicators=((0, fit_type),))


def leaf_triangle_laplace(lam: float) -> Leaf:
    return Leaf(degree=3, coeffs=((0, 1, lam), (0, 2, lam), (1, 2, lam)), indicators=())


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class _Concrete:
    value: int


@dataclass(frozen=True)
class _Averaged:
    var: int
    weights: tuple


def _subst(marks, var, value):
    return [
        _Concrete(value) if isinstance(m, _Averaged) and m.var == var else m for m in marks
    ]


def _resolve(marks, pos):
    """Yield (weight, concrete value, marks-after-substitution) for slot pos."""
    m = marks[pos]
    if isinstance(m, _Concrete):
        return [(1.0, m.value, marks)]
    out = []
    for v, w in enumerate(m.weights):
        if w > 0.0:
            out.append((w, v, _subst(marks, m.var, v)))
    return out


def _delete_slot(D, marks, k):
    keep = [p for p in range(len(marks)) if p != k]
    return D[np.ix_(keep, keep)], [marks[p] for p in keep]


def _eval(node, D, marks, counter) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Leaf):
        acc = 0.0
        for p, q, lam in node.coeffs:
            acc += lam * D[p, q]
        val = math.exp(-acc)
        required = {}
        for pos, typ in node.indicators:
            m = marks[pos]
            if isinstance(m, _Concrete):
                if m.value != typ:
                    return 0.0
            else:
                prev = required.get(m.var)
                if prev is None:
                    required[m.var] = (typ, m.weights)
                elif prev[0] != typ:
                    return 0.0
        for typ, weights in required.values():
            val *= weights[typ]
        return val
    if isinstance(node, Grown):
        D2 = D + 2.0 * node.dt
        np.fill_diagonal(D2, 0.0)
        return _eval(node.child, D2, marks, counter)
    if isinstance(node, Coalesce):
        k, l = node.k, node.l
        kk = k - 1 if k > l else k
        m_child = len(marks) + 1
        idx = [p if p < l else (kk if p == l else p - 1) for p in range(m_child)]
        D2 = D[np.ix_(idx, idx)]
        np.fill_diagonal(D2, 0.0)
        return _eval(node.child, D2, [marks[i] for i in idx], counter)
    if isinstance(node, MutPI):
        marks2 = list(marks)
        marks2[node.k] = _Averaged(next(counter), node.bar_beta)
        return _eval(node.child, D, marks2, counter)
    if isinstance(node, MutPD):
        k = node.k
        total = 0.0
        for w, v, marks_v in _resolve(marks, k):
            fresh = _Averaged(next(counter), node.tilde_beta[v])
            marks2 = list(marks_v)
            marks2[k] = fresh
            total += w * _eval(node.child, D, marks2, counter)
        return total
    if isinstance(node, SelHap):
        k = node.k
        total = 0.0
        for w, v, marks_v in _resolve(marks, k):
            p = node.chi[v]
            val = 0.0
            if p > 0.0:
                val += p * _eval(node.child, D, marks_v, counter)
            if p < 1.0:
                D2, marks2 = _delete_slot(D, marks_v, k)
                val += (1.0 - p) * _eval(node.child, D2, marks2, counter)
            total += w * val
        return total
    if isinstance(node, SelDip):
        k = node.k
        q = node.child.degree + 1  # fresh partner slot
        total = 0.0
        for wk, vk, marks_k in _resolve(marks, k):
            for wq, vq, marks_kq in _resolve(marks_k, q):
                p = node.fitness.acceptance(vk, vq, float(D[k, q]))
                val = 0.0
                if p > 0.0:
                    val += p * _eval(node.child, D, marks_kq, counter)
                if p < 1.0:
                    D2, marks2 = _delete_slot(D, marks_kq, k)
                    val += (1.0 - p) * _eval(node.child, D2, marks2, counter)
                total += wk * wq * val
        return total
    raise TypeError(f"unknown node {type(node)!r}")


def evaluate(expr: Expr, matrix: np.ndarray, marks: Sequence[int]) -> float:
    """Evaluate the dual state at a concrete (distance matrix, mark vector) argument.

    The argument must supply at least ``expr.input_dim`` rows: the declared
    degree plus one row per selection jump in the history (fresh-individual
    slots are read from the extra rows).
    """
    m = expr.input_dim
    D = np.asarray(matrix, dtype=float)
    if D.shape[0] < m or D.shape[1] < m:
        raise ValueError(f"need a sample of dimension >= {m}, got {D.shape[0]}")
    if len(marks) < m:
        raise ValueError(f"need {m} marks, got {len(marks)}")
    keep = max(m, 1)  # transforms index relative to the argument size
    if D.shape[0] < keep:
        D = np.zeros((1, 1))
        marks = [0]
    mk = [_Concrete(int(v)) for v in list(marks)[:keep]]
    return _eval(expr, D[:keep, :keep].astype(float), mk, itertools.count())


def _fold_if_constant(expr: Expr) -> Expr:
    if expr.degree > 0 or isinstance(expr, Const):
        return expr
    m = max(expr.input_dim, 1)
    val = evaluate(expr, np.zeros((m, m)), [0] * m)
    return Const(value=val, bound=expr.bound)


# -- jump dynamics ----------------------------------------------------------------


def _transition_rates(expr: Expr, params: ModelParams):
    n = expr.degree
    coal = params.gamma * n * (n - 1) / 2.0
    mut = params.mutation.rate * n
    sel = 0.0 if params.fitness.variant == VARIANT_NEUTRAL else params.alpha * n
    return coal, mut, sel


def dual_step(expr: Expr, params: ModelParams, rng: np.random.Generator):
    """One jump: (holding time, next expression).  Degree-0 states are absorbing."""
    n = expr.degree
    if n == 0:
        return math.inf, expr
    coal, mut, sel = _transition_rates(expr, params)
    total = coal + mut + sel
    if total <= 0.0:
        return math.inf, expr
    dt = float(rng.exponential(1.0 / total))
    grown = Grown(expr, dt) if dt > 0 else expr
    u = rng.random() * total
    kern = params.mutation
    if u < coal:
        i = int(rng.random() * n * (n - 1))
        k = i // (n - 1)
        j = i % (n - 1)
        l = j + (1 if j >= k else 0)
        new = Coalesce(grown, k, l)
    elif u < coal + mut:
        k = int(rng.random() * n)
        if rng.random() < kern.z:
            new = MutPI(grown, k, tuple(float(x) for x in kern.bar_beta))
        else:
            new = MutPD(grown, k, tuple(tuple(float(x) for x in row) for row in kern.tilde_beta))
    else:
        k = int(rng.random() * n)
        if params.fitness.variant == VARIANT_HAPLOID:
            new = SelHap(grown, k, tuple(float(x) for x in params.fitness.chi))
        else:
            new = SelDip(grown, k, params.fitness)
    return dt, _fold_if_constant(new)


def run_dual(expr: Expr, t: float, params: ModelParams, rng: np.random.Generator) -> Expr:
    """Run the dual for time t exactly, wrapping elapsed time as growth."""
    remaining = float(t)
    cur = expr
    while remaining > 0.0:
        if cur.degree == 0:
            return cur  # constants do not grow
        dt, nxt = dual_step(cur, params, rng)
        if dt >= remaining:
            return _fold_if_constant(Grown(cur, remaining)) if remaining > 0 else cur
        cur = nxt
        remaining -= dt
        if cur.size > MAX_NODES:
            raise RuntimeError(f"dual expression exceeded {MAX_NODES} nodes")
    return cur


# -- two-sided duality check -------------------------------------------------------


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    gap: float
    se_lhs: float
    se_rhs: float
    se: float
    N: int
    reps: int
    t: float

    def as_dict(self):
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "gap": self.gap,
            "se_lhs": self.se_lhs,
            "se_rhs": self.se_rhs,
            "se": self.se,
            "N": self.N,
            "reps": self.reps,
            "t": self.t,
        }


def duality_gap(
    initial_state: PopulationState,
    expr: Expr,
    t: float,
    params: ModelParams,
    reps: int,
    rng: np.random.Generator,
    samples_per_rep: int = 16,
    dual_reps: Optional[int] = None,
) -> DualityReport:
    """Compare E[<nu^{U_t}, xi>] (forward runs) with E[<nu^{u0}, Xi_t>] (dual runs).

    The left side runs ``reps`` forward replicates from a copy of the initial
    state and averages the seed function over samples of the final states;
    the right side runs dual replicates and averages the evolved expression
    over samples of the initial state.
    """
    from ._fastsim import FastSim  # deferred: numba import cost

    N = initial_state.N
    n0 = expr.input_dim
    lhs_vals = np.empty(reps)
    for rep in range(reps):
        st = initial_state.copy()
        FastSim(st, params, seed=int(rng.integers(2**63))).run(t)
        acc = 0.0
        for _ in range(samples_per_rep):
            s = sample_marked_matrix(st, n0, "without_replacement", rng)
            acc += evaluate(expr, s.dist, s.marks)
        lhs_vals[rep] = acc / samples_per_rep
    lhs = float(lhs_vals.mean())
    se_lhs = float(lhs_vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0

    d_reps = dual_reps if dual_reps is not None else max(4 * reps, 100)
    rhs_vals = np.empty(d_reps)
    for rep in range(d_reps):
        xi = run_dual(expr, t, params, rng)
        acc = 0.0
        for _ in range(samples_per_rep):
            s = sample_marked_matrix(initial_state, xi.input_dim, "without_replacement", rng)
            acc += evaluate(xi, s.dist, s.marks)
        rhs_vals[rep] = acc / samples_per_rep
    rhs = float(rhs_vals.mean())
    se_rhs = float(rhs_vals.std(ddof=1) / math.sqrt(d_reps)) if d_reps > 1 else 0.0

    gap = lhs - rhs
    se = math.hypot(se_lhs, se_rhs)
    return DualityReport(lhs, rhs, gap, se_lhs, se_rhs, se, N, reps, t)
