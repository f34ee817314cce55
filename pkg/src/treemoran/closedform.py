"""Closed-form equilibrium values for the neutral two-type model and the
small-selection expansion of the pair-distance Laplace transform.

Conventions: the two types are "fit" (index 0) and "unfit" (index 1); theta_b
is the mutation rate away from fit, theta_g the rate toward fit, each applied
at rate theta/2 per individual with theta_bar = theta_b + theta_g.  lam is
the Laplace variable of the subtree-length functionals.

Every displayed value has two independent routes: ``neutral_moments``
evaluates the closed forms, ``neutral_moments_by_solve`` assembles the
stationarity equations of the moment recursion as a linear system and solves
it numerically.  ``omega0_residuals`` plugs a table into the eight
equilibrium equations directly.

The displayed closed form for E[Phi2_02] exists in two variants differing in
one inner denominator (gamma + theta_b - theta_g versus gamma + theta_bar);
the "plus" variant is the one consistent with the equilibrium equations and
is the default.  The "minus" variant is kept behind ``phi02_variant`` for
comparison against the raw display.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

__all__ = [
    "NeutralMomentTable",
    "neutral_moments",
    "neutral_moments_by_solve",
    "omega0_residuals",
    "f_coefficient",
    "f_from_moment_combination",
    "theorem5_proof_combination",
    "theorem5_laplace",
    "theorem5_mean_distance",
]


@dataclass(frozen=True)
class NeutralMomentTable:
    gamma: float
    theta_b: float
    theta_g: float
    lam: float
    phi1_00: float
    phi1_10: float
    phi1_01: float
    phi1_11: float
    phi1_02: float
    phi2_00: float
    phi2_10: float
    phi2_01: float
    phi2_20: float
    phi2_11: float
    phi2_02: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "phi1_00": self.phi1_00,
            "phi1_10": self.phi1_10,
            "phi1_01": self.phi1_01,
            "phi1_11": self.phi1_11,
            "phi1_02": self.phi1_02,
            "phi2_00": self.phi2_00,
            "phi2_10": self.phi2_10,
            "phi2_01": self.phi2_01,
            "phi2_20": self.phi2_20,
            "phi2_11": self.phi2_11,
            "phi2_02": self.phi2_02,
        }


def _check_rates(gamma: float, theta_b: float, theta_g: float, lam: float) -> None:
    if gamma <= 0 or theta_b <= 0 or theta_g <= 0:
        raise ValueError("gamma, theta_b, theta_g must all be > 0")
    if lam < 0:
        raise ValueError("lam must be >= 0")


def neutral_moments(
    gamma: float, theta_b: float, theta_g: float, lam: float, phi02_variant: str = "plus"
) -> NeutralMomentTable:
    """Evaluate the displayed equilibrium moment formulas exactly."""
    _check_rates(gamma, theta_b, theta_g, lam)
    tbar = theta_b + theta_g
    m1 = theta_g / tbar
    m2 = m1 * (gamma + theta_g) / (gamma + tbar)
    p200 = gamma / (gamma + 2 * lam)
    p210 = p200 * m1
    p220 = m1 * p200 * (gamma + 2 * lam + theta_g) / (gamma + 2 * lam + tbar)
    a = (gamma + theta_g) / (gamma + 2 * lam)
    b = (gamma + theta_g) / (gamma + tbar)
    d = p200 * (gamma + 2 * lam + theta_g) / (gamma + 2 * lam + tbar)
    p211 = m1 * gamma / (3 * gamma + 2 * lam + tbar) * (a + b + d)
    if phi02_variant == "plus":
        c = (gamma + theta_g) / (gamma + tbar)
    elif phi02_variant == "minus":
        den = gamma + theta_b - theta_g
        if den == 0:
            raise ZeroDivisionError("minus variant singular at gamma + theta_b = theta_g")
        c = (gamma + theta_g) / den
    else:
        raise ValueError("phi02_variant must be 'plus' or 'minus'")
    p202 = (
        m1
        * gamma
        / (6 * gamma + 2 * lam + tbar)
        * (a + b + 4 * gamma / (3 * gamma + 2 * lam + tbar) * (a + c + d))
    )
    return NeutralMomentTable(
        gamma, theta_b, theta_g, lam,
        phi1_00=1.0, phi1_10=m1, phi1_01=m1, phi1_11=m2, phi1_02=m2,
        phi2_00=p200, phi2_10=p210, phi2_01=p210,
        phi2_20=p220, phi2_11=p211, phi2_02=p202,
    )


def omega0_residuals(table: NeutralMomentTable) -> Dict[str, float]:
    """Left-hand sides of the eight neutral equilibrium equations; all must vanish."""
    g = table.gamma
    tb, tg = table.theta_b, table.theta_g
    tbar = tb + tg
    lam = table.lam
    t = table
    res = {
        "phi1_11": 0.5 * (tg * t.phi1_01 - tbar * t.phi1_11 + tg * t.phi1_10 - tbar * t.phi1_11)
        + g * (t.phi1_10 - t.phi1_11),
        "phi1_02": (tg * t.phi1_01 - tbar * t.phi1_02) + g * (t.phi1_01 - t.phi1_02),
        "phi2_00": -2 * lam * t.phi2_00 + g * (1.0 - t.phi2_00),
        "phi2_10": -2 * lam * t.phi2_10
        + 0.5 * (tg * t.phi2_00 - tbar * t.phi2_10)
        + g * (t.phi1_10 - t.phi2_10),
        "phi2_01": -2 * lam * t.phi2_01
        + 0.5 * (tg * t.phi2_00 - tbar * t.phi2_01)
        + g * (t.phi1_01 - t.phi2_01 + 2 * t.phi2_10 - 2 * t.phi2_01),
        "phi2_20": -2 * lam * t.phi2_20
        + (tg * t.phi2_10 - tbar * t.phi2_20)
        + g * (t.phi1_10 - t.phi2_20),
        "phi2_11": -2 * lam * t.phi2_11
        + 0.5 * (tg * t.phi2_01 - tbar * t.phi2_11 + tg * t.phi2_10 - tbar * t.phi2_11)
        + g * (t.phi1_11 - t.phi2_11 + t.phi2_10 - t.phi2_11 + t.phi2_20 - t.phi2_11),
        "phi2_02": -2 * lam * t.phi2_02
        + (tg * t.phi2_01 - tbar * t.phi2_02)
        + g * (t.phi1_02 - t.phi2_02 + t.phi2_01 - t.phi2_02 + 4 * t.phi2_11 - 4 * t.phi2_02),
    }
    return res


# -- linear-system oracle ---------------------------------------------------------

_UNKNOWNS = ["m1", "m2", "phi2_00", "phi2_10", "phi2_01", "phi2_20", "phi2_11", "phi2_02"]
_PHI2_SLOT = {(0, 0): "phi2_00", (1, 0): "phi2_10", (0, 1): "phi2_01",
              (2, 0): "phi2_20", (1, 1): "phi2_11", (0, 2): "phi2_02"}


def _canon(n: int, i: int, j: int):
    """Map a moment index to an unknown slot or the constant 1.

    For n <= 1 the tree factor is 1 and only the number of distinct tested
    marks matters (exchangeability), so the slot is the marks-only moment.
    """
    if n >= 2:
        return _PHI2_SLOT[(i, j)]
    m = i + j
    if m == 0:
        return None  # constant 1
    if m == 1:
        return "m1"
    if m == 2:
        return "m2"
    raise ValueError(f"unexpected moment index ({n}, {i}, {j})")


def _action_terms(n: int, i: int, j: int, gamma: float, tb: float, tg: float, lam: float):
    """Coefficients of the stationary moment recursion applied to Phi^n_ij.

    Mutation replaces one tested mark at rate theta_bar/2 each; resampling
    acts on all pairs of the n + j tested individuals, grouped by whether the
    pair lies inside the subtree and carries marks.  Growth contributes
    -n*lam for n >= 2.
    """
    tbar = tb + tg
    terms: List[Tuple[float, tuple]] = []
    diag = 0.0
    if n >= 2:
        diag += -n * lam
    # mutation on the i in-tree marks and j outside marks
    diag += -(i + j) * tbar / 2.0
    if i:
        terms.append((i * tg / 2.0, (n, i - 1, j)))
    if j:
        terms.append((j * tg / 2.0, (n, i, j - 1)))
    # resampling pair groups: (coalesced target, multiplicity)
    groups = [
        (i * (i - 1) / 2.0, (n - 1, i - 1, j)),
        (i * (n - i), (n - 1, i, j)),
        ((n - i) * (n - i - 1) / 2.0, (n - 1, i, j)),
        (i * j, (n, i, j - 1)),
        ((n - i) * j, (n, i + 1, j - 1)),
        (j * (j - 1) / 2.0, (n, i, j - 1)),
    ]
    for mult, target in groups:
        if mult:
            terms.append((gamma * mult, target))
            diag += -gamma * mult
    terms.append((diag, (n, i, j)))
    return terms


def neutral_moments_by_solve(
    gamma: float, theta_b: float, theta_g: float, lam: float
) -> NeutralMomentTable:
    """Independent oracle: assemble the equilibrium linear system and solve it."""
    _check_rates(gamma, theta_b, theta_g, lam)
    eqs = [(1, 1, 0), (1, 0, 1), (1, 1, 1), (1, 0, 2),
           (2, 0, 0), (2, 1, 0), (2, 0, 1), (2, 2, 0), (2, 1, 1), (2, 0, 2)]
    A = np.zeros((len(eqs), len(_UNKNOWNS)))
    rhs = np.zeros(len(eqs))
    col = {name: k for k, name in enumerate(_UNKNOWNS)}
    for row, (n, i, j) in enumerate(eqs):
        for coef, target in _action_terms(n, i, j, gamma, theta_b, theta_g, lam):
            slot = _canon(*target)
            if slot is None:
                rhs[row] -= coef  # constant moved to the right-hand side
            else:
                A[row, col[slot]] += coef
    sol, residual, rank, sv = np.linalg.lstsq(A, rhs, rcond=None)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
    if rank < len(_UNKNOWNS) or not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(
            f"equilibrium system is numerically singular (rank {rank}, cond {cond:.3g})"
        )
    x = {name: float(sol[k]) for k, name in enumerate(_UNKNOWNS)}
    return NeutralMomentTable(
        gamma, theta_b, theta_g, lam,
        phi1_00=1.0, phi1_10=x["m1"], phi1_01=x["m1"], phi1_11=x["m2"], phi1_02=x["m2"],
        phi2_00=x["phi2_00"], phi2_10=x["phi2_10"], phi2_01=x["phi2_01"],
        phi2_20=x["phi2_20"], phi2_11=x["phi2_11"], phi2_02=x["phi2_02"],
    )


# -- small-selection expansion ----------------------------------------------------


def f_coefficient(gamma: float, theta_b: float, theta_g: float, lam: float) -> float:
    """Second-order coefficient of E[exp(-lam*R12)] in the selection strength."""
    _check_rates(gamma, theta_b, theta_g, lam)
    tbar = theta_b + theta_g
    num = 8 * gamma * theta_b * theta_g * (2 * gamma + 2 * lam + tbar) * lam
    den = (
        tbar
        * (gamma + tbar)
        * (gamma + 2 * lam + tbar)
        * (6 * gamma + 2 * lam + tbar)
        * (gamma + 2 * lam) ** 2
        * (6 * gamma + 4 * lam + tbar)
    )
    return num / den


def theorem5_proof_combination(
    gamma: float, theta_b: float, theta_g: float, lam: float, as_displayed: bool = False
) -> float:
    """The moment combination E[Phi2_20 - 4*Phi2_11 + 3*Phi2_02] under neutrality.

    With ``as_displayed`` the raw closed form printed in the proof is returned
    instead; it carries a spurious extra factor (gamma + 2*lam) relative to
    the table value (the final expansion display is consistent with the
    table route, not with this intermediate display).
    """
    _check_rates(gamma, theta_b, theta_g, lam)
    if as_displayed:
        tbar = theta_b + theta_g
        return (
            2 * gamma * theta_b * theta_g * (2 * gamma + 2 * lam + tbar) * lam
            / (tbar * (gamma + tbar) * (gamma + 2 * lam + tbar) * (6 * gamma + 2 * lam + tbar))
        )
    t = neutral_moments(gamma, theta_b, theta_g, lam)
    return t.phi2_20 - 4 * t.phi2_11 + 3 * t.phi2_02


def f_from_moment_combination(
    gamma: float, theta_b: float, theta_g: float, lam: float
) -> float:
    """Reassemble f from the neutral table and the expansion prefactor chain."""
    tbar = theta_b + theta_g
    combo = theorem5_proof_combination(gamma, theta_b, theta_g, lam)
    pref = 2.0 / ((gamma + 2 * lam) * (3 * gamma + 2 * lam + tbar / 2.0))
    return pref * combo


def theorem5_laplace(
    gamma: float, theta_b: float, theta_g: float, lam: float, alpha: float
) -> float:
    """gamma/(gamma+2lam) + f*alpha^2; the truncation error is O(alpha^3)."""
    return gamma / (gamma + 2 * lam) + f_coefficient(gamma, theta_b, theta_g, lam) * alpha**2


def theorem5_mean_distance(gamma: float, theta_b: float, theta_g: float, alpha: float) -> float:
    """Second-order expansion of the mean pair distance in equilibrium."""
    _check_rates(gamma, theta_b, theta_g, 0.0)
    tbar = theta_b + theta_g
    coef = 8 * theta_b * theta_g * (2 * gamma + tbar) / (
        tbar * (gamma + tbar) ** 2 * (6 * gamma + tbar) ** 2
    )
    return (2.0 - coef * alpha**2) / gamma
