"""treemoran: tree-valued Moran model simulation and verification laboratory.

Evolves the full marked genealogical distance matrix of a finite Moran
population forward in time (resampling, mutation, haploid / diploid /
distance-dependent selection), evaluates polynomial functionals of the
resulting marked metric measure space, runs the function-valued dual process,
and checks both against closed-form equilibrium and small-selection formulas.
"""

from .model import (
    TypeAlphabet,
    MutationKernel,
    FitnessSpec,
    ModelParams,
    PopulationState,
    make_initial,
    pair_distance,
    validate,
    two_type_alphabet,
    two_type_kernel,
)
from .engine import (
    EventLog,
    Replacement,
    Mutation,
    MoranEngine,
    total_rates,
    draw_event,
    apply_replacement,
    apply_mutation,
    run_until,
    replay,
)

__version__ = "0.1.0"
