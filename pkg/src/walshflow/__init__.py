"""Walsh Brownian motion and stochastic flows on star graphs.

Simulation and verification toolkit: closed-form semigroup evaluation,
path constructions (excursion flips, Skorokhod reflection, scaled random
walks), lattice flows of mappings and kernels with shared noise, and the
statistical checks that tie the simulations back to the analytic laws.
"""

from walshflow.graph import (
    GraphPoint,
    GraphSpec,
    PiecewiseFunction,
    distance,
    embed_line,
    flux_defect,
    project_line,
    validate_spec,
)

__version__ = "0.1.0"

__all__ = [
    "GraphSpec",
    "GraphPoint",
    "PiecewiseFunction",
    "validate_spec",
    "distance",
    "flux_defect",
    "embed_line",
    "project_line",
    "__version__",
]
