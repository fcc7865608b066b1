"""Constraint-aware uncertainty quantification for regression.

Modules:

- ``expr``: constraint DSL, expression trees, gradients and linearization
- ``extract``: template-based constraint extraction from a knowledge graph
- ``bnn``: mean-field Gaussian variational MLP with a heteroscedastic head
- ``csl``: Euclidean projection onto the feasible set, its Jacobian and
  covariance propagation
- ``calib``: calibration metrics, variance adjustment and the training loss
- ``explain``: template-rendered explanations of projections
- ``harness``: configs, synthetic tasks, pipelines and the ``constraint-uq`` CLI
"""

from .errors import (
    ConstraintError,
    ConstraintUQError,
    ConvergenceError,
    DataError,
    DomainError,
    InfeasibleError,
    NumericalError,
    ParseError,
)

__version__ = "0.1.0"
