"""Input-constrained adaptive control of scalar stochastic linear systems.

Saturated certainty-equivalence control with least-squares identification and
uniform excitation, together with the constants of its mean-square stability
analysis and the Monte-Carlo machinery used to check them.
"""

from satadapt.errors import DomainError, EmptyDatasetError, InapplicableError
from satadapt.sim import (
    ControllerConfig,
    RandomStreams,
    StepRecord,
    SystemParams,
    Trajectory,
    compute_gain,
    control_input,
    saturate,
    simulate_closed_loop,
    simulate_reference,
    simulate_uncontrolled,
)
from satadapt.estimator import (
    ParameterEstimate,
    RegressorDataset,
    pseudo_inverse_2x2,
    solve_ols,
)

__all__ = [
    "ControllerConfig",
    "DomainError",
    "EmptyDatasetError",
    "InapplicableError",
    "ParameterEstimate",
    "RandomStreams",
    "RegressorDataset",
    "StepRecord",
    "SystemParams",
    "Trajectory",
    "compute_gain",
    "control_input",
    "pseudo_inverse_2x2",
    "saturate",
    "simulate_closed_loop",
    "simulate_reference",
    "simulate_uncontrolled",
    "solve_ols",
]

__version__ = "0.1.0"
